#include <omp.h>

#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "mop/kernels.hpp"
#include "mop/tensor.hpp"
#include "test_util.hpp"

using namespace mop;
using mop::testing::max_abs_diff;
using mop::testing::random_matrix;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a(i, k) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

double rel(const Matrix& a, const Matrix& b) {
  return mop::testing::relative_error(a.data(), b.data());
}

template <typename Real>
std::vector<Real> random_values(std::size_t n, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(rng.normal(stddev));
  return v;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
  CHECK_THROWS_AS(Matrix::from_rows({{1, 2}, {3}}), ShapeError);
}

TEST_CASE("matmul examples") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(a, Matrix::identity(2)) == a);
  const Matrix c = matmul(a, Matrix::from_rows({{5}, {6}}));
  CHECK(c(0, 0) == 17);
  CHECK(c(1, 0) == 39);
  CHECK_THROWS_AS(matmul(a, Matrix::matrix(3, 2)), ShapeError);
}

TEST_CASE("matmul matches the triple loop") {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 7, 5), b = random_matrix(rng, 5, 3);
  CHECK(rel(matmul(a, b), naive_matmul(a, b)) <= 1e-12);
  // shapes straddling the register tile
  for (auto [p, q, r] : {std::tuple{1, 1, 1}, {4, 17, 16}, {9, 33, 47}, {13, 64, 192}}) {
    const Matrix x = random_matrix(rng, p, q), y = random_matrix(rng, q, r);
    CHECK(rel(matmul(x, y), naive_matmul(x, y)) <= 1e-12);
  }
}

TEST_CASE("matmul associativity") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(rng, 4, 4), b = random_matrix(rng, 4, 4),
                 c = random_matrix(rng, 4, 4);
    CHECK(rel(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-10);
  }
}

TEST_CASE("rowwise softmax") {
  const Matrix s = rowwise_softmax(Matrix::from_rows({{0, 0, 0}}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const Matrix big = rowwise_softmax(Matrix::from_rows({{1000, 0}}));
  CHECK(big.all_finite());
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) < 1e-300);
  Rng rng(3);
  const Matrix r = rowwise_softmax(random_matrix(rng, 20, 13, 3.0));
  for (std::size_t i = 0; i < r.rows(); ++i) {
    double sum = 0.0;
    for (double v : r.row(i)) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("layer norm and gelu") {
  const Matrix gain({4}, 1.0), bias({4}, 0.0);
  const Matrix flat = layer_norm(Matrix::from_rows({{3, 3, 3, 3}}), gain, bias);
  for (double v : flat.data()) CHECK(v == 0.0);
  Rng rng(4);
  const Matrix x = random_matrix(rng, 10, 64, 5.0);
  const Matrix y = layer_norm(x, Matrix({64}, 1.0), Matrix({64}, 0.0));
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(i)) mean += v;
    mean /= 64.0;
    for (double v : y.row(i)) var += (v - mean) * (v - mean);
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(var / 64.0 == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(gelu(Matrix::from_rows({{0.0}}))[0] == 0.0);
  // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  const double v = 1.3;
  const double expect =
      0.5 * v * (1 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
  CHECK(gelu(Matrix::from_rows({{v}}))[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("solve_linear") {
  Rng rng(5);
  const Matrix b = random_matrix(rng, 3, 2);
  CHECK(max_abs_diff(solve_linear(Matrix::identity(3), b), b) == 0.0);
  const Matrix d = solve_linear(Matrix::from_rows({{2, 0}, {0, 4}}), Matrix::from_rows({{2}, {4}}));
  CHECK(d(0, 0) == doctest::Approx(1.0));
  CHECK(d(1, 0) == doctest::Approx(1.0));
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = random_matrix(rng, 5, 5);
    for (std::size_t i = 0; i < 5; ++i) a(i, i) += 5.0;
    const Matrix rhs = random_matrix(rng, 5, 3);
    const Matrix x = solve_linear(a, rhs);
    CHECK(frobenius_norm(sub(matmul(a, x), rhs)) <= 1e-8 * frobenius_norm(rhs));
  }
  CHECK_THROWS_AS(solve_linear(Matrix::from_rows({{1, 2}, {2, 4}}), Matrix::matrix(2, 1)),
                  SingularMatrixError);
}

TEST_CASE("spectral radius") {
  CHECK(spectral_radius(Matrix::identity(2)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(spectral_radius(Matrix::from_rows({{0, 1}, {0, 0}})) == 0.0);
  CHECK(std::abs(spectral_radius(Matrix::from_rows({{0, 4}, {1, 0}})) - 2.0) <= 1e-3);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = random_matrix(rng, 10, 10);
    const double rho = spectral_radius(a);
    for (double c : {0.5, 2.0}) {
      CHECK(std::abs(spectral_radius(scale(a, c)) - c * rho) <= 1e-3);
    }
  }
  // diagonal oracle
  Matrix diag = Matrix::matrix(10, 10);
  for (std::size_t i = 0; i < 10; ++i) diag(i, i) = -0.1 * static_cast<double>(i);
  CHECK(std::abs(spectral_radius(diag) - 0.9) <= 1e-3);
}

TEST_CASE("ops are pure") {
  Rng rng(7);
  const Matrix a = random_matrix(rng, 6, 6), b = random_matrix(rng, 6, 6);
  CHECK(matmul(a, b) == matmul(a, b));
  CHECK(rowwise_softmax(a) == rowwise_softmax(a));
  CHECK(spectral_radius(a) == spectral_radius(a));
  CHECK(gelu(a) == gelu(a));
}

TEST_CASE("parallel kernels agree with the serial reference") {
  SUBCASE("matmul, bit-identical accumulation order") {
    for (auto [p, q, r] : {std::tuple{64, 64, 192}, {37, 29, 70}, {3200, 64, 5}}) {
      const auto a = random_values<double>(p * q, 10), b = random_values<double>(q * r, 11);
      std::vector<double> c1(p * r), c2(p * r);
      kernels::matmul(a.data(), b.data(), c1.data(), p, q, r);
      reference::matmul(a.data(), b.data(), c2.data(), p, q, r);
      CHECK(c1 == c2);
    }
  }
  SUBCASE("softmax and layer norm") {
    const std::size_t rows = 50, cols = 37;
    const auto x = random_values<double>(rows * cols, 12, 4.0);
    std::vector<double> y1(x.size()), y2(x.size());
    kernels::softmax_rows(x.data(), y1.data(), rows, cols);
    reference::softmax_rows(x.data(), y2.data(), rows, cols);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-14);
    const auto g = random_values<double>(cols, 13), bias = random_values<double>(cols, 14);
    std::vector<double> xhat(x.size()), rstd(rows);
    kernels::layer_norm_forward(x.data(), g.data(), bias.data(), y1.data(), xhat.data(),
                                rstd.data(), rows, cols, 1e-5);
    reference::layer_norm_forward(x.data(), g.data(), bias.data(), y2.data(), rows, cols, 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-12);
  }
  SUBCASE("gelu") {
    const auto x = random_values<double>(4096, 15, 6.0);
    std::vector<double> y1(x.size()), y2(x.size());
    kernels::gelu_forward(x.data(), y1.data(), x.size());
    reference::gelu_forward(x.data(), y2.data(), x.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-14 * (1 + std::abs(x[i])));
    const auto xf = random_values<float>(4096, 16, 6.0);
    std::vector<float> f1(xf.size()), f2(xf.size());
    kernels::gelu_forward(xf.data(), f1.data(), xf.size());
    reference::gelu_forward(xf.data(), f2.data(), xf.size());
    for (std::size_t i = 0; i < xf.size(); ++i) CHECK(std::abs(f1[i] - f2[i]) <= 1e-6f * (1 + std::abs(xf[i])));
  }
  SUBCASE("causal attention") {
    const std::size_t batch = 3, seq = 11, heads = 4, hd = 5;
    const auto qkv = random_values<double>(batch * seq * 3 * heads * hd, 17);
    std::vector<double> o1(batch * seq * heads * hd), o2(o1.size()), probs(batch * heads * seq * seq);
    kernels::causal_attention_forward(qkv.data(), o1.data(), probs.data(), batch, seq, heads, hd);
    reference::causal_attention_forward(qkv.data(), o2.data(), batch, seq, heads, hd);
    for (std::size_t i = 0; i < o1.size(); ++i) CHECK(std::abs(o1[i] - o2[i]) <= 1e-12);
    for (std::size_t bh = 0; bh < batch * heads; ++bh)
      for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t j = i + 1; j < seq; ++j) CHECK(probs[(bh * seq + i) * seq + j] == 0.0);
  }
}

TEST_CASE("kernel results do not depend on the thread count") {
  const int saved = omp_get_max_threads();
  const std::size_t p = 200, q = 64, r = 192;
  const auto a = random_values<float>(p * q, 20), b = random_values<float>(q * r, 21);
  const std::size_t batch = 8, seq = 20, heads = 4, hd = 16;
  const auto qkv = random_values<float>(batch * seq * 3 * heads * hd, 22);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    std::vector<float> c(p * r), out(batch * seq * heads * hd), probs(batch * heads * seq * seq),
        dq(qkv.size()), g(p * q);
    kernels::matmul(a.data(), b.data(), c.data(), p, q, r);
    kernels::causal_attention_forward(qkv.data(), out.data(), probs.data(), batch, seq, heads, hd);
    kernels::causal_attention_backward(qkv.data(), probs.data(), out.data(), dq.data(), batch, seq,
                                       heads, hd);
    kernels::gelu_backward(a.data(), a.data(), g.data(), p * q);
    c.insert(c.end(), out.begin(), out.end());
    c.insert(c.end(), dq.begin(), dq.end());
    c.insert(c.end(), g.begin(), g.end());
    return c;
  };
  const auto one = run(1);
  CHECK(run(3) == one);
  CHECK(run(8) == one);
  omp_set_num_threads(saved);
}
