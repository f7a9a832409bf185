#include <cmath>
#include <vector>

#include "doctest.h"
#include "mop/systems.hpp"
#include "test_util.hpp"

using namespace mop;

namespace {

LinearSystem scalar_system(double a, double c, double sw, double sv) {
  LinearSystem s;
  s.A = Matrix::from_rows({{a}});
  s.C = Matrix::from_rows({{c}});
  s.sigma_w = sw;
  s.sigma_v = sv;
  return s;
}

double autocovariance(std::span<const double> x, std::size_t lag) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = lag; i < x.size(); ++i) s += (x[i] - mean) * (x[i - lag] - mean);
  return s / static_cast<double>(x.size() - lag);
}

std::vector<double> column(const Matrix& m, std::size_t c) {
  std::vector<double> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = m(r, c);
  return out;
}

}  // namespace

TEST_CASE("dense sampling hits the target spectral radius") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::dense);
    CHECK(s.A.rows() == 10);
    CHECK(s.C.rows() == 5);
    CHECK(s.C.cols() == 10);
    CHECK(std::abs(spectral_radius(s.A) - 0.95) <= 1e-3);
    for (double c : s.C.data()) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
    }
  }
}

TEST_CASE("upper triangular sampling") {
  Rng rng(2);
  const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::upper_triangular);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(std::abs(s.A(i, i)) <= 0.95);
    for (std::size_t j = 0; j < i; ++j) CHECK(s.A(i, j) == 0.0);
    for (std::size_t j = i + 1; j < 10; ++j) CHECK(std::abs(s.A(i, j)) <= 1.0);
  }
}

TEST_CASE("seeded sampling is reproducible") {
  Rng a(3), b(3);
  const LinearSystem s1 = sample_linear_system(a, 10, 5, 0.95, SamplingMode::dense);
  const LinearSystem s2 = sample_linear_system(b, 10, 5, 0.95, SamplingMode::dense);
  CHECK(s1.A == s2.A);
  CHECK(s1.C == s2.C);
  const auto spec = distribution_preset("linear-dense");
  const TaskInstance t1 = sample_task(spec, 42, 3), t2 = sample_task(spec, 42, 3);
  CHECK(t1.linear().A == t2.linear().A);
  CHECK(simulate_task(t1, 30, 9).ys == simulate_task(t2, 30, 9).ys);
}

TEST_CASE("noise-free simulation") {
  Rng rng(4);
  const LinearSystem s = sample_linear_system(rng, 4, 2, 0.9, SamplingMode::dense, 0.0, 0.0);
  const Trajectory t = simulate(s, 50, NoiseModel::iid(), rng);
  CHECK(t.length() == 50);
  for (double v : t.ys.data()) CHECK(v == 0.0);
}

TEST_CASE("without process noise outputs equal measurement noise") {
  Rng rng(5);
  LinearSystem s = sample_linear_system(rng, 4, 2, 0.9, SamplingMode::dense, 0.0, 0.1);
  const NoiseSequence noise = draw_noise(rng, 40, 4, 2, 0.0, 0.1, NoiseModel::iid());
  const Trajectory t = propagate_linear(s, noise);
  CHECK(t.ys == noise.v);
}

TEST_CASE("scalar stationary output variance") {
  Rng rng(6);
  const LinearSystem s = scalar_system(0.9, 1.0, 0.1, 0.1);
  const std::size_t burn = 500, n = 100000;
  const Trajectory t = simulate(s, burn + n, NoiseModel::iid(), rng);
  const std::vector<double> y(t.ys.data().begin() + burn, t.ys.data().end());
  const double expect = 0.01 / (1.0 - 0.81) + 0.01;
  CHECK(std::abs(autocovariance(y, 0) - expect) <= 0.05 * expect);
}

TEST_CASE("moving-average noise moments") {
  Rng rng(7);
  const Matrix w = colored_noise_sequence(rng, 100000, 0.01, 5, 1);
  const auto x = column(w, 0);
  CHECK(std::abs(autocovariance(x, 0) - 0.05) <= 0.05 * 0.05);
  CHECK(std::abs(autocovariance(x, 1) - 0.04) <= 0.05 * 0.04);
  CHECK(std::abs(autocovariance(x, 5)) <= 0.002);

  const Matrix iid = colored_noise_sequence(rng, 100000, 0.01, 1, 1);
  const auto z = column(iid, 0);
  CHECK(std::abs(autocovariance(z, 0) - 0.01) <= 0.05 * 0.01);
  CHECK(std::abs(autocovariance(z, 1)) <= 0.002);
}

TEST_CASE("quadrotor step examples") {
  QuadrotorSystem q;
  const QuadState zero{};
  SUBCASE("hover is a fixed point") {
    const QuadState next = quadrotor_step(zero, {q.hover_thrust(), q.hover_thrust()}, zero, q);
    for (double v : next) CHECK(v == 0.0);
  }
  SUBCASE("free fall") {
    const QuadState next = quadrotor_step(zero, {0.0, 0.0}, zero, q);
    CHECK(next[4] == doctest::Approx(-1.0).epsilon(1e-14));
    for (std::size_t i : {0, 1, 2, 3, 5}) CHECK(next[i] == 0.0);
  }
  SUBCASE("torque row") {
    const QuadState next = quadrotor_step(zero, {1.0, 0.0}, zero, q);
    CHECK(std::abs(next[5]) == doctest::Approx(0.1).epsilon(1e-14));
  }
  SUBCASE("noise is additive") {
    const QuadState w{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    const QuadState next = quadrotor_step(zero, {q.hover_thrust(), q.hover_thrust()}, w, q);
    for (std::size_t i = 0; i < 6; ++i) CHECK(next[i] == doctest::Approx(w[i]));
  }
}

TEST_CASE("quadrotor sampling ranges") {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const QuadrotorSystem q = sample_quadrotor(rng);
    for (double p : {q.mass, q.arm, q.inertia}) {
      CHECK(p >= 0.5);
      CHECK(p <= 2.0);
    }
    CHECK(q.C.rows() == 3);
    CHECK(q.C.cols() == 6);
    for (double c : q.C.data()) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
    }
    const Matrix u = sample_random_inputs(rng, 20, q);
    for (double v : u.data()) CHECK(std::abs(v - q.hover_thrust()) <= 0.5);
  }
  Rng a(9), b(9);
  const QuadrotorSystem qa = sample_quadrotor(a), qb = sample_quadrotor(b);
  CHECK(qa.C == qb.C);
  CHECK(sample_random_inputs(a, 30, qa) == sample_random_inputs(b, 30, qb));
}

TEST_CASE("noise-free quadrotor simulation is reproducible") {
  Rng rng(10);
  QuadrotorSystem q = sample_quadrotor(rng, 0.0, 0.0);
  const Matrix u = sample_random_inputs(rng, 60, q);
  Rng n1(11), n2(12);
  const NoiseSequence a = draw_noise(n1, 60, 6, 3, 0.0, 0.0, NoiseModel::iid());
  const NoiseSequence b = draw_noise(n2, 60, 6, 3, 0.0, 0.0, NoiseModel::iid());
  const Trajectory ta = propagate_quadrotor(q, u, a), tb = propagate_quadrotor(q, u, b);
  CHECK(ta.ys == tb.ys);
  CHECK(ta.xs == tb.xs);
  CHECK(ta.us == u);
}

TEST_CASE("divergent systems are flagged") {
  const LinearSystem s = scalar_system(2.0, 1.0, 0.1, 0.1);
  Rng rng(13);
  CHECK_THROWS_AS(simulate(s, 200, NoiseModel::iid(), rng), DivergenceError);
}

TEST_CASE("contraction profile") {
  SUBCASE("scaled identity") {
    const StabilityProfile p = contraction_profile(scale(Matrix::identity(2), 0.5), 20);
    REQUIRE(p.power_norms.size() == 21);
    for (std::size_t t = 0; t <= 20; ++t)
      CHECK(p.power_norms[t] == doctest::Approx(std::pow(0.5, t)).epsilon(1e-9));
    CHECK(p.c_rho == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_FALSE(p.unstable);
  }
  SUBCASE("Jordan block overshoot") {
    const StabilityProfile p = contraction_profile(Matrix::from_rows({{0.9, 1.0}, {0.0, 0.9}}), 10);
    const Matrix a5 = Matrix::from_rows({{std::pow(0.9, 5), 5 * std::pow(0.9, 4)}, {0.0, std::pow(0.9, 5)}});
    CHECK(p.power_norms[5] == doctest::Approx(spectral_norm(a5)).epsilon(1e-6));
    CHECK(p.power_norms[5] > 1.0);
  }
  SUBCASE("unstable matrix") {
    const StabilityProfile p = contraction_profile(scale(Matrix::identity(3), 1.1), 5);
    CHECK(p.unstable);
  }
  SUBCASE("dense systems satisfy the exponential bound") {
    Rng rng(14);
    for (int i = 0; i < 10; ++i) {
      const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::dense);
      const StabilityProfile p = contraction_profile(s.A, 100);
      CHECK_FALSE(p.unstable);
      for (std::size_t t = 0; t <= 100; ++t)
        CHECK(p.power_norms[t] <= p.c_rho * std::pow(p.rho, static_cast<double>(t)) * (1 + 1e-9));
      // eventually monotone
      std::size_t t0 = 100;
      while (t0 > 0 && p.power_norms[t0] <= p.power_norms[t0 - 1]) --t0;
      CHECK(t0 < 100);
    }
  }
}

TEST_CASE("switching keeps the prefix") {
  const auto spec = distribution_preset("linear-switching");
  REQUIRE(spec.switch_time.has_value());
  const std::size_t ts = *spec.switch_time;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const TaskInstance task = sample_task(spec, 77, i);
    REQUIRE(task.switch_spec.has_value());
    TaskInstance plain = task;
    plain.switch_spec.reset();
    const Trajectory a = simulate_task(task, 100, 5 + i), b = simulate_task(plain, 100, 5 + i);
    for (std::size_t t = 0; t < ts; ++t)
      for (std::size_t j = 0; j < a.ys.cols(); ++j) CHECK(a.ys(t, j) == b.ys(t, j));
    bool differs = false;
    for (std::size_t t = ts; t < 100 && !differs; ++t)
      for (std::size_t j = 0; j < a.ys.cols(); ++j) differs |= a.ys(t, j) != b.ys(t, j);
    CHECK(differs);
  }
}

TEST_CASE("outputs are zero mean across systems") {
  for (const char* name : {"linear-dense", "linear-colored"}) {
    const auto spec = distribution_preset(name);
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::uint64_t i = 0; i < 200; ++i) {
      const TaskInstance task = sample_task(spec, 5, i);
      const Trajectory t = simulate_task(task, 50, derive_seed(5, i));
      // one coordinate at a fixed time keeps samples independent
      const double y = t.ys(30, 0);
      sum += y;
      sq += y * y;
      ++count;
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sq / static_cast<double>(count) - mean * mean;
    CHECK(std::abs(mean) <= 3.0 * std::sqrt(var / static_cast<double>(count)));
  }
}

TEST_CASE("presets") {
  for (const auto& name : distribution_preset_names()) {
    const auto spec = distribution_preset(name);
    CHECK(spec.name == name);
    const TaskInstance task = sample_task(spec, 1, 0);
    const Trajectory t = simulate_task(task, 20, 2);
    CHECK(t.length() == 20);
    CHECK(t.ys.cols() == task.output_dim());
    CHECK(t.ys.all_finite());
  }
  CHECK_THROWS_AS(distribution_preset("linear-nope"), UnknownPresetError);
  const auto quad = distribution_preset("quadrotor");
  CHECK(quad.input_dim() == 2);
  const auto colored = distribution_preset("linear-colored");
  CHECK(colored.noise.kind == NoiseKind::moving_average);
  CHECK(colored.noise.window == 5);
}
