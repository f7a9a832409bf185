#include "mop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "mop/kernels.hpp"

namespace mop {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

template <typename Real>
Tensor<Real> Tensor<Real>::from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<Real> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw ShapeError("ragged rows in Tensor::from_rows");
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

template <typename Real>
Tensor<Real> Tensor<Real>::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i) = Real(1);
  }
  return out;
}

template <typename Real>
Tensor<Real> Tensor<Real>::column(std::span<const Real> values) {
  return Tensor({values.size(), 1}, std::vector<Real>(values.begin(), values.end()));
}

template <typename Real>
std::size_t Tensor<Real>::rows() const noexcept {
  if (shape_.size() < 2) {
    return shape_.empty() ? 1 : 1;
  }
  return data_.size() / shape_.back();
}

template <typename Real>
std::size_t Tensor<Real>::cols() const noexcept {
  if (shape_.empty()) {
    return 1;
  }
  if (shape_.size() == 1) {
    return shape_[0];
  }
  return shape_.back();
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename Real>
Tensor<Real> Tensor<Real>::transposed() const {
  Tensor out({cols(), rows()});
  kernels::transpose(ptr(), out.ptr(), rows(), cols());
  return out;
}

template <typename Real>
bool Tensor<Real>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

namespace {

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.rows() || b.rank() > 2) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  Tensor<Real> out({a.rows(), b.cols()});
  kernels::matmul(a.ptr(), b.ptr(), out.ptr(), a.rows(), a.cols(), b.cols());
  return out;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "add");
  Tensor<Real> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += b[i];
  }
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Real> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= b[i];
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  Tensor<Real> out = a;
  for (auto& v : out.data()) {
    v *= factor;
  }
  return out;
}

template <typename Real>
Tensor<Real> rowwise_softmax(const Tensor<Real>& a) {
  if (a.cols() == 0) {
    throw ShapeError("rowwise_softmax: last dimension must be >= 1");
  }
  Tensor<Real> out(a.shape());
  kernels::softmax_rows(a.ptr(), out.ptr(), a.rows(), a.cols());
  return out;
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, const Tensor<Real>& gain, const Tensor<Real>& bias) {
  if (gain.size() != a.cols() || bias.size() != a.cols()) {
    throw ShapeError("layer_norm: gain/bias length must equal last dimension");
  }
  Tensor<Real> out(a.shape());
  std::vector<Real> xhat(a.size());
  std::vector<Real> rstd(a.rows());
  kernels::layer_norm_forward(a.ptr(), gain.ptr(), bias.ptr(), out.ptr(), xhat.data(),
                              rstd.data(), a.rows(), a.cols(), static_cast<Real>(kLayerNormEps));
  return out;
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  kernels::gelu_forward(a.ptr(), out.ptr(), a.size());
  return out;
}

#define MOP_INSTANTIATE_OPS(Real)                                                          \
  template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                 \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                    \
  template Tensor<Real> sub(const Tensor<Real>&, const Tensor<Real>&);                    \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                 \
  template Tensor<Real> rowwise_softmax(const Tensor<Real>&);                             \
  template Tensor<Real> layer_norm(const Tensor<Real>&, const Tensor<Real>&,              \
                                   const Tensor<Real>&);                                  \
  template Tensor<Real> gelu(const Tensor<Real>&);

MOP_INSTANTIATE_OPS(float)
MOP_INSTANTIATE_OPS(double)

#undef MOP_INSTANTIATE_OPS

Matrix solve_linear(const Matrix& a, const Matrix& b) {
  const std::size_t k = a.rows();
  if (a.cols() != k || b.rows() != k) {
    throw ShapeError("solve_linear: expected square a and matching b, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t r = b.cols();
  Matrix lu = a.reshaped({k, k});
  Matrix x = b.reshaped({k, r});
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t pivot = col;
    for (std::size_t i = col + 1; i < k; ++i) {
      if (std::abs(lu(i, col)) > std::abs(lu(pivot, col))) {
        pivot = i;
      }
    }
    if (std::abs(lu(pivot, col)) < 1e-12) {
      throw SingularMatrixError("solve_linear: pivot below 1e-12 at column " +
                                std::to_string(col));
    }
    if (pivot != col) {
      for (std::size_t j = 0; j < k; ++j) {
        std::swap(lu(col, j), lu(pivot, j));
      }
      for (std::size_t j = 0; j < r; ++j) {
        std::swap(x(col, j), x(pivot, j));
      }
    }
    const double diag = lu(col, col);
    for (std::size_t i = col + 1; i < k; ++i) {
      const double f = lu(i, col) / diag;
      if (f == 0.0) {
        continue;
      }
      for (std::size_t j = col; j < k; ++j) {
        lu(i, j) -= f * lu(col, j);
      }
      for (std::size_t j = 0; j < r; ++j) {
        x(i, j) -= f * x(col, j);
      }
    }
  }
  for (std::size_t ii = k; ii-- > 0;) {
    for (std::size_t j = 0; j < r; ++j) {
      double s = x(ii, j);
      for (std::size_t c = ii + 1; c < k; ++c) {
        s -= lu(ii, c) * x(c, j);
      }
      x(ii, j) = s / lu(ii, ii);
    }
  }
  return x;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) {
    s += v * v;
  }
  return std::sqrt(s);
}

Matrix symmetrized(const Matrix& a) {
  Matrix out = a;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

double spectral_norm(const Matrix& a, int iterations) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  if (a.size() == 0) {
    return 0.0;
  }
  // Fixed non-symmetric start vector so repeated calls are bit-identical.
  std::vector<double> v(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    v[j] = 1.0 + 0.37 * std::sin(1.3 * static_cast<double>(j) + 0.5);
  }
  std::vector<double> av(rows);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    double vnorm = 0.0;
    for (double e : v) {
      vnorm += e * e;
    }
    vnorm = std::sqrt(vnorm);
    if (vnorm == 0.0) {
      return 0.0;
    }
    for (double& e : v) {
      e /= vnorm;
    }
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        s += a(i, j) * v[j];
      }
      av[i] = s;
    }
    double avnorm = 0.0;
    for (double e : av) {
      avnorm += e * e;
    }
    sigma = std::sqrt(avnorm);
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        s += a(i, j) * av[i];
      }
      v[j] = s;
    }
  }
  return sigma;
}

double spectral_radius(const Matrix& a, int squarings) {
  if (a.rows() != a.cols()) {
    throw ShapeError("spectral_radius: matrix must be square, got " + shape_string(a.shape()));
  }
  const double initial = spectral_norm(a);
  if (initial == 0.0 || !std::isfinite(initial)) {
    return 0.0;
  }
  // A^(2^s) = exp(log_scale) * power, with power renormalized every step.
  Matrix power = scale(a, 1.0 / initial);
  double log_scale = std::log(initial);
  for (int s = 0; s < squarings; ++s) {
    Matrix sq = matmul(power, power);
    const double nrm = spectral_norm(sq);
    if (!(nrm > 1e-300)) {
      return 0.0;
    }
    power = scale(sq, 1.0 / nrm);
    log_scale = 2.0 * log_scale + std::log(nrm);
  }
  const double final_norm = spectral_norm(power);
  if (!(final_norm > 0.0)) {
    return 0.0;
  }
  return std::exp((log_scale + std::log(final_norm)) / std::ldexp(1.0, squarings));
}

}  // namespace mop
