#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mop {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major tensor. Rank-2 views treat the last dimension as columns
// and flatten everything before it into rows.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, Real fill = Real(0)) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows);
  static Tensor identity(std::size_t n);
  static Tensor column(std::span<const Real> values);
  static Tensor scalar(Real value) { return Tensor({1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  Real* ptr() noexcept { return data_.data(); }
  const Real* ptr() const noexcept { return data_.data(); }

  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return Tensor<To>(shape_, std::move(out));
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

using Matrix = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;

// Arithmetic on rank-2 tensors. All functions return new values.
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor);

template <typename Real>
Tensor<Real> rowwise_softmax(const Tensor<Real>& a);

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, const Tensor<Real>& gain, const Tensor<Real>& bias);

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& a);

// Gaussian elimination with partial pivoting. Throws SingularMatrixError
// when a pivot falls below 1e-12 in magnitude.
Matrix solve_linear(const Matrix& a, const Matrix& b);

// Largest singular value via power iteration on M^T M.
double spectral_norm(const Matrix& a, int iterations = 100);

// Gelfand estimate ||A^(2^s)||^(1/2^s) with s = squarings, renormalizing
// after every squaring and carrying the scale in log space.
double spectral_radius(const Matrix& a, int squarings = 16);

double frobenius_norm(const Matrix& a);
Matrix symmetrized(const Matrix& a);

}  // namespace mop
