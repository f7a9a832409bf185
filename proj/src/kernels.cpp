#include "mop/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <limits>
#include <type_traits>
#include <vector>

namespace mop {

namespace {

using Index = std::ptrdiff_t;

constexpr double kGeluCoeff = 0.044715;
constexpr double kSqrtTwoOverPi = 0.79788456080286535588;

// exp(z) for z <= 0 written so the compiler can vectorize it: z = n ln2 + r
// with |r| <= ln2/2, Taylor polynomial in r, 2^n assembled in the exponent
// bits. Relative error is near machine precision for both float and double.
template <typename Real>
inline Real exp_nonpositive(Real z) {
  if constexpr (std::is_same_v<Real, float>) {
    const bool underflow = z < -87.0f;
    z = std::max(z, -87.0f);
    const float n = std::floor(z * 1.44269504088896341f + 0.5f);
    const float r = (z - n * 0.693359375f) + n * 2.12194440e-4f;
    float p = 1.0f / 5040.0f;
    p = p * r + 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const std::int32_t e = (static_cast<std::int32_t>(n) + 127) << 23;
    return underflow ? 0.0f : p * std::bit_cast<float>(e);
  } else {
    const bool underflow = z < -708.0;
    z = std::max(z, -708.0);
    const double n = std::floor(z * 1.4426950408889634 + 0.5);
    const double r = (z - n * 0.693147180369123816490) - n * 1.90821492927058770002e-10;
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const std::int64_t e = (static_cast<std::int64_t>(n) + 1023) << 52;
    return underflow ? 0.0 : p * std::bit_cast<double>(e);
  }
}

template <typename Real>
inline Real fast_tanh(Real u) {
  const Real e = exp_nonpositive(Real(-2) * std::abs(u));
  const Real t = (Real(1) - e) / (Real(1) + e);
  return std::copysign(t, u);
}

// Output tile width in elements: two 512-bit vectors per row.
template <typename Real>
constexpr std::size_t tile_width() {
  return 128 / sizeof(Real);
}

// Four output rows times one column tile, accumulated in registers over the
// full inner dimension.
template <typename Real>
inline void matmul_block4(const Real* a, const Real* b, Real* c, std::size_t q, std::size_t r,
                          std::size_t j0) {
  constexpr std::size_t kW = tile_width<Real>();
  Real acc0[kW] = {}, acc1[kW] = {}, acc2[kW] = {}, acc3[kW] = {};
  const Real* a0 = a;
  const Real* a1 = a + q;
  const Real* a2 = a + 2 * q;
  const Real* a3 = a + 3 * q;
  for (std::size_t k = 0; k < q; ++k) {
    const Real* bk = b + k * r + j0;
    const Real x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
#pragma omp simd
    for (std::size_t j = 0; j < kW; ++j) {
      acc0[j] += x0 * bk[j];
      acc1[j] += x1 * bk[j];
      acc2[j] += x2 * bk[j];
      acc3[j] += x3 * bk[j];
    }
  }
  std::copy(acc0, acc0 + kW, c + j0);
  std::copy(acc1, acc1 + kW, c + r + j0);
  std::copy(acc2, acc2 + kW, c + 2 * r + j0);
  std::copy(acc3, acc3 + kW, c + 3 * r + j0);
}

template <typename Real>
inline void matmul_rows(const Real* a, const Real* b, Real* c, std::size_t rows, std::size_t q,
                        std::size_t r, std::size_t j_begin) {
  for (std::size_t i = 0; i < rows; ++i) {
    Real* ci = c + i * r;
    std::fill(ci + j_begin, ci + r, Real(0));
    const Real* ai = a + i * q;
    for (std::size_t k = 0; k < q; ++k) {
      const Real x = ai[k];
      const Real* bk = b + k * r;
      for (std::size_t j = j_begin; j < r; ++j) {
        ci[j] += x * bk[j];
      }
    }
  }
}

template <typename Real>
inline void softmax_row(const Real* x, Real* y, std::size_t n) {
  Real peak = x[0];
  for (std::size_t j = 1; j < n; ++j) {
    peak = std::max(peak, x[j]);
  }
  Real total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = exp_nonpositive(x[j] - peak);
    total += y[j];
  }
  const Real inv = Real(1) / total;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] *= inv;
  }
}

}  // namespace

namespace kernels {

template <typename Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t p, std::size_t q, std::size_t r) {
  constexpr std::size_t kW = tile_width<Real>();
  const std::size_t full_tiles = r / kW;
  const Index blocks = static_cast<Index>((p + 3) / 4);
#pragma omp parallel for schedule(static)
  for (Index blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    const std::size_t rows = std::min<std::size_t>(4, p - i0);
    const Real* ab = a + i0 * q;
    Real* cb = c + i0 * r;
    if (rows == 4) {
      for (std::size_t t = 0; t < full_tiles; ++t) {
        matmul_block4(ab, b, cb, q, r, t * kW);
      }
      if (full_tiles * kW < r) {
        matmul_rows(ab, b, cb, 4, q, r, full_tiles * kW);
      }
    } else {
      matmul_rows(ab, b, cb, rows, q, r, 0);
    }
  }
}

template <typename Real>
void transpose(const Real* a, Real* at, std::size_t rows, std::size_t cols) {
  const Index n = static_cast<Index>(cols);
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < n; ++c) {
    Real* dst = at + static_cast<std::size_t>(c) * rows;
    for (std::size_t r = 0; r < rows; ++r) {
      dst[r] = a[r * cols + static_cast<std::size_t>(c)];
    }
  }
}

template <typename Real>
void column_sums(const Real* x, Real* out, std::size_t rows, std::size_t cols) {
  std::fill(out, out + cols, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] += xr[c];
    }
  }
}

template <typename Real>
void softmax_rows(const Real* x, Real* y, std::size_t rows, std::size_t cols) {
  const Index n = static_cast<Index>(rows);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    softmax_row(x + off, y + off, cols);
  }
}

template <typename Real>
void softmax_rows_backward(const Real* y, const Real* dy, Real* dx, std::size_t rows,
                           std::size_t cols) {
  const Index n = static_cast<Index>(rows);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    Real dot = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      dot += y[off + j] * dy[off + j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      dx[off + j] = y[off + j] * (dy[off + j] - dot);
    }
  }
}

template <typename Real>
void layer_norm_forward(const Real* x, const Real* gain, const Real* bias, Real* y, Real* xhat,
                        Real* rstd, std::size_t rows, std::size_t cols, Real eps) {
  const Index n = static_cast<Index>(rows);
  const Real inv_cols = Real(1) / static_cast<Real>(cols);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    Real mean = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      mean += x[off + j];
    }
    mean *= inv_cols;
    Real var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const Real d = x[off + j] - mean;
      var += d * d;
    }
    var *= inv_cols;
    const Real s = Real(1) / std::sqrt(var + eps);
    rstd[r] = s;
    for (std::size_t j = 0; j < cols; ++j) {
      const Real h = (x[off + j] - mean) * s;
      xhat[off + j] = h;
      y[off + j] = h * gain[j] + bias[j];
    }
  }
}

template <typename Real>
void layer_norm_backward(const Real* dy, const Real* xhat, const Real* rstd, const Real* gain,
                         Real* dx, Real* dgain, Real* dbias, std::size_t rows, std::size_t cols) {
  const Index n = static_cast<Index>(rows);
  const Real inv_cols = Real(1) / static_cast<Real>(cols);
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < n; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * cols;
    Real m1 = 0;
    Real m2 = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const Real g = dy[off + j] * gain[j];
      m1 += g;
      m2 += g * xhat[off + j];
    }
    m1 *= inv_cols;
    m2 *= inv_cols;
    const Real s = rstd[r];
    for (std::size_t j = 0; j < cols; ++j) {
      const Real g = dy[off + j] * gain[j];
      dx[off + j] = s * (g - m1 - xhat[off + j] * m2);
    }
  }
  std::fill(dgain, dgain + cols, Real(0));
  std::fill(dbias, dbias + cols, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t off = r * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      dgain[j] += dy[off + j] * xhat[off + j];
      dbias[j] += dy[off + j];
    }
  }
}

template <typename Real>
void gelu_forward(const Real* x, Real* y, std::size_t n) {
  const Real c = static_cast<Real>(kSqrtTwoOverPi);
  const Real a = static_cast<Real>(kGeluCoeff);
  const Index count = static_cast<Index>(n);
#pragma omp parallel for simd schedule(static)
  for (Index i = 0; i < count; ++i) {
    const Real v = x[i];
    y[i] = Real(0.5) * v * (Real(1) + fast_tanh(c * (v + a * v * v * v)));
  }
}

template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, std::size_t n) {
  const Real c = static_cast<Real>(kSqrtTwoOverPi);
  const Real a = static_cast<Real>(kGeluCoeff);
  const Index count = static_cast<Index>(n);
#pragma omp parallel for simd schedule(static)
  for (Index i = 0; i < count; ++i) {
    const Real v = x[i];
    const Real t = fast_tanh(c * (v + a * v * v * v));
    const Real dt = c * (Real(1) + Real(3) * a * v * v);
    const Real grad = Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * dt;
    dx[i] = dy[i] * grad;
  }
}

template <typename Real>
void causal_attention_forward(const Real* qkv, Real* out, Real* probs, std::size_t batch,
                              std::size_t seq, std::size_t heads, std::size_t head_dim) {
  const std::size_t width = heads * head_dim;
  const std::size_t stride = 3 * width;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  const Index pairs = static_cast<Index>(batch * heads);
#pragma omp parallel for schedule(static)
  for (Index bh = 0; bh < pairs; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads;
    const std::size_t h = static_cast<std::size_t>(bh) % heads;
    const Real* base = qkv + b * seq * stride;
    Real* out_base = out + b * seq * width + h * head_dim;
    Real* p_base = probs + static_cast<std::size_t>(bh) * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      const Real* qi = base + i * stride + h * head_dim;
      Real* pi = p_base + i * seq;
      for (std::size_t j = 0; j <= i; ++j) {
        const Real* kj = base + j * stride + width + h * head_dim;
        Real s = 0;
        for (std::size_t d = 0; d < head_dim; ++d) {
          s += qi[d] * kj[d];
        }
        pi[j] = s * scale;
      }
      softmax_row(pi, pi, i + 1);
      std::fill(pi + i + 1, pi + seq, Real(0));
      Real* oi = out_base + i * width;
      std::fill(oi, oi + head_dim, Real(0));
      for (std::size_t j = 0; j <= i; ++j) {
        const Real* vj = base + j * stride + 2 * width + h * head_dim;
        const Real pj = pi[j];
        for (std::size_t d = 0; d < head_dim; ++d) {
          oi[d] += pj * vj[d];
        }
      }
    }
  }
}

template <typename Real>
void causal_attention_backward(const Real* qkv, const Real* probs, const Real* dout, Real* dqkv,
                               std::size_t batch, std::size_t seq, std::size_t heads,
                               std::size_t head_dim) {
  const std::size_t width = heads * head_dim;
  const std::size_t stride = 3 * width;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  const Index pairs = static_cast<Index>(batch * heads);
#pragma omp parallel for schedule(static)
  for (Index bh = 0; bh < pairs; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads;
    const std::size_t h = static_cast<std::size_t>(bh) % heads;
    const Real* base = qkv + b * seq * stride;
    Real* dbase = dqkv + b * seq * stride;
    const Real* dout_base = dout + b * seq * width + h * head_dim;
    const Real* p_base = probs + static_cast<std::size_t>(bh) * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      Real* dst = dbase + i * stride + h * head_dim;
      std::fill(dst, dst + head_dim, Real(0));
      std::fill(dst + width, dst + width + head_dim, Real(0));
      std::fill(dst + 2 * width, dst + 2 * width + head_dim, Real(0));
    }
    std::vector<Real> dscore(seq);
    for (std::size_t i = 0; i < seq; ++i) {
      const Real* qi = base + i * stride + h * head_dim;
      const Real* doi = dout_base + i * width;
      const Real* pi = p_base + i * seq;
      Real dot = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const Real* vj = base + j * stride + 2 * width + h * head_dim;
        Real s = 0;
        for (std::size_t d = 0; d < head_dim; ++d) {
          s += doi[d] * vj[d];
        }
        dscore[j] = s;
        dot += pi[j] * s;
      }
      Real* dqi = dbase + i * stride + h * head_dim;
      for (std::size_t j = 0; j <= i; ++j) {
        const Real pj = pi[j];
        const Real ds = pj * (dscore[j] - dot) * scale;
        const Real* kj = base + j * stride + width + h * head_dim;
        Real* dkj = dbase + j * stride + width + h * head_dim;
        Real* dvj = dbase + j * stride + 2 * width + h * head_dim;
        for (std::size_t d = 0; d < head_dim; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
          dvj[d] += pj * doi[d];
        }
      }
    }
  }
}

}  // namespace kernels

namespace reference {

template <typename Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < q; ++k) {
        s += a[i * q + k] * b[k * r + j];
      }
      c[i * r + j] = s;
    }
  }
}

template <typename Real>
void softmax_rows(const Real* x, Real* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x + r * cols;
    Real* yr = y + r * cols;
    const Real peak = *std::max_element(xr, xr + cols);
    Real total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - peak);
      total += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] /= total;
    }
  }
}

template <typename Real>
void layer_norm_forward(const Real* x, const Real* gain, const Real* bias, Real* y,
                        std::size_t rows, std::size_t cols, Real eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x + r * cols;
    Real mean = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      mean += xr[j];
    }
    mean /= static_cast<Real>(cols);
    Real var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      var += (xr[j] - mean) * (xr[j] - mean);
    }
    var /= static_cast<Real>(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      y[r * cols + j] = (xr[j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
    }
  }
}

template <typename Real>
void gelu_forward(const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = static_cast<Real>(0.5 * v * (1.0 + std::tanh(kSqrtTwoOverPi * (v + kGeluCoeff * v * v * v))));
  }
}

template <typename Real>
void causal_attention_forward(const Real* qkv, Real* out, std::size_t batch, std::size_t seq,
                              std::size_t heads, std::size_t head_dim) {
  const std::size_t width = heads * head_dim;
  const std::size_t stride = 3 * width;
  const Real neg_inf = -std::numeric_limits<Real>::infinity();
  std::vector<Real> scores(seq * seq);
  std::vector<Real> weights(seq * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j < seq; ++j) {
          if (j > i) {
            scores[i * seq + j] = neg_inf;
            continue;
          }
          Real s = 0;
          for (std::size_t d = 0; d < head_dim; ++d) {
            s += qkv[(b * seq + i) * stride + h * head_dim + d] *
                 qkv[(b * seq + j) * stride + width + h * head_dim + d];
          }
          scores[i * seq + j] = s / std::sqrt(static_cast<Real>(head_dim));
        }
      }
      softmax_rows(scores.data(), weights.data(), seq, seq);
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t d = 0; d < head_dim; ++d) {
          Real s = 0;
          for (std::size_t j = 0; j < seq; ++j) {
            s += weights[i * seq + j] * qkv[(b * seq + j) * stride + 2 * width + h * head_dim + d];
          }
          out[(b * seq + i) * width + h * head_dim + d] = s;
        }
      }
    }
  }
}

}  // namespace reference

#define MOP_INSTANTIATE_KERNELS(Real)                                                          \
  template void kernels::matmul<Real>(const Real*, const Real*, Real*, std::size_t,           \
                                      std::size_t, std::size_t);                              \
  template void kernels::transpose<Real>(const Real*, Real*, std::size_t, std::size_t);       \
  template void kernels::column_sums<Real>(const Real*, Real*, std::size_t, std::size_t);     \
  template void kernels::softmax_rows<Real>(const Real*, Real*, std::size_t, std::size_t);    \
  template void kernels::softmax_rows_backward<Real>(const Real*, const Real*, Real*,         \
                                                     std::size_t, std::size_t);               \
  template void kernels::layer_norm_forward<Real>(const Real*, const Real*, const Real*,      \
                                                  Real*, Real*, Real*, std::size_t,           \
                                                  std::size_t, Real);                         \
  template void kernels::layer_norm_backward<Real>(const Real*, const Real*, const Real*,     \
                                                   const Real*, Real*, Real*, Real*,          \
                                                   std::size_t, std::size_t);                 \
  template void kernels::gelu_forward<Real>(const Real*, Real*, std::size_t);                 \
  template void kernels::gelu_backward<Real>(const Real*, const Real*, Real*, std::size_t);   \
  template void kernels::causal_attention_forward<Real>(const Real*, Real*, Real*,            \
                                                        std::size_t, std::size_t,             \
                                                        std::size_t, std::size_t);            \
  template void kernels::causal_attention_backward<Real>(const Real*, const Real*,            \
                                                         const Real*, Real*, std::size_t,     \
                                                         std::size_t, std::size_t,            \
                                                         std::size_t);                        \
  template void reference::matmul<Real>(const Real*, const Real*, Real*, std::size_t,         \
                                        std::size_t, std::size_t);                            \
  template void reference::softmax_rows<Real>(const Real*, Real*, std::size_t, std::size_t);  \
  template void reference::layer_norm_forward<Real>(const Real*, const Real*, const Real*,    \
                                                    Real*, std::size_t, std::size_t, Real);   \
  template void reference::gelu_forward<Real>(const Real*, Real*, std::size_t);               \
  template void reference::causal_attention_forward<Real>(const Real*, Real*, std::size_t,    \
                                                          std::size_t, std::size_t,           \
                                                          std::size_t);

MOP_INSTANTIATE_KERNELS(float)
MOP_INSTANTIATE_KERNELS(double)

#undef MOP_INSTANTIATE_KERNELS

}  // namespace mop
