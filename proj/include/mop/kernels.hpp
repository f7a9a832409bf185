#pragma once

// Raw row-major kernels. The functions in mop::kernels are OpenMP-parallel
// over independent output rows (or independent attention heads); every
// output element is reduced by exactly one thread in a fixed order, so
// results are bit-identical for any thread count. mop::reference holds
// plain serial loops used as test oracles and benchmark baselines.

#include <cstddef>

namespace mop {

namespace kernels {

// c[p x r] = a[p x q] * b[q x r]
template <typename Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t p, std::size_t q, std::size_t r);

// at[cols x rows] = a[rows x cols]^T
template <typename Real>
void transpose(const Real* a, Real* at, std::size_t rows, std::size_t cols);

// out[c] = sum_r x[r, c], summed in increasing r.
template <typename Real>
void column_sums(const Real* x, Real* out, std::size_t rows, std::size_t cols);

template <typename Real>
void softmax_rows(const Real* x, Real* y, std::size_t rows, std::size_t cols);

// dx = y * (dy - <dy, y>) per row.
template <typename Real>
void softmax_rows_backward(const Real* y, const Real* dy, Real* dx, std::size_t rows,
                           std::size_t cols);

// Saves the normalized input and the reciprocal std per row for backward.
template <typename Real>
void layer_norm_forward(const Real* x, const Real* gain, const Real* bias, Real* y, Real* xhat,
                        Real* rstd, std::size_t rows, std::size_t cols, Real eps);

// dgain/dbias are overwritten, not accumulated.
template <typename Real>
void layer_norm_backward(const Real* dy, const Real* xhat, const Real* rstd, const Real* gain,
                         Real* dx, Real* dgain, Real* dbias, std::size_t rows, std::size_t cols);

template <typename Real>
void gelu_forward(const Real* x, Real* y, std::size_t n);

template <typename Real>
void gelu_backward(const Real* x, const Real* dy, Real* dx, std::size_t n);

// qkv rows are [q | k | v] with width 3*heads*head_dim; sequences of length
// seq are stacked batch-major. probs receives batch*heads*seq*seq entries
// (zero above the diagonal).
template <typename Real>
void causal_attention_forward(const Real* qkv, Real* out, Real* probs, std::size_t batch,
                              std::size_t seq, std::size_t heads, std::size_t head_dim);

template <typename Real>
void causal_attention_backward(const Real* qkv, const Real* probs, const Real* dout, Real* dqkv,
                               std::size_t batch, std::size_t seq, std::size_t heads,
                               std::size_t head_dim);

}  // namespace kernels

namespace reference {

template <typename Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t p, std::size_t q, std::size_t r);

template <typename Real>
void softmax_rows(const Real* x, Real* y, std::size_t rows, std::size_t cols);

template <typename Real>
void layer_norm_forward(const Real* x, const Real* gain, const Real* bias, Real* y,
                        std::size_t rows, std::size_t cols, Real eps);

template <typename Real>
void gelu_forward(const Real* x, Real* y, std::size_t n);

// Straightforward masked-score attention: builds the full score matrix per
// head, masks j > i with -inf, softmaxes, and multiplies by V.
template <typename Real>
void causal_attention_forward(const Real* qkv, Real* out, std::size_t batch, std::size_t seq,
                              std::size_t heads, std::size_t head_dim);

}  // namespace reference

}  // namespace mop
