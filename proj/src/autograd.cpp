#include "mop/autograd.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "mop/kernels.hpp"

namespace mop {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::add_positional: return "add_positional";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::softmax: return "softmax";
    case OpKind::causal_attention: return "causal_attention";
    case OpKind::row_norm: return "row_norm";
    case OpKind::row_squared_norm: return "row_squared_norm";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_squares: return "sum_squares";
  }
  return "unknown";
}

template <typename Real>
Var Graph<Real>::push(OpKind kind, std::vector<std::size_t> inputs, Tensor<Real> value) {
  Node node;
  node.kind = kind;
  node.requires_grad = false;
  for (std::size_t in : inputs) {
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename Real>
Var Graph<Real>::leaf(Tensor<Real> value, bool requires_grad) {
  Node node;
  node.kind = OpKind::leaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename Real>
void Graph<Real>::accumulate(Var v, const Tensor<Real>& contribution) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) {
    return;
  }
  if (node.grad.empty()) {
    node.grad = contribution;
    return;
  }
  auto dst = node.grad.data();
  auto src = contribution.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += src[i];
  }
}

template <typename Real>
void Graph<Real>::accumulate(Var v, Tensor<Real>&& contribution) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) {
    return;
  }
  if (node.grad.empty()) {
    node.grad = std::move(contribution);
    return;
  }
  accumulate(v, static_cast<const Tensor<Real>&>(contribution));
}

template <typename Real>
Tensor<Real> Graph<Real>::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) {
    return Tensor<Real>(node.value.shape());
  }
  return node.grad;
}

template <typename Real>
Var Graph<Real>::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  Var out = push(OpKind::matmul, {a.id, b.id}, mop::matmul(av, bv));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, a, b](const Tensor<Real>& g) {
      const auto& av = value(a);
      const auto& bv = value(b);
      const std::size_t p = av.rows(), q = av.cols(), r = bv.cols();
      if (needs_grad(a)) {
        Tensor<Real> bt({r, q});
        kernels::transpose(bv.ptr(), bt.ptr(), q, r);
        Tensor<Real> da({p, q});
        kernels::matmul(g.ptr(), bt.ptr(), da.ptr(), p, r, q);
        if (da.shape() != av.shape()) {
          da = da.reshaped(av.shape());
        }
        accumulate(a, std::move(da));
      }
      if (needs_grad(b)) {
        Tensor<Real> at({q, p});
        kernels::transpose(av.ptr(), at.ptr(), p, q);
        Tensor<Real> db({q, r});
        kernels::matmul(at.ptr(), g.ptr(), db.ptr(), q, p, r);
        accumulate(b, std::move(db));
      }
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::add(Var a, Var b) {
  Var out = push(OpKind::add, {a.id, b.id}, mop::add(value(a), value(b)));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, a, b](const Tensor<Real>& g) {
      accumulate(a, g);
      accumulate(b, g);
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::sub(Var a, Var b) {
  Var out = push(OpKind::sub, {a.id, b.id}, mop::sub(value(a), value(b)));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, a, b](const Tensor<Real>& g) {
      accumulate(a, g);
      if (needs_grad(b)) {
        accumulate(b, mop::scale(g, Real(-1)));
      }
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::scale(Var a, Real factor) {
  Var out = push(OpKind::scale, {a.id}, mop::scale(value(a), factor));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, a, factor](const Tensor<Real>& g) {
      accumulate(a, mop::scale(g, factor));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::add_row_bias(Var x, Var bias) {
  const auto& xv = value(x);
  const auto& bv = value(bias);
  if (bv.size() != xv.cols()) {
    throw ShapeError("add_row_bias: bias length " + std::to_string(bv.size()) +
                     " does not match columns " + std::to_string(xv.cols()));
  }
  Tensor<Real> y = xv;
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    Real* row = y.ptr() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] += bv[c];
    }
  }
  Var out = push(OpKind::add_row_bias, {x.id, bias.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, bias](const Tensor<Real>& g) {
      accumulate(x, g);
      if (needs_grad(bias)) {
        Tensor<Real> db(value(bias).shape());
        kernels::column_sums(g.ptr(), db.ptr(), g.rows(), g.cols());
        accumulate(bias, std::move(db));
      }
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::add_positional(Var x, Var table, std::size_t seq_len) {
  const auto& xv = value(x);
  const auto& tv = value(table);
  const std::size_t cols = xv.cols();
  if (tv.cols() != cols || tv.rows() < seq_len || seq_len == 0 || xv.rows() % seq_len != 0) {
    throw ShapeError("add_positional: incompatible shapes " + shape_string(xv.shape()) + " and " +
                     shape_string(tv.shape()) + " for sequence length " +
                     std::to_string(seq_len));
  }
  Tensor<Real> y = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const Real* pos = tv.ptr() + (r % seq_len) * cols;
    Real* row = y.ptr() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] += pos[c];
    }
  }
  Var out = push(OpKind::add_positional, {x.id, table.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, table, seq_len](const Tensor<Real>& g) {
      accumulate(x, g);
      if (needs_grad(table)) {
        Tensor<Real> dt(value(table).shape());
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          Real* dst = dt.ptr() + (r % seq_len) * cols;
          const Real* src = g.ptr() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            dst[c] += src[c];
          }
        }
        accumulate(table, std::move(dt));
      }
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::layer_norm(Var x, Var gain, Var bias) {
  const auto& xv = value(x);
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (value(gain).size() != cols || value(bias).size() != cols) {
    throw ShapeError("layer_norm: gain/bias length must equal last dimension");
  }
  Tensor<Real> y(xv.shape());
  Tensor<Real> xhat(xv.shape());
  Tensor<Real> rstd({rows});
  kernels::layer_norm_forward(xv.ptr(), value(gain).ptr(), value(bias).ptr(), y.ptr(),
                              xhat.ptr(), rstd.ptr(), rows, cols,
                              static_cast<Real>(kLayerNormEps));
  Var out = push(OpKind::layer_norm, {x.id, gain.id, bias.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, gain, bias, xhat = std::move(xhat),
                               rstd = std::move(rstd)](const Tensor<Real>& g) {
      const std::size_t rows = g.rows();
      const std::size_t cols = g.cols();
      Tensor<Real> dx(g.shape());
      Tensor<Real> dgain(value(gain).shape());
      Tensor<Real> dbias(value(bias).shape());
      kernels::layer_norm_backward(g.ptr(), xhat.ptr(), rstd.ptr(), value(gain).ptr(), dx.ptr(),
                                   dgain.ptr(), dbias.ptr(), rows, cols);
      accumulate(x, std::move(dx));
      accumulate(gain, std::move(dgain));
      accumulate(bias, std::move(dbias));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::gelu(Var x) {
  Var out = push(OpKind::gelu, {x.id}, mop::gelu(value(x)));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x](const Tensor<Real>& g) {
      Tensor<Real> dx(g.shape());
      kernels::gelu_backward(value(x).ptr(), g.ptr(), dx.ptr(), g.size());
      accumulate(x, std::move(dx));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::softmax(Var x) {
  Var out = push(OpKind::softmax, {x.id}, rowwise_softmax(value(x)));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, out](const Tensor<Real>& g) {
      const auto& y = value(out);
      Tensor<Real> dx(g.shape());
      kernels::softmax_rows_backward(y.ptr(), g.ptr(), dx.ptr(), y.rows(), y.cols());
      accumulate(x, std::move(dx));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::causal_attention(Var qkv, std::size_t batch, std::size_t seq,
                                  std::size_t heads) {
  const auto& qv = value(qkv);
  if (heads == 0 || qv.cols() % (3 * heads) != 0 || qv.rows() != batch * seq) {
    throw ShapeError("causal_attention: qkv " + shape_string(qv.shape()) +
                     " incompatible with batch=" + std::to_string(batch) +
                     " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  }
  const std::size_t width = qv.cols() / 3;
  const std::size_t head_dim = width / heads;
  Tensor<Real> y({batch * seq, width});
  Tensor<Real> probs({batch * heads * seq * seq});
  kernels::causal_attention_forward(qv.ptr(), y.ptr(), probs.ptr(), batch, seq, heads, head_dim);
  Var out = push(OpKind::causal_attention, {qkv.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, qkv, batch, seq, heads, head_dim,
                               probs = std::move(probs)](const Tensor<Real>& g) {
      const auto& qv = value(qkv);
      Tensor<Real> dqkv(qv.shape());
      kernels::causal_attention_backward(qv.ptr(), probs.ptr(), g.ptr(), dqkv.ptr(), batch, seq,
                                         heads, head_dim);
      accumulate(qkv, std::move(dqkv));
    };
  } else {
    (void)probs;
  }
  return out;
}

template <typename Real>
Var Graph<Real>::row_norm(Var x) {
  const auto& xv = value(x);
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor<Real> y({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += xv(r, c) * xv(r, c);
    }
    y[r] = std::sqrt(s);
  }
  Var out = push(OpKind::row_norm, {x.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, out](const Tensor<Real>& g) {
      const auto& xv = value(x);
      const auto& norms = value(out);
      Tensor<Real> dx(xv.shape());
      const std::size_t cols = xv.cols();
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        if (norms[r] == Real(0)) {
          continue;
        }
        const Real f = g[r] / norms[r];
        for (std::size_t c = 0; c < cols; ++c) {
          dx(r, c) = f * xv(r, c);
        }
      }
      accumulate(x, std::move(dx));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::row_squared_norm(Var x) {
  const auto& xv = value(x);
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor<Real> y({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      s += xv(r, c) * xv(r, c);
    }
    y[r] = s;
  }
  Var out = push(OpKind::row_squared_norm, {x.id}, std::move(y));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x](const Tensor<Real>& g) {
      const auto& xv = value(x);
      Tensor<Real> dx(xv.shape());
      const std::size_t cols = xv.cols();
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          dx(r, c) = Real(2) * g[r] * xv(r, c);
        }
      }
      accumulate(x, std::move(dx));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::sum(Var x) {
  Real s = 0;
  for (Real v : value(x).data()) {
    s += v;
  }
  Var out = push(OpKind::sum, {x.id}, Tensor<Real>::scalar(s));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x](const Tensor<Real>& g) {
      accumulate(x, Tensor<Real>(value(x).shape(), g[0]));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::mean(Var x) {
  const std::size_t n = value(x).size();
  if (n == 0) {
    throw ShapeError("mean: empty tensor");
  }
  Real s = 0;
  for (Real v : value(x).data()) {
    s += v;
  }
  Var out = push(OpKind::mean, {x.id}, Tensor<Real>::scalar(s / static_cast<Real>(n)));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x, n](const Tensor<Real>& g) {
      accumulate(x, Tensor<Real>(value(x).shape(), g[0] / static_cast<Real>(n)));
    };
  }
  return out;
}

template <typename Real>
Var Graph<Real>::sum_squares(Var x) {
  Real s = 0;
  for (Real v : value(x).data()) {
    s += v * v;
  }
  Var out = push(OpKind::sum_squares, {x.id}, Tensor<Real>::scalar(s));
  if (needs_grad(out)) {
    nodes_[out.id].backward = [this, x](const Tensor<Real>& g) {
      accumulate(x, mop::scale(value(x), Real(2) * g[0]));
    };
  }
  return out;
}

template <typename Real>
void Graph<Real>::backward(Var loss) {
  if (loss.id >= nodes_.size()) {
    throw ShapeError("backward: unknown node");
  }
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& node : nodes_) {
    node.grad = Tensor<Real>();
  }
  if (!nodes_[loss.id].requires_grad) {
    return;
  }
  nodes_[loss.id].grad = Tensor<Real>(nodes_[loss.id].value.shape(), Real(1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) {
      continue;
    }
    // Inputs always precede the node, so the closure never touches node.grad.
    node.backward(node.grad);
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace mop
