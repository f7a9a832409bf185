#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mop/tensor.hpp"

namespace mop {

// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  scale,
  add_row_bias,
  add_positional,
  layer_norm,
  gelu,
  softmax,
  causal_attention,
  row_norm,
  row_squared_norm,
  sum,
  mean,
  sum_squares,
};

std::string_view op_name(OpKind kind);

// Tape-based reverse-mode graph. Nodes are appended in evaluation order, so
// the tape is already a topological order: every input precedes its user.
// Backward closures are only recorded for nodes that depend on a leaf with
// requires_grad set, which makes inference graphs cheap.
template <typename Real>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor<Real> value, bool requires_grad = true);
  Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, Real factor);
  // x[N x d] + bias[d] broadcast over rows.
  Var add_row_bias(Var x, Var bias);
  // x[(B*T) x d] + table[t] for the row at position t of each sequence.
  Var add_positional(Var x, Var table, std::size_t seq_len);
  Var layer_norm(Var x, Var gain, Var bias);
  Var gelu(Var x);
  Var softmax(Var x);
  Var causal_attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads);
  // Euclidean norm of each row -> [N x 1]. The subgradient at a zero row is 0.
  Var row_norm(Var x);
  Var row_squared_norm(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var sum_squares(Var x);

  const Tensor<Real>& value(Var v) const { return nodes_.at(v.id).value; }
  // Gradient of the last backward() target; zero-filled for nodes that
  // received no contribution.
  Tensor<Real> grad(Var v) const;
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Throws ShapeError if the loss node is not a scalar.
  void backward(Var loss);

 private:
  using Backward = std::function<void(const Tensor<Real>& grad_out)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor<Real> value);
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }
  void accumulate(Var v, const Tensor<Real>& contribution);
  void accumulate(Var v, Tensor<Real>&& contribution);

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace mop
