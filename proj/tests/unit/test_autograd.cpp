#include <cmath>
#include <vector>

#include "doctest.h"
#include "mop/autograd.hpp"
#include "test_util.hpp"

using namespace mop;
using mop::testing::grad_check;
using mop::testing::max_abs_diff;
using mop::testing::probe;
using mop::testing::random_matrix;

TEST_CASE("sum of squares gradient is 2x") {
  Rng rng(1);
  const Matrix x = random_matrix(rng, 5, 3);
  Graph<double> g;
  const Var v = g.leaf(x);
  g.backward(g.sum_squares(v));
  CHECK(g.grad(v) == scale(x, 2.0));
}

TEST_CASE("norm of residual against finite differences") {
  Rng rng(2);
  const Matrix w = random_matrix(rng, 4, 6), x = random_matrix(rng, 6, 1),
               y = random_matrix(rng, 4, 1);
  // ||Wx - y|| as the norm of the transposed residual row.
  const auto norm_check = grad_check(
      {w, x.transposed()},
      [&](Graph<double>& g, const std::vector<Var>& in) {
        const Var wx = g.matmul(in[1], g.constant(w.transposed()));
        return g.sum(g.row_norm(g.sub(wx, g.constant(y.transposed()))));
      },
      1e-4);
  CHECK(norm_check.max_relative_error <= 1e-4);
  const auto wcheck = grad_check(
      {w.transposed()},
      [&](Graph<double>& g, const std::vector<Var>& in) {
        const Var wx = g.matmul(g.constant(x.transposed()), in[0]);
        return g.sum(g.row_norm(g.sub(wx, g.constant(y.transposed()))));
      },
      1e-4);
  CHECK(wcheck.max_relative_error <= 1e-4);
}

TEST_CASE("unused parameter gets zero gradient") {
  Graph<double> g;
  const Var used = g.leaf(Matrix::from_rows({{1.0, 2.0}}));
  const Var unused = g.leaf(Matrix::from_rows({{3.0, 4.0}}));
  g.backward(g.sum_squares(used));
  CHECK(g.grad(unused) == Matrix({1, 2}, 0.0));
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph<double> g;
  const Var x = g.leaf(Matrix::matrix(2, 2, 1.0));
  CHECK_THROWS_AS(g.backward(g.gelu(x)), ShapeError);
}

TEST_CASE("every op matches finite differences") {
  Rng rng(3);
  const double tol = 1e-4;
  SUBCASE("matmul") {
    const auto c = grad_check({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.matmul(in[0], in[1]));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("add, sub, scale") {
    const auto c = grad_check({random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                const Var s = g.add(in[0], g.scale(in[1], -1.7));
                                return probe(g, g.sub(s, g.scale(in[0], 0.3)));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("add_row_bias") {
    const auto c = grad_check({random_matrix(rng, 5, 3), random_matrix(rng, 1, 3)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.add_row_bias(in[0], in[1]));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("add_positional") {
    const auto c = grad_check({random_matrix(rng, 6, 4), random_matrix(rng, 5, 4)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.add_positional(in[0], in[1], 3));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("layer_norm") {
    const auto c = grad_check(
        {random_matrix(rng, 4, 6, 2.0), random_matrix(rng, 1, 6), random_matrix(rng, 1, 6)},
        [](Graph<double>& g, const std::vector<Var>& in) {
          return probe(g, g.layer_norm(in[0], in[1], in[2]));
        });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("gelu") {
    const auto c = grad_check({random_matrix(rng, 4, 5, 2.0)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.gelu(in[0]));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("softmax") {
    const auto c = grad_check({random_matrix(rng, 4, 5, 2.0)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.softmax(in[0]));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("causal_attention") {
    const std::size_t batch = 2, seq = 4, heads = 2, hd = 3;
    const auto c = grad_check({random_matrix(rng, batch * seq, 3 * heads * hd)},
                              [&](Graph<double>& g, const std::vector<Var>& in) {
                                return probe(g, g.causal_attention(in[0], batch, seq, heads));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("row_norm and row_squared_norm") {
    const auto c = grad_check({random_matrix(rng, 5, 3)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return g.add(probe(g, g.row_norm(in[0])),
                                             probe(g, g.row_squared_norm(in[0]), 7));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("sum, mean, sum_squares") {
    const auto c = grad_check({random_matrix(rng, 3, 3)},
                              [](Graph<double>& g, const std::vector<Var>& in) {
                                return g.add(g.mean(g.gelu(in[0])),
                                             g.add(g.sum(in[0]), g.sum_squares(in[0])));
                              });
    CHECK(c.max_relative_error <= tol);
  }
  SUBCASE("a small transformer block") {
    const std::size_t batch = 2, seq = 3, d = 4, heads = 2;
    const auto c = grad_check(
        {random_matrix(rng, batch * seq, d), random_matrix(rng, d, 3 * d, 0.5),
         random_matrix(rng, d, d, 0.5), Matrix({1, d}, 1.0), Matrix({1, d}, 0.0)},
        [&](Graph<double>& g, const std::vector<Var>& in) {
          const Var h = g.layer_norm(in[0], in[3], in[4]);
          const Var a = g.causal_attention(g.matmul(h, in[1]), batch, seq, heads);
          const Var x = g.add(in[0], g.matmul(a, in[2]));
          return g.mean(g.row_norm(g.gelu(x)));
        });
    CHECK(c.max_relative_error <= tol);
  }
}

TEST_CASE("row_norm at a zero row") {
  Graph<double> g;
  const Var x = g.leaf(Matrix::from_rows({{0.0, 0.0}, {3.0, 4.0}}));
  const Var n = g.row_norm(x);
  CHECK(g.value(n)[0] == 0.0);
  CHECK(g.value(n)[1] == 5.0);
  g.backward(g.sum(n));
  const Matrix gr = g.grad(x);
  CHECK(gr.all_finite());
  CHECK(gr(0, 0) == 0.0);
  CHECK(gr(0, 1) == 0.0);
  CHECK(gr(1, 0) == doctest::Approx(0.6));
  CHECK(gr(1, 1) == doctest::Approx(0.8));
}

TEST_CASE("shared inputs accumulate gradient") {
  Graph<double> g;
  const Var x = g.leaf(Matrix::from_rows({{2.0}}));
  g.backward(g.sum(g.matmul(x, x)));
  CHECK(g.grad(x)[0] == 4.0);
}

TEST_CASE("constants and inference graphs carry no gradient") {
  Graph<double> g;
  const Var c = g.constant(Matrix::matrix(2, 2, 1.0));
  const Var y = g.gelu(c);
  CHECK_FALSE(g.requires_grad(y));
  CHECK(g.kind(y) == OpKind::gelu);
  CHECK(g.inputs(y).size() == 1);
}

TEST_CASE("backward is deterministic") {
  Rng rng(4);
  const Matrix a = random_matrix(rng, 6, 8), b = random_matrix(rng, 8, 8);
  auto run = [&] {
    Graph<double> g;
    const Var x = g.leaf(a), w = g.leaf(b);
    g.backward(g.mean(g.row_norm(g.gelu(g.matmul(x, w)))));
    return std::pair{g.grad(x), g.grad(w)};
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
  CHECK(max_abs_diff(first.first, second.first) == 0.0);
}
