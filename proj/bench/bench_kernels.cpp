#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mop/kernels.hpp"

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

// Shapes from one training step: 64 sequences of 50 tokens, width 64.
constexpr std::size_t kRows = 64 * 50;

void BM_matmul_parallel(benchmark::State& state) {
  const std::size_t q = state.range(0), r = state.range(1);
  auto a = random_vec(kRows * q, 1), b = random_vec(q * r, 2);
  std::vector<float> c(kRows * r);
  for (auto _ : state) {
    mop::kernels::matmul(a.data(), b.data(), c.data(), kRows, q, r);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * kRows * q * r);
}

void BM_matmul_reference(benchmark::State& state) {
  const std::size_t q = state.range(0), r = state.range(1);
  auto a = random_vec(kRows * q, 1), b = random_vec(q * r, 2);
  std::vector<float> c(kRows * r);
  for (auto _ : state) {
    mop::reference::matmul(a.data(), b.data(), c.data(), kRows, q, r);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * kRows * q * r);
}

void BM_attention_parallel(benchmark::State& state) {
  const std::size_t batch = 64, seq = 50, heads = 4, hd = 16;
  auto qkv = random_vec(batch * seq * 3 * heads * hd, 3);
  std::vector<float> out(batch * seq * heads * hd), probs(batch * heads * seq * seq);
  for (auto _ : state) {
    mop::kernels::causal_attention_forward(qkv.data(), out.data(), probs.data(), batch, seq, heads,
                                           hd);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_attention_reference(benchmark::State& state) {
  const std::size_t batch = 64, seq = 50, heads = 4, hd = 16;
  auto qkv = random_vec(batch * seq * 3 * heads * hd, 3);
  std::vector<float> out(batch * seq * heads * hd);
  for (auto _ : state) {
    mop::reference::causal_attention_forward(qkv.data(), out.data(), batch, seq, heads, hd);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_layer_norm_parallel(benchmark::State& state) {
  const std::size_t cols = 64;
  auto x = random_vec(kRows * cols, 4);
  std::vector<float> g(cols, 1.0f), b(cols, 0.0f), y(kRows * cols), xhat(kRows * cols), rstd(kRows);
  for (auto _ : state) {
    mop::kernels::layer_norm_forward(x.data(), g.data(), b.data(), y.data(), xhat.data(),
                                     rstd.data(), kRows, cols, 1e-5f);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_layer_norm_reference(benchmark::State& state) {
  const std::size_t cols = 64;
  auto x = random_vec(kRows * cols, 4);
  std::vector<float> g(cols, 1.0f), b(cols, 0.0f), y(kRows * cols);
  for (auto _ : state) {
    mop::reference::layer_norm_forward(x.data(), g.data(), b.data(), y.data(), kRows, cols, 1e-5f);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_gelu_parallel(benchmark::State& state) {
  auto x = random_vec(kRows * 256, 5);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    mop::kernels::gelu_forward(x.data(), y.data(), x.size());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_gelu_reference(benchmark::State& state) {
  auto x = random_vec(kRows * 256, 5);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    mop::reference::gelu_forward(x.data(), y.data(), x.size());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul_parallel)->Args({64, 192})->Args({64, 256})->Args({256, 64})->Args({64, 5});
BENCHMARK(BM_matmul_reference)->Args({64, 192})->Args({64, 256})->Args({256, 64})->Args({64, 5});
BENCHMARK(BM_attention_parallel);
BENCHMARK(BM_attention_reference);
BENCHMARK(BM_layer_norm_parallel);
BENCHMARK(BM_layer_norm_reference);
BENCHMARK(BM_gelu_parallel);
BENCHMARK(BM_gelu_reference);

BENCHMARK_MAIN();
