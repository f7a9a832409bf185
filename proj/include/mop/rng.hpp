#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mop {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Seed namespaces keep training, test and probe streams disjoint.
enum class SeedSpace : std::uint64_t {
  train_systems = 0x7472'6169'6e00'0001ULL,
  test_systems = 0x7465'7374'0000'0002ULL,
  batches = 0x6261'7463'6800'0003ULL,
  probe = 0x7072'6f62'6500'0004ULL,
  init = 0x696e'6974'0000'0005ULL,
};

// stream seed = splitmix(splitmix(base ^ space) + index)
std::uint64_t derive_seed(std::uint64_t base, SeedSpace space, std::uint64_t index) noexcept;
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double stddev = 1.0) { return stddev * normal_(engine_); }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t index(std::size_t bound) {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(engine_));
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Reads MOP_SEED if set, otherwise returns fallback.
std::uint64_t seed_from_env(std::uint64_t fallback);

}  // namespace mop
