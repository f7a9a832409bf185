#include "mop/rng.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace mop {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, SeedSpace space, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(base ^ static_cast<std::uint64_t>(space)) + index);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(base) + index);
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  const char* env = std::getenv("MOP_SEED");
  if (env == nullptr || *env == '\0') {
    return fallback;
  }
  try {
    return std::stoull(env);
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("MOP_SEED is not an unsigned integer: ") + env);
  }
}

}  // namespace mop
