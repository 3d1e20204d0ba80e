#pragma once

#include <cstdint>
#include <string_view>

namespace m2fn {

// SplitMix64 finalizer; the mixing step behind every seeded stream here.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives an independent seed for a named sub-stream (a parameter path, a
// grid cell, a shard).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return mix64(seed ^ fnv1a64(tag));
}

// Counter-based generator: the value at (key, counter) depends on nothing
// else, so any sharding of the counter range yields the same draws.
constexpr std::uint64_t counter_hash(std::uint64_t key, std::uint64_t counter,
                                     std::uint64_t stream = 0) {
  return mix64(mix64(key ^ mix64(stream)) + counter * 0xd1b54a32d192ed03ULL);
}

// Uniform in [0, 1) with 53 bits of resolution.
constexpr double counter_uniform(std::uint64_t key, std::uint64_t counter,
                                 std::uint64_t stream = 0) {
  return static_cast<double>(counter_hash(key, counter, stream) >> 11) *
         0x1.0p-53;
}

// Small sequential engine with a fixed output sequence across platforms
// (unlike std:: distributions, whose algorithms are implementation-defined).
class SplitMix {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased enough for the index ranges used here (n << 2^32).
  std::uint64_t below(std::uint64_t n) { return (*this)() % n; }

  // Box-Muller; one draw per call.
  double normal();

 private:
  std::uint64_t state_;
};

}  // namespace m2fn
