#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace hsf {

/// Counter-based generator. Draw i of a stream is a pure function of
/// (key, i), so the full state is two integers and can be checkpointed and
/// split without replaying history.
class Rng {
 public:
  static constexpr std::string_view kName = "splitmix64-ctr";

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)), counter_(counter) {}

  static Rng from_state(std::uint64_t key, std::uint64_t counter) {
    Rng r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream) const {
    return from_state(mix(key_ ^ mix(stream + 0x243f6a8885a308d3ULL)), 0);
  }

 private:
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace hsf
