#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace vtlm {

/// 64-bit FNV-1a. Used for stream ids and fingerprints.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// PCG32 (XSH-RR variant, 64-bit state, selectable stream).
///
/// Every consumer of randomness gets its own stream derived from the run
/// seed and a consumer name, so e.g. dropout never perturbs masking:
///
///   "init"            parameter initialisation
///   "masking.text"    text selection and 80/10/10 actions
///   "masking.visual"  region selection and actions
///   "dropout"         dropout masks
///   "shuffle"         epoch order and probe derangements
///   "generator.*"     synthetic corpus sampling
///
/// Per-step streams additionally fold the step index into the seed
/// (see for_step), which makes a resumed run replay the same randomness.
class Pcg32 {
 public:
  Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}

  Pcg32(std::uint64_t seed, std::uint64_t stream) {
    state_ = 0;
    inc_ = (stream << 1U) | 1U;
    next_u32();
    state_ += seed;
    next_u32();
  }

  static Pcg32 for_consumer(std::uint64_t seed, std::string_view consumer) {
    return {mix64(seed), fnv1a(consumer)};
  }

  static Pcg32 for_step(std::uint64_t seed, std::string_view consumer, std::uint64_t step) {
    return {mix64(seed ^ mix64(step + 1)), fnv1a(consumer)};
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18U) ^ old) >> 27U);
    const auto rot = static_cast<std::uint32_t>(old >> 59U);
    return (xorshifted >> rot) | (xorshifted << ((32U - rot) & 31U));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = next_u32() >> 5U;
    const std::uint64_t lo = next_u32() >> 6U;
    return static_cast<double>(hi * 67108864ULL + lo) * (1.0 / 9007199254740992.0);
  }

  /// Unbiased integer in [0, bound).
  std::uint32_t below(std::uint32_t bound) {
    const std::uint32_t threshold = (0U - bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  /// Standard normal via Box-Muller; no cached second value so the stream
  /// position only depends on the number of calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const { return state_; }
  std::uint64_t increment() const { return inc_; }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

template <class It>
void shuffle(It first, It last, Pcg32& rng) {
  const auto n = last - first;
  for (auto i = n - 1; i > 0; --i) {
    const auto j = static_cast<decltype(i)>(rng.below(static_cast<std::uint32_t>(i + 1)));
    std::swap(first[i], first[j]);
  }
}

}  // namespace vtlm
