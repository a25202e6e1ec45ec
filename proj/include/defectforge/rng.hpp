#pragma once

#include <cstdint>
#include <initializer_list>

namespace defectforge {

// Counter-based SplitMix64 stream. The i-th draw is mix64(key + (i+1) * gamma),
// so a stream is fully described by (key, counter) and identical on every
// platform. Substreams derive a fresh key by hashing (key, item_id); distinct
// ids give unrelated keys.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  // Substream keyed by (seed, item_id).
  static Rng substream(std::uint64_t seed, std::uint64_t item_id) noexcept {
    return Rng(seed).split(item_id);
  }
  Rng split(std::uint64_t item_id) const noexcept;
  Rng split(std::initializer_list<std::uint64_t> path) const noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  int between(int lo, int hi_inclusive) noexcept;
  // Standard normal via Box-Muller (one draw per call, no cached pair).
  double normal() noexcept;

  static std::uint64_t mix64(std::uint64_t z) noexcept;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Stable 64-bit hash of a string (FNV-1a folded through mix64). Used to turn
// labels into substream ids.
std::uint64_t hash_label(const char* s) noexcept;

}  // namespace defectforge
