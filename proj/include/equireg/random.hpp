#pragma once

#include <cstdint>

namespace equireg {

/// Seedable, splittable counter-based generator.
///
/// Draw i of a stream is a pure function of (key, i), so results do not
/// depend on the platform's standard library. split() derives an
/// independent child stream; children are used to hand each parallel
/// worker (or each sample of an experiment) its own stream.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (one value per call).
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t index(std::uint64_t n);

  /// Independent child stream; does not advance this stream.
  [[nodiscard]] RandomStream split(std::uint64_t stream_id) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  RandomStream(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace equireg
