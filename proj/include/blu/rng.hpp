// SPDX-License-Identifier: Apache-2.0
//
// Named, splittable counter-based random streams (Philox-4x32-10). A stream is
// a (key, counter) pair; drawing advances the counter, splitting derives a new
// key from the parent key and a name. Two streams built from the same seed and
// the same sequence of names produce identical draws on every platform.

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace blu {

class Stream {
 public:
  explicit Stream(std::uint64_t seed = 0);

  /// Child stream keyed by (this key, name). Does not advance this stream.
  Stream split(std::string_view name) const;
  Stream split(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return key_; }

 private:
  Stream(std::uint64_t key, int) : key_(key) {}
  std::array<std::uint32_t, 4> block();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int buf_pos_ = 4;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

/// Stateless 64-bit mixing function (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

}  // namespace blu
