#pragma once

#include <cstdint>
#include <string_view>

namespace perldiff {

// Counter-based generator: the n-th draw is a pure function of
// (seed, stream, n), so named streams can be forked without sharing state and
// results do not depend on the standard library's engine implementations.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view stream);
  CounterRng(std::uint64_t seed, std::uint64_t stream_key);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  // Standard normal via Box-Muller.
  double normal();

  // Independent child stream, e.g. rng.fork("scene", 17).
  CounterRng fork(std::string_view name, std::uint64_t index = 0) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t hash_name(std::string_view name);

}  // namespace perldiff
