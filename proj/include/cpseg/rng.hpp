#pragma once

// Portable seeded random source. Distributions are computed from raw 64-bit
// engine output so streams are identical across standard libraries.

#include <cstdint>
#include <random>
#include <string>

namespace cpseg {

class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derives an independent child stream.
  Rng fork(std::uint64_t salt);

  std::string state() const;
  void restore(const std::string& state);

private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// SplitMix64 finalizer; used to derive per-item seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace cpseg
