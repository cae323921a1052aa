#pragma once

#include <cstdint>
#include <vector>

namespace domadapt {

// Counter-based pseudo-random generator (splitmix64 over seed + counter).
// The draw sequence is a pure function of (seed, counter), so runs are
// reproducible across platforms and restarts. One instance per logical
// stream; fork() derives an independent stream for a sub-task.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double next_unit();

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi);

  // Standard normal via Box-Muller; consumes exactly two uniforms per draw.
  double next_gaussian();

  // Fisher-Yates shuffle of an index vector.
  void shuffle(std::vector<std::size_t>& indices);

  // Independent child stream; deterministic in (seed, tag).
  SeededRng fork(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

// n Gaussian draws with the given mean and standard deviation.
// std == 0 yields the constant mean. Negative std is a ParameterError.
std::vector<double> gaussian_sample(SeededRng& rng, std::size_t n, double mean,
                                    double std_dev);

}  // namespace domadapt
