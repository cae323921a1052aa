#include "domadapt/rng.hpp"

#include <cmath>
#include <numbers>

#include "domadapt/errors.hpp"

namespace domadapt {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t z = seed_ + kGolden * ++counter_;
  return mix64(z);
}

double SeededRng::next_unit() {
  // Top 53 bits -> [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::next_uniform(double lo, double hi) {
  return lo + (hi - lo) * next_unit();
}

double SeededRng::next_gaussian() {
  const double u1 = next_unit();
  const double u2 = next_unit();
  // 1 - u1 lies in (0, 1], keeping the log finite.
  const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

void SeededRng::shuffle(std::vector<std::size_t>& indices) {
  if (indices.size() < 2) return;
  for (std::size_t i = indices.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(next_u64() % (i + 1));
    std::swap(indices[i], indices[j]);
  }
}

SeededRng SeededRng::fork(std::uint64_t tag) const {
  return SeededRng(mix64(seed_ ^ mix64(tag + kGolden)));
}

std::vector<double> gaussian_sample(SeededRng& rng, std::size_t n, double mean,
                                    double std_dev) {
  if (std_dev < 0.0) {
    throw ParameterError("gaussian_sample: std must be >= 0, got " +
                         std::to_string(std_dev));
  }
  std::vector<double> out(n);
  for (auto& v : out) v = mean + std_dev * rng.next_gaussian();
  return out;
}

}  // namespace domadapt
