#include "cdl/rng.hpp"

#include <cmath>
#include <numbers>

namespace cdl {

std::uint64_t SeededRng::mix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

SeededRng SeededRng::split(std::string_view tag) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return SeededRng(mix(key_ ^ mix(h)), 0);
}

SeededRng SeededRng::split(std::uint64_t index) const {
  return SeededRng(mix(key_ + mix(index ^ 0xA5A5A5A5A5A5A5A5ULL)), 0);
}

std::uint64_t SeededRng::next_u64() {
  ++counter_;
  return mix(mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL));
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double SeededRng::normal(double mean, double stddev) {
  // Box-Muller; one draw per call keeps the counter arithmetic simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

int SeededRng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(next_u64() % span);
}

}  // namespace cdl
