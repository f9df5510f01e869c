#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cdl {

/// Counter-based generator: the i-th draw is a pure function of (key, i),
/// so streams split by tag never overlap and replay bit-identically.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : key_(mix(seed ^ 0x5DEECE66DULL)) {}

  // Independent child stream; does not advance this one.
  SeededRng split(std::string_view tag) const;
  SeededRng split(std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  double normal(double mean = 0.0, double stddev = 1.0);
  int uniform_int(int lo, int hi);         // [lo, hi]

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix(std::uint64_t z);

 private:
  SeededRng(std::uint64_t key, int) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cdl
