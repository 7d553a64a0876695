#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>

namespace pilnm {

/// Seeded random stream with fixed bit-level mappings. The standard
/// distributions are implementation-defined, so uniform/normal draws are
/// derived here directly from the mt19937_64 word stream; seeded runs are
/// reproducible across standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the pair is consumed in order.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // 1 - u keeps the argument of log strictly positive.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n).
  int uniform_int(int n) {
    int k = static_cast<int>(uniform() * static_cast<double>(n));
    return k >= n ? n - 1 : k;
  }

  /// Derives a decorrelated seed for a named substream.
  static std::uint64_t derive(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pilnm
