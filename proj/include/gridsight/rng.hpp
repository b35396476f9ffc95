#pragma once

#include <cstdint>
#include <random>

namespace gridsight {

// mt19937_64 with hand-rolled distributions. The standard library's
// distribution objects are implementation-defined, so anything that must be
// byte-reproducible across toolchains (dataset synthesis, weight init,
// shuffles) goes through this wrapper instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // [0,1) with 53 random bits
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range
  int uniform_int(int lo, int hi) {
    return lo + int(uint64_t(eng_() >> 16) % uint64_t(hi - lo + 1));
  }

  // Box-Muller with cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Independent sub-stream (init vs shuffle vs synthesis).
  Rng fork(uint64_t stream) {
    return Rng(eng_() ^ (stream * 0x9E3779B97F4A7C15ull));
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      auto j = uint64_t(eng_() >> 16) % uint64_t(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gridsight
