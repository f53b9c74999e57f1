#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace quase {

// Deterministic random source. std::mt19937 output is fully specified by the
// standard; the distributions here are hand-rolled because the std
// distribution objects are implementation-defined and would break
// reproducibility of generated corpora and training runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32)};
    gen_.seed(seq);
  }

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0,1) with 53 random bits.
  double next_unit() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    const std::uint64_t x = (hi << 32) | lo;
    return static_cast<double>(x >> 11) * (1.0 / 9007199254740992.0);
  }

  float uniform(float lo, float hi) {
    return static_cast<float>(lo + (hi - lo) * next_unit());
  }

  // Box-Muller without the cached spare, so the draw count per sample is fixed.
  float normal(float mean = 0.0f, float stddev = 1.0f) {
    double u1 = next_unit();
    const double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    return static_cast<float>(mean + stddev * r * std::cos(theta));
  }

  // Uniform integer in [lo, hi], inclusive. Integer-only arithmetic, so the
  // result stream is identical on every platform.
  int uniform_int(int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>((static_cast<std::uint64_t>(next_u32()) * range) >> 32);
  }

  // Fisher-Yates; std::shuffle is unspecified across implementations.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937 gen_;
};

}  // namespace quase
