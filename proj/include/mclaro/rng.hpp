#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mclaro {

// Deterministic random stream. std::mt19937_64 output is pinned by the
// standard; the uniform/normal transforms below are hand-rolled because
// the standard library distributions are not bit-stable across
// implementations, and artifact runs must be reproducible byte-for-byte.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one sample per call, cached partner.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t integer(std::uint64_t n) {  // [0, n)
    return eng_() % n;
  }

  // Derive an independent stream, e.g. per (stage, item) pair.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// splitmix64 mix of seed and stream id
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  return Rng(mix_seed(seed, stream));
}

}  // namespace mclaro
