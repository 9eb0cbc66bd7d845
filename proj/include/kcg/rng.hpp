// Counter-keyed random streams. Each (seed, i, k) tuple owns an independent
// stream, so burst replicas can be generated in any order and still reproduce
// bit-identical results. The generator is splitmix64; normals via Box-Muller.
#pragma once
#include <cmath>
#include <cstdint>

namespace kcg {

inline std::uint64_t splitmix64_step(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class rng_stream {
public:
  explicit rng_stream(std::uint64_t seed) : state_(seed) {
    // warm up so that adjacent seeds decorrelate immediately
    splitmix64_step(state_);
  }

  // stream for replica k of start point i under a run seed
  static rng_stream keyed(std::uint64_t seed, std::uint64_t i, std::uint64_t k) {
    std::uint64_t s = seed;
    std::uint64_t a = splitmix64_step(s);
    s = a ^ (i * 0xD1342543DE82EF95ULL + 1);
    a = splitmix64_step(s);
    s = a ^ (k * 0xAF251AF3B0F025B5ULL + 1);
    splitmix64_step(s);
    return rng_stream(s);
  }

  std::uint64_t next_u64() { return splitmix64_step(state_); }

  // uniform on (0,1); never returns 0 so log() below is safe
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace kcg
