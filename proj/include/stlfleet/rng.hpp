#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stlfleet {

// splitmix64 step; used to derive independent stream keys from a master seed.
// Distinct (master, tag) pairs give streams that are independent for all
// practical purposes, which is how per-agent / per-run noise is keyed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t master, uint64_t tag) {
  return splitmix64(splitmix64(master) ^ splitmix64(~tag));
}

// Deterministic random stream. mt19937_64 output is pinned by the standard,
// and the Gaussian transform is done by hand (std::normal_distribution is
// implementation-defined), so sequences are reproducible everywhere.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // standard normal via Box-Muller (polar-free variant, cached spare)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  uint64_t next_u64() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stlfleet
