#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "diffil/errors.hpp"

namespace diffil {

// Seeded RNG with hand-rolled distributions so that streams are identical
// across standard libraries and the full state round-trips through text
// serialization (needed for exact run resumption).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (no cached spare, keeps state minimal).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Truncated standard normal, rejecting |z| > 2.
  double trunc_normal() {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z;
    }
  }

  // Uniform integer in [0, n).
  int64_t randint(int64_t n) {
    if (n <= 0) throw shape_error("randint: n must be positive");
    return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
  }

  // Derives an independent stream; used to give subsystems their own RNGs.
  Rng split() { return Rng(gen_() ^ 0x9e3779b97f4a7c15ull); }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw data_error("malformed RNG state");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace diffil
