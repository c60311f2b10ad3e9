#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "misod/core/error.hpp"

namespace misod {

// Deterministic random stream. The distributions are implemented by hand on
// top of mt19937_64 because the std::*_distribution classes are free to vary
// between standard libraries and would break the bit-exact reproducibility
// contract of augmentation and shuffling.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  // Named sub-stream, e.g. one per data worker: mixes (seed, worker, epoch)
  // through splitmix64 so the streams are decorrelated.
  static RngStream for_worker(std::uint64_t seed, std::uint64_t worker,
                              std::uint64_t epoch) {
    std::uint64_t x = seed;
    x = splitmix(x + 0x9e3779b97f4a7c15ULL + worker);
    x = splitmix(x + 0x9e3779b97f4a7c15ULL + epoch);
    return RngStream(x);
  }

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // standard normal via Box-Muller; two uniforms per draw, no cached spare,
  // so the stream position is a pure function of the draw count
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // unbiased integer in [0, n) by rejection
  std::uint64_t uniform_below(std::uint64_t n) {
    internal_check(n > 0, "uniform_below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates; std::shuffle's draw pattern is implementation-defined
  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[uniform_below(i)]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    internal_check(!is.fail(), "bad rng state string");
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 gen_;
};

}  // namespace misod
