#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace vtlab {

// Counter-based pseudo-random generator. Sample i is a pure integer hash of
// (key, i), so identical seeds give bit-identical streams on every platform,
// and split() derives independent streams without sharing mutable state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix64(seed ^ kSeedSalt)) {}

  // Derives an independent generator; different stream ids never collide
  // with the parent stream or with each other in practice.
  Rng split(uint64_t stream) const {
    Rng child(0);
    child.key_ = mix64(key_ ^ mix64(stream + kSplitSalt));
    child.counter_ = 0;
    return child;
  }

  uint64_t next_u64() { return mix64(key_ + (++counter_) * kGamma); }

  // Uniform in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1), strictly interior (safe for inverse-CDF transforms).
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
  }

  // Standard normal via Acklam's inverse-CDF approximation. Uses only
  // arithmetic plus sqrt/log in the tails, keeping streams reproducible.
  double normal() { return inverse_normal_cdf(uniform_open()); }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    return next_u64() % n;
  }

  uint64_t counter() const { return counter_; }

  static constexpr uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0))
      throw std::invalid_argument("inverse_normal_cdf: p outside (0,1)");
    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    if (p < p_low) {
      double q = std::sqrt(-2.0 * std::log(p));
      return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
             ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - p_low) {
      double q = std::sqrt(-2.0 * std::log(1.0 - p));
      return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
             ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    double q = p - 0.5;
    double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }

 private:
  static constexpr uint64_t kSeedSalt = 0x5bd1e995c6b3a1f7ULL;
  static constexpr uint64_t kSplitSalt = 0x27d4eb2f165667c5ULL;
  static constexpr uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace vtlab
