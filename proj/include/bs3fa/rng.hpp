#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "bs3fa/common.hpp"

namespace bs3fa {

// Standard normal CDF.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse standard normal CDF, Acklam's rational approximation refined by one
// Halley step; accurate to ~1e-15 over (0,1).
inline double norm_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= phigh) {
    double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement against erfc for full double precision.
  double e = norm_cdf(x) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

// SplitMix64, used to derive independent seed streams.
inline std::uint64_t splitmix64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic stream seed for (base seed, stream index) pairs so chains,
// study cells and reps never share an RNG stream.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(init_seed(seed)) {}

  double uniform() { return unif_(gen_); }

  double normal() { return norm_(gen_); }

  double normal(double mean, double var) {
    return mean + std::sqrt(var) * normal();
  }

  // Gamma with shape/rate parameterization (std::gamma_distribution is
  // shape/scale).
  double gamma(double shape, double rate) {
    std::gamma_distribution<double> d(shape, 1.0 / rate);
    return d(gen_);
  }

  double inverse_gamma(double shape, double rate) {
    double g = gamma(shape, rate);
    if (g <= 0.0 || !std::isfinite(g))
      throw NumericalError("inverse_gamma: degenerate gamma draw");
    return 1.0 / g;
  }

  std::uint64_t uniform_int(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(gen_);
  }

  // Index draw from unnormalized log-weights via log-sum-exp.
  int categorical_log(const Vector& logw) {
    const double m = logw.maxCoeff();
    if (!std::isfinite(m)) throw NumericalError("categorical_log: non-finite weights");
    Vector w = (logw.array() - m).exp();
    double total = w.sum();
    double u = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u <= acc) return i;
    }
    return static_cast<int>(w.size()) - 1;
  }

  // Truncated standard normal on [lo, hi] (either side may be infinite).
  // Inverse-CDF when the nearer bound is within 6 sd; one-sided exponential
  // rejection (Robert 1995) for far tails, which the binary augmentation hits
  // routinely.
  double truncated_std_normal(double lo, double hi) {
    if (lo > hi) throw NumericalError("truncated_std_normal: empty interval");
    constexpr double tail = 6.0;
    if (lo >= tail && std::isinf(hi)) return robert_tail(lo);
    if (hi <= -tail && std::isinf(lo)) return -robert_tail(-hi);
    double plo = norm_cdf(lo), phi = norm_cdf(hi);
    if (phi - plo < 1e-14) {
      // Interval mass numerically zero on both bounded sides; fall back to the
      // nearer boundary in tail scale.
      if (lo > 0.0) return lo >= tail ? robert_tail_capped(lo, hi) : lo;
      if (hi < 0.0) return hi <= -tail ? -robert_tail_capped(-hi, -lo) : hi;
      return 0.0;
    }
    double u = plo + uniform() * (phi - plo);
    return norm_quantile(u);
  }

  double truncated_normal(double mean, double var, double lo, double hi) {
    double sd = std::sqrt(var);
    return mean + sd * truncated_std_normal((lo - mean) / sd, (hi - mean) / sd);
  }

  std::mt19937_64& raw() { return gen_; }

 private:
  static std::uint64_t init_seed(std::uint64_t seed) {
    std::uint64_t s = seed;
    return splitmix64(s);
  }

  double robert_tail(double lo) {
    // Samples z >= lo > 0 from the standard normal tail.
    const double a = 0.5 * (lo + std::sqrt(lo * lo + 4.0));
    for (;;) {
      double e = -std::log(uniform()) / a;
      double z = lo + e;
      double rho = std::exp(-0.5 * (z - a) * (z - a));
      if (uniform() <= rho) return z;
    }
  }

  double robert_tail_capped(double lo, double hi) {
    for (int tries = 0; tries < 10000; ++tries) {
      double z = robert_tail(lo);
      if (z <= hi) return z;
    }
    return lo;  // interval vanishingly thin this far out
  }

  std::mt19937_64 gen_;
  std::uniform_real_distribution<double> unif_{std::nextafter(0.0, 1.0), 1.0};
  std::normal_distribution<double> norm_{0.0, 1.0};
};

}  // namespace bs3fa
