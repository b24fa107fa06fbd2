#include "kalos/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace kalos {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = mix64(seed);
  for (auto c : coords) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  // Rejection sampling keeps the draw unbiased for any n.
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % range);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Marsaglia polar method.
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  has_spare_ = true;
  return u * m;
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw std::invalid_argument("Rng::gamma: shape must be positive");
  if (shape < 1.0) {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia & Tsang.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  if (x + y == 0.0) return a >= b ? 1.0 : 0.0;
  return x / (x + y);
}

double Rng::student_t(double nu) {
  if (!(nu > 0.0)) throw std::invalid_argument("Rng::student_t: nu must be positive");
  const double z = normal();
  const double chi2 = 2.0 * gamma(0.5 * nu);
  return z / std::sqrt(chi2 / nu);
}

double Rng::von_mises(double mu, double kappa) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double theta;
  if (kappa < 1e-8) {
    theta = two_pi * uniform();
  } else if (kappa > 1e5) {
    theta = mu + normal() / std::sqrt(kappa);
  } else {
    // Best & Fisher (1979).
    const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
    const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
    const double r = (1.0 + rho * rho) / (2.0 * rho);
    double f;
    for (;;) {
      const double u1 = uniform();
      const double u2 = uniform();
      const double z = std::cos(std::numbers::pi * u1);
      f = (1.0 + r * z) / (r + z);
      const double c = kappa * (r - f);
      if (c * (2.0 - c) - u2 > 0.0) break;
      if (u2 > 0.0 && std::log(c / u2) + 1.0 - c >= 0.0) break;
    }
    f = std::clamp(f, -1.0, 1.0);
    const double sign = uniform() < 0.5 ? -1.0 : 1.0;
    theta = mu + sign * std::acos(f);
  }
  theta = std::fmod(theta, two_pi);
  if (theta < 0.0) theta += two_pi;
  return theta;
}

std::uint64_t Rng::poisson(double mean) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw std::invalid_argument("Rng::poisson: bad mean");
  if (mean == 0.0) return 0;
  if (mean < 30.0) {
    const double limit = std::exp(-mean);
    std::uint64_t k = 0;
    double p = uniform();
    while (p > limit) {
      ++k;
      p *= uniform();
    }
    return k;
  }
  // PTRS, Hormann (1993).
  const double slam = std::sqrt(mean);
  const double loglam = std::log(mean);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = uniform() - 0.5;
    const double v = uniform();
    const double us = 0.5 - std::fabs(u);
    const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
        -mean + k * loglam - std::lgamma(k + 1.0))
      return static_cast<std::uint64_t>(k);
  }
}

std::size_t Rng::weighted_index(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw std::invalid_argument("Rng::weighted_index: bad weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("Rng::weighted_index: all weights zero");
  const double target = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  // Rounding can leave target == total; fall back to the last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return 0;
}

}  // namespace kalos
