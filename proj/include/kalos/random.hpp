#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace kalos {

/// SplitMix64 finalizer; used to derive independent seeds.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over the bytes of `s`.
std::uint64_t hash_string(std::string_view s);

/// Combines a base seed with stream coordinates (rater index, image hash, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> coords);

/// Seeded random source with portable variate generation.
///
/// Only the raw 64-bit engine comes from the standard library; every
/// distribution is implemented here so that a fixed seed produces the same
/// stream under any standard library implementation.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform on {0, ..., n-1}; n must be positive.
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  double gamma(double shape);
  double beta(double a, double b);
  double student_t(double nu);
  double von_mises(double mu, double kappa);
  std::uint64_t poisson(double mean);

  /// Index drawn proportionally to non-negative weights; weights must not all be zero.
  std::size_t weighted_index(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace kalos
