#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kalos/dataset.hpp"
#include "kalos/geometry.hpp"

namespace kalos {

class CalibrationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class PairingMode { AllPairs, BestMatch };
std::string_view pairing_mode_name(PairingMode m);  // "all_pairs" | "best_match"
std::optional<PairingMode> parse_pairing_mode(std::string_view s);

struct SamplingOptions {
  PairingMode mode = PairingMode::AllPairs;
  int images_per_anchor = 1;
  std::uint64_t seed = 0;
  /// When set, only anchor annotations of this size class contribute; their
  /// partners come from the whole pool.
  std::optional<SizeClass> target;
};

struct DisagreementSamples {
  std::vector<double> observed;
  std::vector<double> expected;
  DistanceMetric metric = DistanceMetric::BoxIou;
  PairingMode mode = PairingMode::AllPairs;
  std::uint64_t seed = 0;
};

/// D_o: cross-rater distances within each image.
/// AllPairs: every unordered cross-rater pair once (ordered by anchor when a
/// size target is set). BestMatch: per (annotation, other rater) the minimum
/// distance to that rater's annotations on the same image.
std::vector<double> sample_observed(const Dataset& d, DistanceMetric m, const SamplingOptions& opt = {});

/// D_e: each image's annotations against other raters' annotations on
/// `images_per_anchor` other images drawn without replacement. In AllPairs
/// mode an unordered image pair is used at most once.
std::vector<double> sample_expected(const Dataset& d, DistanceMetric m, const SamplingOptions& opt = {});

DisagreementSamples sample_disagreement(const Dataset& d, DistanceMetric m, const SamplingOptions& opt = {});

/// Exact two-sample KS statistic.
double ks_statistic(std::span<const double> a, std::span<const double> b);

struct CalibrationResult {
  DistanceMetric metric = DistanceMetric::BoxIou;
  double ks = 0.0;
  double ks_argmax = 0.0;  // location of the largest CDF gap
  double tau_star = 0.0;
  bool no_crossover = false;
  std::vector<double> crossover_candidates;
  std::vector<double> grid;
  std::vector<double> f_do;
  std::vector<double> f_de;
  double bandwidth_do = 0.0;
  double bandwidth_de = 0.0;
  std::size_t n_observed = 0;
  std::size_t n_expected = 0;
};

/// KDE both samples on `grid_size` points over [0,1] and pick the sign change
/// of f_Do - f_De nearest the KS argmax; without one, tau* is the midpoint of
/// the sample means and `no_crossover` is set. Needs >= 10 points per side.
CalibrationResult estimate_tau_star(const DisagreementSamples& s, std::size_t grid_size = 1001);

struct MetricRank {
  DistanceMetric metric = DistanceMetric::BoxIou;
  double ks = 0.0;
  double tau_star = 0.0;
  bool no_crossover = false;
};
/// KS descending, ties by metric name.
std::vector<MetricRank> rank_metrics(const Dataset& d, std::span<const DistanceMetric> metrics,
                                     const SamplingOptions& opt = {}, std::size_t grid_size = 1001);

enum class Stratum { All, Small, Medium, Large };
std::string_view stratum_name(Stratum s);

struct BootstrapEntry {
  Stratum stratum = Stratum::All;
  std::size_t iterations = 0;        // requested
  std::size_t valid_iterations = 0;  // iterations with enough samples to estimate
  std::size_t no_crossover = 0;
  double tau_mean = 0.0, tau_lo = 0.0, tau_hi = 0.0;
  double ks_mean = 0.0, ks_lo = 0.0, ks_hi = 0.0;
  std::vector<double> tau_values;  // per valid iteration, in iteration order
  std::vector<double> ks_values;
};

struct BootstrapTable {
  DistanceMetric metric = DistanceMetric::BoxIou;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::vector<BootstrapEntry> entries;
};

struct BootstrapOptions {
  std::size_t iterations = 100;
  std::uint64_t seed = 0;
  bool stratify_by_size = false;
  /// Use the unresampled dataset (and the point-estimate D_e seed) for the
  /// first iteration.
  bool identity_first = false;
  std::size_t grid_size = 1001;
  unsigned jobs = 0;
};

/// Percentile bootstrap over images resampled with replacement. Replicated
/// images never serve as each other's chance partners.
BootstrapTable bootstrap_calibration(const Dataset& d, DistanceMetric m, const SamplingOptions& sampling,
                                     const BootstrapOptions& opt);

/// Percentile bootstrap over already-drawn samples (D_o and D_e resampled
/// independently).
BootstrapTable bootstrap_samples(const DisagreementSamples& s, const BootstrapOptions& opt);

}  // namespace kalos
