#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kalos/correspondence.hpp"
#include "kalos/noise.hpp"

namespace kalos {

/// Ground-truth correspondence of synthetic annotations, derived from the
/// generator's source map. Shifted and flipped annotations resolve to their
/// reference id; false positives are known to have no partner; fragments and
/// merges are unknown.
struct TruthMap {
  std::map<std::string, std::optional<std::string>> known;  // id -> reference id (nullopt: no partner)
  std::map<std::string, std::string> rater;                 // id -> rater for every annotation
  std::map<std::string, std::string> image;

  static TruthMap from_synthesis(const SynthesisResult& r);
  bool is_known(const std::string& id) const { return known.count(id) > 0; }
  bool true_pair(const std::string& a, const std::string& b) const;
};

/// Cross-rater, same-image pairs with at least one known member.
std::optional<double> filtered_rand_index(const std::vector<UnitSet>& pred, const TruthMap& truth);

enum class Outcome { TruePositive, FalsePositive, MissedOpportunity, CuckooEgg };
std::string_view outcome_name(Outcome o);

struct PairOutcome {
  Outcome variant = Outcome::TruePositive;
  std::pair<std::string, std::string> pair;  // the evaluated pair (the missed true pair for cuckoo eggs)
  std::optional<std::pair<std::string, std::string>> displacing;  // cuckoo eggs: the false pair
  std::optional<double> d_loc;
};

struct PairMetrics {
  std::size_t tp = 0, fp = 0, missed = 0, cuckoo = 0;
  std::optional<double> precision, recall, f1;
  std::vector<PairOutcome> outcomes;
};

/// `d` supplies geometries for d_loc; pass nullptr to skip distances.
PairMetrics pair_metrics(const std::vector<UnitSet>& pred, const TruthMap& truth, const Dataset* d = nullptr,
                         DistanceMetric m = DistanceMetric::BoxIou);

/// Adjusted Rand Index of two partitions given as item -> label maps over the
/// same items. Two trivial identical partitions score 1.
double adjusted_rand_index(const std::map<std::string, std::string>& x, const std::map<std::string, std::string>& y);
/// Flattens per-image units into annotation id -> "image/unit index".
std::map<std::string, std::string> partition_labels(const std::vector<UnitSet>& units);

struct StabilityResult {
  std::vector<double> ari;  // one per permuted run
  double mean = 0.0, min = 0.0;
};

/// Re-solves after shuffling annotation and rater order; compares each run to
/// the unpermuted clustering.
StabilityResult permutation_stability(const Dataset& d, const MatchConfig& c, int n_perms, std::uint64_t seed,
                                      unsigned jobs = 0);

// Suite --------------------------------------------------------------------

struct SuiteOptions {
  std::vector<double> lambdas{0.25, 0.5, 1, 2, 5};
  std::vector<int> rater_counts{3};
  std::vector<Solver> solvers{Solver::Greedy};
  std::vector<CostFunction> costs{CostFunction::Soft};
  int seeds = 1;
  std::uint64_t seed = 0;
  DistanceMetric metric = DistanceMetric::BoxIou;
  double tau = 0.5;
  /// Group splits for the collaboration sweep; empty skips it.
  std::vector<std::pair<int, int>> collaboration;
  double collaboration_lambda = 1.0;
  /// The second reference style is the reference perturbed at this lambda.
  double style_lambda = 2.0;
  unsigned jobs = 0;
};

struct SuiteRow {
  double lambda = 0.0;
  int raters = 0;
  Solver solver = Solver::Greedy;
  CostFunction cost = CostFunction::Soft;
  int seed_index = 0;
  std::optional<double> rand_index;
  PairMetrics metrics;  // outcome list dropped; counts kept
  std::optional<double> mean_alpha, global_alpha;
  std::optional<std::string> error;
};

struct CollaborationRow {
  int group_a = 0, group_b = 0;
  int seed_index = 0;
  std::optional<double> mean_alpha;
  std::optional<std::string> error;
};

struct ExperimentReport {
  std::vector<SuiteRow> rows;
  std::vector<CollaborationRow> collaboration;
};

ExperimentReport run_suite(const Dataset& reference, const NoiseModel& model, const SuiteOptions& opt);

/// Mean over seeds of the defined values of `f` for rows matching `keep`.
template <class Keep, class F>
std::optional<double> suite_mean(const ExperimentReport& r, Keep keep, F f) {
  double s = 0.0;
  int n = 0;
  for (const auto& row : r.rows)
    if (keep(row))
      if (const std::optional<double> v = f(row)) {
        s += *v;
        ++n;
      }
  if (n == 0) return std::nullopt;
  return s / n;
}

}  // namespace kalos
