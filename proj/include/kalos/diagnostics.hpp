#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kalos/reliability.hpp"

namespace kalos {

class DiagnosticsError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Localization sensitivity -------------------------------------------------

struct LsaPoint {
  double tau_s = 0.0;  // similarity threshold; matching uses tau = 1 - tau_s
  std::optional<double> mean_alpha;
  std::optional<double> global_alpha;
};

struct LsaCurve {
  std::vector<LsaPoint> points;
  double anchor_tau_s = 0.0;
  /// alpha(anchor) - alpha(strictest point); nullopt if either is undefined.
  std::optional<double> delta;
};

/// Re-runs the full pipeline for every similarity threshold (strictly
/// increasing, each in (0, 1]). The anchor defaults to 1 - c.tau and snaps to
/// the nearest listed value.
LsaCurve localization_sensitivity(const Dataset& d, const MatchConfig& c, const std::vector<double>& tau_s,
                                  std::optional<double> anchor_tau_s = std::nullopt, unsigned jobs = 0);

// Class difficulty ---------------------------------------------------------

struct ClassScore {
  std::string category;
  AlphaScore alpha;
  std::size_t support = 0;  // columns whose consensus is the category
};

/// Columns with the category as consensus, recoded to category vs NoObject.
ClassScore class_difficulty(const std::vector<ReliabilityMatrix>& ms, const std::string& category);
std::vector<ClassScore> class_table(const std::vector<ReliabilityMatrix>& ms, const std::vector<std::string>& categories);

// Vitality -----------------------------------------------------------------

enum class VitalityMode { Rerun, RowMask };

struct Vitality {
  std::string rater;
  std::optional<double> alpha_full;
  std::optional<double> alpha_without;
  std::optional<double> v;  // alpha_full - alpha_without
};

/// Rerun drops the rater before correspondence; RowMask blanks the rater's
/// rows in the matrices of the full run.
Vitality annotator_vitality(const Dataset& d, const MatchConfig& c, const std::string& rater,
                            VitalityMode mode = VitalityMode::Rerun, unsigned jobs = 0);
std::vector<Vitality> vitality_table(const Dataset& d, const MatchConfig& c, VitalityMode mode = VitalityMode::Rerun,
                                     unsigned jobs = 0);

// Collaboration ------------------------------------------------------------

struct CollaborationMatrix {
  std::vector<std::string> raters;
  /// entries[i][j]: mean alpha of the two-rater sub-dataset on shared images;
  /// nullopt on the diagonal, for pairs without shared images, or if undefined.
  std::vector<std::vector<std::optional<double>>> entries;
};

CollaborationMatrix collaboration_matrix(const Dataset& d, const MatchConfig& c, unsigned jobs = 0);

// Intra-annotator ----------------------------------------------------------

/// Treats the rater's two sessions as two pseudo-raters on the shared images.
MeanAlpha intra_annotator(const Dataset& t0, const Dataset& t1, const std::string& rater, const MatchConfig& c,
                          unsigned jobs = 0);

// Per-image distribution ---------------------------------------------------

struct AlphaDistribution {
  std::vector<double> sorted;  // defined per-image alphas, ascending
  std::optional<double> mean, median, q1, q3;
  std::size_t undefined_count = 0;
};

AlphaDistribution per_image_distribution(const MeanAlpha& m);

}  // namespace kalos
