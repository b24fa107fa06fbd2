#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kalos/dataset.hpp"
#include "kalos/stats.hpp"

namespace kalos {

// ===========================================================================
// Error extraction
// ===========================================================================

struct MatchedPairRecord {
  std::string image_id;
  std::string a, b;  // annotation ids; a belongs to the earlier rater
  std::string category_a, category_b;
  double d_loc = 0.0;
  double a_avg = 0.0;      // mean relative area of the two boxes
  double dx = 0.0, dy = 0.0;
  double magnitude = 0.0;  // |(dx, dy)|
  double angle = 0.0;      // atan2(dy, dx) in [0, 2pi)
  double log_sw = 0.0;     // ln(w_b / w_a)
  double log_sh = 0.0;
  bool same_category() const { return category_a == category_b; }
};

struct UnmatchedRecord {
  std::string image_id;
  std::string annotation_id;
  std::string rater_id;
  int rater_count = 0;  // annotations of that rater on the image
  double rel_area = 0.0;
};

/// One (rater pair, image): unmatched annotations on both sides against the
/// mean per-rater annotation count.
struct CountRecord {
  double mean_count = 0.0;
  int unmatched = 0;
};

struct TopologyRecord {
  std::string image_id;
  std::string parent;
  std::vector<std::string> children;
  Box2D parent_box;
  std::vector<Box2D> child_boxes;
};

/// Labelled size observation used by the selection and parent regressions.
struct AreaRecord {
  double log_area = 0.0;
  bool unmatched = false;
  bool parent = false;
};

struct ErrorCorpus {
  double iou_threshold = 0.5;
  std::vector<MatchedPairRecord> matched;
  std::vector<UnmatchedRecord> unmatched;
  std::vector<CountRecord> counts;
  std::vector<TopologyRecord> topology;
  std::vector<AreaRecord> areas;
  /// Same-rater, same-category box pairs not involved in topology records;
  /// they calibrate the merge threshold.
  std::vector<std::pair<Box2D, Box2D>> sibling_pairs;
  std::map<std::pair<std::string, std::string>, int> confusion;  // symmetric
  std::vector<std::string> categories;
};

class NoiseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Pairwise rater comparison per image: topology detection first, then greedy
/// one-to-one matching on IoU >= threshold. Box datasets only.
ErrorCorpus extract_errors(const Dataset& d, double iou_threshold = 0.5);

struct SweepRow {
  double iou_threshold = 0.0;
  std::size_t matched_same = 0;
  std::size_t matched_confused = 0;
  std::size_t unmatched = 0;
  std::size_t topology = 0;
};
std::vector<SweepRow> threshold_sweep(const Dataset& d, const std::vector<double>& thresholds);

// ===========================================================================
// Model
// ===========================================================================

struct LocalizationProfile {
  stats::LinearTModel translation;  // |shift| against mean relative area
  stats::VonMisesMixture direction;
  stats::LinearTModel scale_w;      // |ln width ratio| against mean relative area
  stats::LinearTModel scale_h;
};

struct CategoryTransition {
  /// similarity[c][c'] from an external embedding; empty means uniform.
  std::map<std::string, std::map<std::string, double>> similarity;
  double temperature = 0.1;
  int top_k = 10;

  bool uniform() const { return similarity.empty(); }
  /// Replacement for `from` among `categories`; nullopt if there is none.
  std::optional<std::string> draw(const std::string& from, const std::vector<std::string>& categories,
                                  Rng& rng) const;
};

struct Proposal {
  std::string image_id;
  Box2D box;
  std::string category_id;
  double score = 0.0;
};

struct TopologyModel {
  bool enabled = false;
  stats::LogisticModel parent;  // P_parent on ln(area)
  stats::LinearTModel child_w;  // ln(w_child / w_parent) against parent area
  stats::LinearTModel child_h;
  stats::LinearTModel child_offset;  // |child centre - parent centre| against parent area
  stats::BetaFit child_angle;        // angle between the child vectors / pi
  double kappa = 0.0;                // added to both child log-scale intercepts
  double merge_threshold = 0.0;      // on log S; merges disabled when not finite
  bool merge_enabled = false;

  /// Log of the pair score S for two boxes read as fragments of their enclosing box.
  double log_merge_score(const Box2D& a, const Box2D& b) const;
};

struct NoiseModel {
  LocalizationProfile localization;
  double p_global = 0.026;
  CategoryTransition transition;
  LocalizationProfile misclassified;
  stats::PoissonModel unmatched_rate;  // events per (rater, image) against annotation count
  stats::LogisticModel select;         // P_select on ln(area)
  double fn_share = 0.5;
  std::vector<Proposal> proposals;     // empty: random-box fallback
  TopologyModel topology;
  std::vector<std::string> flags;      // fallbacks taken while fitting
  std::string corpus_hash;
};

/// Parameters used when no corpus is available.
NoiseModel default_noise_model();

struct FitOptions {
  std::optional<std::filesystem::path> similarity_file;
  std::optional<std::filesystem::path> proposal_file;
  std::uint64_t seed = 0;
};

NoiseModel fit_noise_model(const ErrorCorpus& corpus, const FitOptions& opt = {});

nlohmann::json noise_model_to_json(const NoiseModel& m);
NoiseModel noise_model_from_json(const nlohmann::json& j);

/// JSON object of objects or {"categories": [...], "matrix": [[...]]}, or CSV
/// with a header row of category ids.
std::map<std::string, std::map<std::string, double>> load_similarity(const std::filesystem::path& p);
/// JSON list of {image_id, bbox: [x, y, w, h] relative, category_id, score}.
std::vector<Proposal> load_proposals(const std::filesystem::path& p);

// ===========================================================================
// Synthesis
// ===========================================================================

enum class Fate { Shifted, Flipped, Fragmented, Merged, Deleted };
std::string_view fate_name(Fate f);

enum class Origin { Shifted, Flipped, Fragment, Merged, FalsePositive };
std::string_view origin_name(Origin o);

struct SyntheticSource {
  Origin origin = Origin::Shifted;
  std::vector<std::string> reference_ids;  // empty for false positives
};

struct StageCounts {
  std::size_t false_negatives = 0;
  std::size_t false_positives = 0;
  std::size_t fp_skipped = 0;  // no admissible proposal
  std::size_t fragmentations = 0;
  std::size_t merges = 0;
  std::size_t flips = 0;
  std::size_t theoretical = 0;
  std::size_t cannibalized = 0;
  void add(const StageCounts& o);
};

struct SynthesisResult {
  Dataset dataset;                                        // synthetic raters only
  std::map<std::string, SyntheticSource> source;          // synthetic id -> reference
  std::map<std::pair<std::string, std::string>, Fate> fate;  // (rater, reference id)
  std::map<std::pair<std::string, std::string>, StageCounts> log;  // (rater, image)
  StageCounts totals;
  double signal_loss = 0.0;
};

struct GenerateOptions {
  double lambda = 1.0;
  int raters = 1;
  std::uint64_t seed = 0;
  std::string rater_prefix = "syn";
  unsigned jobs = 0;
};

SynthesisResult generate(const Dataset& reference, const NoiseModel& model, const GenerateOptions& opt);

/// Group A drawn from style 1, group B from style 2, raters named A_0.., B_0..
SynthesisResult generate_collaboration(const Dataset& style_a, const Dataset& style_b, int group_a, int group_b,
                                       const NoiseModel& model, double lambda, std::uint64_t seed, unsigned jobs = 0);

/// Union of two datasets over the same images: raters, assignments,
/// categories and annotations of `b` are appended to `a`.
Dataset combine_raters(const Dataset& a, const Dataset& b);

/// Correspondence sidecar: synthetic id -> {origin, reference_ids}.
nlohmann::json sources_to_json(const SynthesisResult& r);

}  // namespace kalos
