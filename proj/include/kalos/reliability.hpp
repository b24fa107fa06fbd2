#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kalos/correspondence.hpp"
#include "kalos/dataset.hpp"

namespace kalos {

struct Cell {
  enum class Kind { Category, NoObject, Missing };
  Kind kind = Kind::Missing;
  std::string category;  // set only for Kind::Category

  static Cell of(std::string c) { return {Kind::Category, std::move(c)}; }
  static Cell no_object() { return {Kind::NoObject, {}}; }
  static Cell missing() { return {}; }
  bool operator==(const Cell&) const = default;
};

/// Raters x units. Rows are every rater of the dataset in dataset order, so
/// matrices of different images line up row by row.
struct ReliabilityMatrix {
  std::string image_id;
  std::vector<std::string> raters;
  std::vector<std::string> units;               // first member id of each unit
  std::vector<std::string> consensus;           // modal category per unit
  std::vector<std::vector<Cell>> cells;         // cells[rater][unit]
  std::vector<std::string> assigned;            // raters assigned to the image
  /// Assigned raters exist but none of them annotated anything.
  bool empty_image() const { return units.empty() && !assigned.empty(); }
};

/// Modal category of the members, ties broken by the smaller id.
std::string consensus_category(const std::vector<std::string>& categories);

ReliabilityMatrix build_reliability_matrix(const UnitSet& units, const DatasetIndex& idx);

/// Pair values: a category id, or nullopt for NoObject.
using Value = std::optional<std::string>;

struct CoincidenceCounts {
  std::map<std::pair<Value, Value>, double> o;
  std::map<Value, double> n_c;
  double n = 0.0;

  /// Adds one unit's pairable values with weight 1 / (m_u - 1) per ordered pair.
  void add_column(const std::vector<Value>& values);
  void merge(const CoincidenceCounts& other);
};

CoincidenceCounts coincidence_counts(const ReliabilityMatrix& m);
CoincidenceCounts coincidence_counts(const std::vector<ReliabilityMatrix>& ms);

enum class Band { NearPerfect, Substantial, Moderate, Weak, Systematic };
std::string_view band_name(Band b);
Band band_of(double alpha);

struct AlphaScore {
  std::optional<double> value;  // nullopt = Undefined
  double n_pairable = 0.0;
  std::optional<Band> band() const { return value ? std::optional<Band>(band_of(*value)) : std::nullopt; }
};

AlphaScore krippendorff_alpha(const CoincidenceCounts& c);

struct ImageAlpha {
  std::string image_id;
  AlphaScore alpha;
  bool empty = false;  // scored 1.0 by the empty-image convention
};

struct MeanAlpha {
  std::optional<double> mean;  // nullopt if every image is Undefined
  std::vector<ImageAlpha> images;
  std::size_t undefined_count = 0;
  std::size_t empty_count = 0;
};

/// Per-image alpha for one matrix, applying the empty-image convention.
ImageAlpha image_alpha(const ReliabilityMatrix& m);
MeanAlpha mean_alpha(const std::vector<ReliabilityMatrix>& ms);
/// Alpha on all columns pooled; each empty image adds one virtual column where
/// every assigned rater holds NoObject.
AlphaScore global_alpha(const std::vector<ReliabilityMatrix>& ms);

struct PipelineResult {
  MatchConfig config;
  std::vector<UnitSet> units;
  std::vector<ReliabilityMatrix> matrices;
  MeanAlpha mean;
  AlphaScore global;
};

/// correspond -> reliability matrices -> mean and global alpha.
PipelineResult run_pipeline(const Dataset& d, const MatchConfig& c, unsigned jobs = 0);

}  // namespace kalos
