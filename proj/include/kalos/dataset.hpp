#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace kalos {

// ---------------------------------------------------------------------------
// Geometry payloads. All coordinates are relative to the owning image, i.e.
// the image spans [0,1] on every axis.
// ---------------------------------------------------------------------------

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct Box2D {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
  friend bool operator==(const Box2D&, const Box2D&) = default;
};

struct Polygon {
  std::vector<Point2> vertices;
  friend bool operator==(const Polygon&, const Polygon&) = default;
};

struct VoxelBox {
  double x = 0.0, y = 0.0, z = 0.0, w = 0.0, h = 0.0, d = 0.0;
  friend bool operator==(const VoxelBox&, const VoxelBox&) = default;
};

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  int visible = 0;  // 0 or 1
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct KeypointSet {
  std::vector<Keypoint> points;
  friend bool operator==(const KeypointSet&, const KeypointSet&) = default;
};

using Geometry = std::variant<Box2D, Polygon, VoxelBox, KeypointSet>;

enum class GeometryKind { Box2D, Polygon, VoxelBox, Keypoints };

GeometryKind kind_of(const Geometry& g);
/// On-disk type tag: "bbox", "polygon", "voxel_box", "keypoints".
std::string_view geometry_type_name(GeometryKind k);
std::optional<GeometryKind> parse_geometry_type(std::string_view name);

/// Fixed-precision textual form; used for content-based ordering.
std::string canonical_string(const Geometry& g);

/// Empty if the geometry satisfies its invariants, otherwise a description.
std::string geometry_problem(const Geometry& g);

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct ImageRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::optional<int> depth;
  std::optional<std::string> tag;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct RaterRecord {
  std::string id;
  std::optional<std::string> name;
  friend bool operator==(const RaterRecord&, const RaterRecord&) = default;
};

struct Assignment {
  std::string image_id;
  std::string rater_id;
  /// nullopt means the rater was asked for every category.
  std::optional<std::vector<std::string>> categories;

  bool covers(std::string_view category_id) const;
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct Category {
  std::string id;
  std::string name;
  friend bool operator==(const Category&, const Category&) = default;
};

struct Annotation {
  std::string id;
  std::string image_id;
  std::string rater_id;
  std::string category_id;
  Geometry geometry;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<RaterRecord> raters;
  std::vector<Assignment> assignments;
  std::vector<Category> categories;
  std::vector<Annotation> annotations;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

class DatasetError : public std::runtime_error {
public:
  DatasetError(std::string record_id, const std::string& message)
      : std::runtime_error(record_id.empty() ? message : message + " [" + record_id + "]"),
        record_id_(std::move(record_id)) {}
  const std::string& record_id() const noexcept { return record_id_; }

private:
  std::string record_id_;
};

// ---------------------------------------------------------------------------
// Lookup structure over an immutable Dataset. Holds pointers into it, so the
// Dataset must outlive the index.
// ---------------------------------------------------------------------------

class DatasetIndex {
public:
  explicit DatasetIndex(const Dataset& d);

  const Dataset& dataset() const { return *d_; }
  const ImageRecord* image(std::string_view id) const;
  /// Annotation indices of one image, in dataset order.
  const std::vector<std::size_t>& annotations_of(std::string_view image_id) const;
  /// Assignment for (image, rater) or nullptr.
  const Assignment* assignment(std::string_view image_id, std::string_view rater_id) const;
  /// Raters assigned to the image, in dataset rater order.
  const std::vector<std::string>& assigned_raters(std::string_view image_id) const;

private:
  const Dataset* d_;
  std::unordered_map<std::string, std::size_t> image_pos_;
  std::vector<std::vector<std::size_t>> by_image_;
  std::vector<std::vector<std::string>> raters_by_image_;
  std::map<std::pair<std::string, std::string>, std::size_t> assignment_pos_;
  std::vector<std::size_t> empty_;
  std::vector<std::string> empty_raters_;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Violation {
  std::string check;
  std::string record_id;
  std::string message;
};

struct ValidationReport {
  /// Number of records inspected per check.
  std::map<std::string, std::size_t> checked;
  /// Number of violations per check.
  std::map<std::string, std::size_t> failed;
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
};

ValidationReport validate_dataset(const Dataset& d);

// ---------------------------------------------------------------------------
// Size measures
// ---------------------------------------------------------------------------

enum class SizeClass { Small, Medium, Large };

std::string_view size_class_name(SizeClass s);

/// COCO area anchors rescaled to a 640x480 image.
inline constexpr double kSmallAreaLimit = 32.0 * 32.0 / (640.0 * 480.0);
inline constexpr double kMediumAreaLimit = 96.0 * 96.0 / (640.0 * 480.0);

/// Fraction of image area (volume for voxel boxes).
double relative_area(const Geometry& g);
double relative_area(const Annotation& a);

/// Half-open classes: [0, small) Small, [small, medium) Medium, rest Large.
SizeClass size_class(double relative_area);
SizeClass size_class(const Annotation& a);

/// Dataset restricted to a subset of raters; assignments and annotations of
/// other raters are dropped. Images are kept.
Dataset restrict_to_raters(const Dataset& d, const std::vector<std::string>& rater_ids);

/// Dataset restricted to a subset of images.
Dataset restrict_to_images(const Dataset& d, const std::vector<std::string>& image_ids);

}  // namespace kalos
