#pragma once

#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "kalos/dataset.hpp"

namespace kalos {

/// Localization distance functions. Every metric returns a distance in [0,1];
/// the matching similarity is 1 - distance.
enum class DistanceMetric { BoxIou, PolygonIou, MaskGiou, L2Centroid, VoxelIou, PoseNmpjpe };

/// "box_iou", "polygon_iou", "mask_giou", "l2_centroid", "voxel_iou", "pose_nmpjpe".
std::string_view metric_name(DistanceMetric m);
std::optional<DistanceMetric> parse_metric(std::string_view name);
const std::vector<DistanceMetric>& all_metrics();

/// Whether `m` can compare geometries of kind `k`.
///   box_iou: bbox; polygon_iou / mask_giou: bbox or polygon;
///   l2_centroid: bbox, polygon, keypoints, voxel_box; voxel_iou: voxel_box;
///   pose_nmpjpe: keypoints.
bool metric_accepts(DistanceMetric m, GeometryKind k);

class IncompatibleGeometry : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

double distance(const Geometry& a, const Geometry& b, DistanceMetric m);
inline double similarity(const Geometry& a, const Geometry& b, DistanceMetric m) { return 1.0 - distance(a, b, m); }

struct Centroid {
  double x = 0.0;
  double y = 0.0;
  std::optional<double> z;
};

/// Box and voxel centers, area-weighted polygon centroid, mean of visible keypoints.
Centroid centroid(const Geometry& g);

// Building blocks, exposed for tests and the noise generator.
double box_iou(const Box2D& a, const Box2D& b);
double voxel_iou(const VoxelBox& a, const VoxelBox& b);
double polygon_area(const Polygon& p);
Polygon box_to_polygon(const Box2D& b);

/// Intersection, union and convex-hull areas of two simple polygons.
struct PolygonOverlap {
  double intersection = 0.0;
  double union_area = 0.0;
  double hull = 0.0;
  bool rasterized = false;  // true when the exact clipper rejected the input
};
PolygonOverlap polygon_overlap(const Polygon& a, const Polygon& b);

/// Even-odd rasterization at `resolution`^2 over the joint bounding box.
PolygonOverlap polygon_overlap_raster(const Polygon& a, const Polygon& b, int resolution = 1024);

}  // namespace kalos
