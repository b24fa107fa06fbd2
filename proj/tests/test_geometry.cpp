#include <catch_amalgamated.hpp>

#include <cmath>

#include "kalos/geometry.hpp"
#include "kalos/random.hpp"

using namespace kalos;
using Catch::Approx;

namespace {

Box2D random_box(Rng& rng) {
  const double w = rng.uniform(0.01, 0.5), h = rng.uniform(0.01, 0.5);
  return {rng.uniform(0, 1 - w), rng.uniform(0, 1 - h), w, h};
}

Polygon random_convex(Rng& rng) {
  const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8), r = rng.uniform(0.05, 0.2);
  const int n = 3 + static_cast<int>(rng.index(6));
  Polygon p;
  for (int i = 0; i < n; ++i) {
    const double t = 2 * M_PI * (i + rng.uniform(0, 0.5)) / n;
    p.vertices.push_back({cx + r * std::cos(t), cy + r * std::sin(t)});
  }
  return p;
}

VoxelBox random_voxel(Rng& rng) {
  const Box2D b = random_box(rng);
  const double d = rng.uniform(0.01, 0.5);
  return {b.x, b.y, rng.uniform(0, 1 - d), b.w, b.h, d};
}

KeypointSet random_pose(Rng& rng) {
  KeypointSet k;
  for (int i = 0; i < 5; ++i) k.points.push_back({rng.uniform(), rng.uniform(), rng.bernoulli(0.8) ? 1 : 0});
  k.points[rng.index(5)].visible = 1;  // valid sets have a visible joint
  return k;
}

Geometry random_geometry(Rng& rng, DistanceMetric m) {
  switch (m) {
    case DistanceMetric::BoxIou:
      return random_box(rng);
    case DistanceMetric::PolygonIou:
    case DistanceMetric::MaskGiou:
      return random_convex(rng);
    case DistanceMetric::VoxelIou:
      return random_voxel(rng);
    case DistanceMetric::PoseNmpjpe:
      return random_pose(rng);
    case DistanceMetric::L2Centroid:
      return random_box(rng);
  }
  return random_box(rng);
}

}  // namespace

TEST_CASE("box IoU distance on a half-overlapping pair", "[geometry]") {
  // Intersection 0.1*0.2 = 0.02, union 0.06, IoU 1/3.
  const Geometry a = Box2D{0, 0, 0.2, 0.2}, b = Box2D{0.1, 0, 0.2, 0.2};
  CHECK(distance(a, b, DistanceMetric::BoxIou) == Approx(2.0 / 3.0));
  CHECK(similarity(a, b, DistanceMetric::BoxIou) == Approx(1.0 / 3.0));
}

TEST_CASE("disjoint boxes are at distance one", "[geometry]") {
  const Geometry a = Box2D{0, 0, 0.1, 0.1}, b = Box2D{0.5, 0.5, 0.1, 0.1};
  CHECK(distance(a, b, DistanceMetric::BoxIou) == 1.0);
}

TEST_CASE("pose distance with disputed visibility", "[geometry]") {
  // Joint 0 identical, joint 1 visible for one rater only: mean(0, 1) = 0.5.
  const Geometry a = KeypointSet{{{0.5, 0.5, 1}, {0.2, 0.2, 1}}};
  const Geometry b = KeypointSet{{{0.5, 0.5, 1}, {0.2, 0.2, 0}}};
  CHECK(distance(a, b, DistanceMetric::PoseNmpjpe) == Approx(0.5));
}

TEST_CASE("polygon centroid is area-weighted", "[geometry]") {
  const Centroid c = centroid(Geometry{Polygon{{{0, 0}, {0.6, 0}, {0, 0.6}}}});
  CHECK(c.x == Approx(0.2));
  CHECK(c.y == Approx(0.2));
}

TEST_CASE("L2 centroid distance reaches one across the diagonal", "[geometry]") {
  // Centers at (0.05,0.05) and (0.95,0.95): distance sqrt(2)*0.9 / sqrt(2) = 0.9.
  const Geometry a = Box2D{0, 0, 0.1, 0.1}, b = Box2D{0.9, 0.9, 0.1, 0.1};
  CHECK(distance(a, b, DistanceMetric::L2Centroid) == Approx(0.9));
  const Geometry p = KeypointSet{{{0, 0, 1}}}, q = KeypointSet{{{1, 1, 1}}};
  CHECK(distance(p, q, DistanceMetric::L2Centroid) == Approx(1.0));
}

TEST_CASE("GIoU of identical masks is zero distance", "[geometry]") {
  const Geometry p = Polygon{{{0.1, 0.1}, {0.4, 0.1}, {0.3, 0.5}}};
  CHECK(distance(p, p, DistanceMetric::MaskGiou) == 0.0);
  const Geometry far = Polygon{{{0.8, 0.8}, {0.9, 0.8}, {0.9, 0.9}}};
  const double d = distance(p, far, DistanceMetric::MaskGiou);
  CHECK(d > 0.5);
  CHECK(d <= 1.0);
}

TEST_CASE("incompatible geometry is rejected", "[geometry]") {
  const Geometry box = Box2D{0, 0, 0.1, 0.1};
  const Geometry pose = KeypointSet{{{0, 0, 1}}};
  CHECK_THROWS_AS(distance(box, pose, DistanceMetric::BoxIou), IncompatibleGeometry);
  CHECK_THROWS_AS(distance(box, box, DistanceMetric::VoxelIou), IncompatibleGeometry);
  CHECK(metric_accepts(DistanceMetric::PolygonIou, GeometryKind::Box2D));
  CHECK_FALSE(metric_accepts(DistanceMetric::PoseNmpjpe, GeometryKind::Box2D));
}

TEST_CASE("metric names round-trip", "[geometry]") {
  for (DistanceMetric m : all_metrics()) CHECK(parse_metric(metric_name(m)) == m);
  CHECK_FALSE(parse_metric("chebyshev").has_value());
}

TEST_CASE("distance is symmetric, bounded and zero on identity", "[geometry][property]") {
  Rng rng(2024);
  for (DistanceMetric m : all_metrics()) {
    const int pairs = 10000;
    for (int i = 0; i < pairs; ++i) {
      const Geometry a = random_geometry(rng, m), b = random_geometry(rng, m);
      const double ab = distance(a, b, m), ba = distance(b, a, m);
      REQUIRE(ab == ba);
      REQUIRE(ab >= 0.0);
      REQUIRE(ab <= 1.0);
      REQUIRE(distance(a, a, m) == 0.0);
    }
  }
}

TEST_CASE("polygon IoU agrees with box IoU on rectangles", "[geometry][property]") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const Box2D a = random_box(rng), b = random_box(rng);
    const double poly = distance(box_to_polygon(a), box_to_polygon(b), DistanceMetric::PolygonIou);
    REQUIRE(std::abs(poly - distance(a, b, DistanceMetric::BoxIou)) < 1e-9);
  }
}

TEST_CASE("raster fallback approximates the exact overlap", "[geometry]") {
  const Polygon a = box_to_polygon({0.1, 0.1, 0.4, 0.4}), b = box_to_polygon({0.3, 0.3, 0.4, 0.4});
  const PolygonOverlap exact = polygon_overlap(a, b);
  const PolygonOverlap raster = polygon_overlap_raster(a, b);
  CHECK_FALSE(exact.rasterized);
  CHECK(exact.intersection == Approx(0.04));
  CHECK(raster.intersection == Approx(exact.intersection).epsilon(0.01));
  CHECK(raster.union_area == Approx(exact.union_area).epsilon(0.01));
}

TEST_CASE("voxel IoU", "[geometry]") {
  const VoxelBox a{0, 0, 0, 0.2, 0.2, 0.2}, b{0.1, 0, 0, 0.2, 0.2, 0.2};
  CHECK(voxel_iou(a, b) == Approx(1.0 / 3.0));
}
