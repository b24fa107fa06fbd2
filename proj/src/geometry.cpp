#include "kalos/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <boost/geometry.hpp>
#include <boost/geometry/geometries/multi_point.hpp>
#include <boost/geometry/geometries/point_xy.hpp>
#include <boost/geometry/geometries/polygon.hpp>

namespace kalos {

namespace bg = boost::geometry;

namespace {

using BPoint = bg::model::d2::point_xy<double>;
using BPolygon = bg::model::polygon<BPoint>;
using BMultiPolygon = bg::model::multi_polygon<BPolygon>;
using BMultiPoint = bg::model::multi_point<BPoint>;

BPolygon to_boost(const Polygon& p) {
  BPolygon out;
  for (const auto& v : p.vertices) bg::append(out.outer(), BPoint(v.x, v.y));
  bg::correct(out);
  return out;
}

double hull_area(const Polygon& a, const Polygon& b) {
  BMultiPoint pts;
  for (const auto& v : a.vertices) bg::append(pts, BPoint(v.x, v.y));
  for (const auto& v : b.vertices) bg::append(pts, BPoint(v.x, v.y));
  BPolygon hull;
  bg::convex_hull(pts, hull);
  return std::fabs(bg::area(hull));
}

bool vertex_less(const Polygon& a, const Polygon& b) {
  return std::lexicographical_compare(a.vertices.begin(), a.vertices.end(), b.vertices.begin(), b.vertices.end(),
                                      [](const Point2& p, const Point2& q) {
                                        return p.x < q.x || (p.x == q.x && p.y < q.y);
                                      });
}

bool inside_even_odd(const std::vector<Point2>& v, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
    const bool crosses = (v[i].y > y) != (v[j].y > y);
    if (crosses && x < (v[j].x - v[i].x) * (y - v[i].y) / (v[j].y - v[i].y) + v[i].x) in = !in;
  }
  return in;
}

double clamp01(double d) {
  if (!(d >= 0.0)) return d != d ? 1.0 : 0.0;
  return d > 1.0 ? 1.0 : d;
}

// Axis-aligned rectangle given as four vertices in either winding.
std::optional<Box2D> as_rectangle(const Polygon& p) {
  if (p.vertices.size() != 4) return std::nullopt;
  const auto& v = p.vertices;
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2& a = v[i];
    const Point2& b = v[(i + 1) % 4];
    if (a.x != b.x && a.y != b.y) return std::nullopt;
  }
  double x0 = v[0].x, x1 = v[0].x, y0 = v[0].y, y1 = v[0].y;
  for (const auto& q : v) x0 = std::min(x0, q.x), x1 = std::max(x1, q.x), y0 = std::min(y0, q.y), y1 = std::max(y1, q.y);
  if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
  return Box2D{x0, y0, x1 - x0, y1 - y0};
}

double pose_distance(const KeypointSet& a, const KeypointSet& b) {
  if (a.points.size() != b.points.size())
    throw IncompatibleGeometry("pose_nmpjpe: keypoint sets have different skeleton lengths");
  double total = 0.0;
  std::size_t joints = 0;
  for (std::size_t j = 0; j < a.points.size(); ++j) {
    const bool va = a.points[j].visible == 1;
    const bool vb = b.points[j].visible == 1;
    if (!va && !vb) continue;
    ++joints;
    if (va && vb) {
      const double dx = a.points[j].x - b.points[j].x;
      const double dy = a.points[j].y - b.points[j].y;
      total += std::min(1.0, std::sqrt(dx * dx + dy * dy) / std::numbers::sqrt2);
    } else {
      total += 1.0;
    }
  }
  if (joints == 0) return 1.0;
  return clamp01(total / static_cast<double>(joints));
}

Polygon as_polygon(const Geometry& g) {
  if (const auto* b = std::get_if<Box2D>(&g)) return box_to_polygon(*b);
  return std::get<Polygon>(g);
}

}  // namespace

std::string_view metric_name(DistanceMetric m) {
  switch (m) {
    case DistanceMetric::BoxIou: return "box_iou";
    case DistanceMetric::PolygonIou: return "polygon_iou";
    case DistanceMetric::MaskGiou: return "mask_giou";
    case DistanceMetric::L2Centroid: return "l2_centroid";
    case DistanceMetric::VoxelIou: return "voxel_iou";
    case DistanceMetric::PoseNmpjpe: return "pose_nmpjpe";
  }
  return "unknown";
}

std::optional<DistanceMetric> parse_metric(std::string_view name) {
  for (auto m : all_metrics())
    if (metric_name(m) == name) return m;
  return std::nullopt;
}

const std::vector<DistanceMetric>& all_metrics() {
  static const std::vector<DistanceMetric> metrics{DistanceMetric::BoxIou,     DistanceMetric::PolygonIou,
                                                   DistanceMetric::MaskGiou,   DistanceMetric::L2Centroid,
                                                   DistanceMetric::VoxelIou,   DistanceMetric::PoseNmpjpe};
  return metrics;
}

bool metric_accepts(DistanceMetric m, GeometryKind k) {
  switch (m) {
    case DistanceMetric::BoxIou: return k == GeometryKind::Box2D;
    case DistanceMetric::PolygonIou:
    case DistanceMetric::MaskGiou: return k == GeometryKind::Box2D || k == GeometryKind::Polygon;
    case DistanceMetric::L2Centroid: return true;
    case DistanceMetric::VoxelIou: return k == GeometryKind::VoxelBox;
    case DistanceMetric::PoseNmpjpe: return k == GeometryKind::Keypoints;
  }
  return false;
}

double box_iou(const Box2D& a, const Box2D& b) {
  if (a == b) return a.w > 0.0 && a.h > 0.0 ? 1.0 : 0.0;
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? std::min(1.0, inter / uni) : 0.0;
}

double voxel_iou(const VoxelBox& a, const VoxelBox& b) {
  if (a == b) return a.w > 0.0 && a.h > 0.0 && a.d > 0.0 ? 1.0 : 0.0;
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  const double id = std::min(a.z + a.d, b.z + b.d) - std::max(a.z, b.z);
  if (iw <= 0.0 || ih <= 0.0 || id <= 0.0) return 0.0;
  const double inter = iw * ih * id;
  const double uni = a.w * a.h * a.d + b.w * b.h * b.d - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double polygon_area(const Polygon& p) { return relative_area(Geometry{p}); }

Polygon box_to_polygon(const Box2D& b) {
  return Polygon{{{b.x, b.y}, {b.x + b.w, b.y}, {b.x + b.w, b.y + b.h}, {b.x, b.y + b.h}}};
}

PolygonOverlap polygon_overlap_raster(const Polygon& a, const Polygon& b, int resolution) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto* p : {&a, &b})
    for (const auto& v : p->vertices) {
      x0 = std::min(x0, v.x), x1 = std::max(x1, v.x);
      y0 = std::min(y0, v.y), y1 = std::max(y1, v.y);
    }
  PolygonOverlap out;
  out.rasterized = true;
  if (!(x1 > x0) || !(y1 > y0)) return out;
  const double cw = (x1 - x0) / resolution;
  const double ch = (y1 - y0) / resolution;
  std::size_t in_a = 0, in_b = 0, in_both = 0;
  for (int iy = 0; iy < resolution; ++iy) {
    const double y = y0 + (iy + 0.5) * ch;
    for (int ix = 0; ix < resolution; ++ix) {
      const double x = x0 + (ix + 0.5) * cw;
      const bool pa = inside_even_odd(a.vertices, x, y);
      const bool pb = inside_even_odd(b.vertices, x, y);
      in_a += pa;
      in_b += pb;
      in_both += pa && pb;
    }
  }
  const double cell = cw * ch;
  out.intersection = in_both * cell;
  out.union_area = (in_a + in_b - in_both) * cell;
  out.hull = hull_area(a, b);
  return out;
}

PolygonOverlap polygon_overlap(const Polygon& a, const Polygon& b) {
  if (a.vertices.size() < 3 || b.vertices.size() < 3) return {};
  if (auto ra = as_rectangle(a), rb = as_rectangle(b); ra && rb) {
    PolygonOverlap out;
    const double iw = std::min(ra->x + ra->w, rb->x + rb->w) - std::max(ra->x, rb->x);
    const double ih = std::min(ra->y + ra->h, rb->y + rb->h) - std::max(ra->y, rb->y);
    out.intersection = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
    out.union_area = ra->w * ra->h + rb->w * rb->h - out.intersection;
    out.hull = hull_area(a, b);
    return out;
  }
  const BPolygon pa = to_boost(a);
  const BPolygon pb = to_boost(b);
  if (!bg::is_valid(pa) || !bg::is_valid(pb)) return polygon_overlap_raster(a, b);
  try {
    BMultiPolygon inter;
    bg::intersection(pa, pb, inter);
    PolygonOverlap out;
    out.intersection = std::fabs(bg::area(inter));
    out.union_area = std::fabs(bg::area(pa)) + std::fabs(bg::area(pb)) - out.intersection;
    out.hull = hull_area(a, b);
    return out;
  } catch (const bg::exception&) {
    return polygon_overlap_raster(a, b);
  }
}

double distance(const Geometry& a, const Geometry& b, DistanceMetric m) {
  const GeometryKind ka = kind_of(a);
  const GeometryKind kb = kind_of(b);
  if (!metric_accepts(m, ka) || !metric_accepts(m, kb))
    throw IncompatibleGeometry(std::string(metric_name(m)) + ": incompatible geometry (" +
                               std::string(geometry_type_name(ka)) + ", " + std::string(geometry_type_name(kb)) +
                               ")");
  switch (m) {
    case DistanceMetric::BoxIou: {
      const auto& ba = std::get<Box2D>(a);
      const auto& bb = std::get<Box2D>(b);
      if (ba == bb) return ba.w * ba.h > 0.0 ? 0.0 : 1.0;
      return clamp01(1.0 - box_iou(ba, bb));
    }
    case DistanceMetric::VoxelIou: {
      const auto& va = std::get<VoxelBox>(a);
      const auto& vb = std::get<VoxelBox>(b);
      if (va == vb) return va.w * va.h * va.d > 0.0 ? 0.0 : 1.0;
      return clamp01(1.0 - voxel_iou(va, vb));
    }
    case DistanceMetric::PolygonIou:
    case DistanceMetric::MaskGiou: {
      Polygon pa = as_polygon(a);
      Polygon pb = as_polygon(b);
      // Fixed argument order keeps the clipper's rounding symmetric.
      if (vertex_less(pb, pa)) std::swap(pa, pb);
      if (pa == pb) return polygon_area(pa) > 0.0 ? 0.0 : 1.0;
      const PolygonOverlap ov = polygon_overlap(pa, pb);
      if (!(ov.union_area > 0.0)) return 1.0;
      const double iou = std::clamp(ov.intersection / ov.union_area, 0.0, 1.0);
      if (m == DistanceMetric::PolygonIou) return clamp01(1.0 - iou);
      if (!(ov.hull > 0.0)) return 1.0;
      const double hull = std::max(ov.hull, ov.union_area);
      const double giou = iou - (hull - ov.union_area) / hull;
      return clamp01(1.0 - (1.0 + giou) / 2.0);
    }
    case DistanceMetric::L2Centroid: {
      const Centroid ca = centroid(a);
      const Centroid cb = centroid(b);
      const double dx = ca.x - cb.x;
      const double dy = ca.y - cb.y;
      if (ca.z && cb.z) {
        const double dz = *ca.z - *cb.z;
        return clamp01(std::sqrt(dx * dx + dy * dy + dz * dz) / std::sqrt(3.0));
      }
      return clamp01(std::sqrt(dx * dx + dy * dy) / std::numbers::sqrt2);
    }
    case DistanceMetric::PoseNmpjpe: return pose_distance(std::get<KeypointSet>(a), std::get<KeypointSet>(b));
  }
  return 1.0;
}

Centroid centroid(const Geometry& g) {
  if (const auto* b = std::get_if<Box2D>(&g)) return {b->x + b->w / 2.0, b->y + b->h / 2.0, std::nullopt};
  if (const auto* v = std::get_if<VoxelBox>(&g)) return {v->x + v->w / 2.0, v->y + v->h / 2.0, v->z + v->d / 2.0};
  if (const auto* k = std::get_if<KeypointSet>(&g)) {
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
    for (const auto& p : k->points)
      if (p.visible == 1) sx += p.x, sy += p.y, ++n;
    if (n == 0) return {};
    return {sx / n, sy / n, std::nullopt};
  }
  const auto& verts = std::get<Polygon>(g).vertices;
  if (verts.empty()) return {};
  double a2 = 0.0, cx = 0.0, cy = 0.0;
  for (std::size_t i = 0, n = verts.size(); i < n; ++i) {
    const Point2& p = verts[i];
    const Point2& q = verts[(i + 1) % n];
    const double cross = p.x * q.y - q.x * p.y;
    a2 += cross;
    cx += (p.x + q.x) * cross;
    cy += (p.y + q.y) * cross;
  }
  if (std::fabs(a2) < 1e-300) {
    double sx = 0.0, sy = 0.0;
    for (const auto& p : verts) sx += p.x, sy += p.y;
    return {sx / verts.size(), sy / verts.size(), std::nullopt};
  }
  return {cx / (3.0 * a2), cy / (3.0 * a2), std::nullopt};
}

}  // namespace kalos
