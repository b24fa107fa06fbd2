#include "kalos/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_set>

namespace kalos {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

bool all_finite(std::initializer_list<double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

double shoelace(const std::vector<Point2>& v) {
  double s = 0.0;
  for (std::size_t i = 0, n = v.size(); i < n; ++i) {
    const Point2& a = v[i];
    const Point2& b = v[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

}  // namespace

GeometryKind kind_of(const Geometry& g) { return static_cast<GeometryKind>(g.index()); }

std::string_view geometry_type_name(GeometryKind k) {
  switch (k) {
    case GeometryKind::Box2D: return "bbox";
    case GeometryKind::Polygon: return "polygon";
    case GeometryKind::VoxelBox: return "voxel_box";
    case GeometryKind::Keypoints: return "keypoints";
  }
  return "unknown";
}

std::optional<GeometryKind> parse_geometry_type(std::string_view name) {
  if (name == "bbox") return GeometryKind::Box2D;
  if (name == "polygon") return GeometryKind::Polygon;
  if (name == "voxel_box") return GeometryKind::VoxelBox;
  if (name == "keypoints") return GeometryKind::Keypoints;
  return std::nullopt;
}

std::string canonical_string(const Geometry& g) {
  std::string out(geometry_type_name(kind_of(g)));
  out += ':';
  std::visit(overloaded{
                 [&](const Box2D& b) {
                   for (double v : {b.x, b.y, b.w, b.h}) append_number(out, v), out += ',';
                 },
                 [&](const Polygon& p) {
                   for (const auto& pt : p.vertices) {
                     append_number(out, pt.x);
                     out += ',';
                     append_number(out, pt.y);
                     out += ';';
                   }
                 },
                 [&](const VoxelBox& b) {
                   for (double v : {b.x, b.y, b.z, b.w, b.h, b.d}) append_number(out, v), out += ',';
                 },
                 [&](const KeypointSet& k) {
                   for (const auto& pt : k.points) {
                     append_number(out, pt.x);
                     out += ',';
                     append_number(out, pt.y);
                     out += ',';
                     out += std::to_string(pt.visible);
                     out += ';';
                   }
                 },
             },
             g);
  return out;
}

std::string geometry_problem(const Geometry& g) {
  return std::visit(
      overloaded{
          [](const Box2D& b) -> std::string {
            if (!all_finite({b.x, b.y, b.w, b.h})) return "non-finite box coordinate";
            if (!(b.w > 0.0) || !(b.h > 0.0)) return "box has non-positive extent";
            if (b.x >= 1.0 || b.y >= 1.0 || b.x + b.w <= 0.0 || b.y + b.h <= 0.0)
              return "box lies outside the image";
            return {};
          },
          [](const Polygon& p) -> std::string {
            if (p.vertices.size() < 3) return "polygon needs at least 3 vertices";
            for (const auto& v : p.vertices)
              if (!all_finite({v.x, v.y})) return "non-finite polygon vertex";
            if (std::fabs(shoelace(p.vertices)) <= 0.0) return "polygon has zero area";
            return {};
          },
          [](const VoxelBox& b) -> std::string {
            if (!all_finite({b.x, b.y, b.z, b.w, b.h, b.d})) return "non-finite voxel box coordinate";
            if (!(b.w > 0.0) || !(b.h > 0.0) || !(b.d > 0.0)) return "voxel box has non-positive extent";
            if (b.x >= 1.0 || b.y >= 1.0 || b.z >= 1.0 || b.x + b.w <= 0.0 || b.y + b.h <= 0.0 ||
                b.z + b.d <= 0.0)
              return "voxel box lies outside the volume";
            return {};
          },
          [](const KeypointSet& k) -> std::string {
            if (k.points.empty()) return "empty keypoint set";
            bool any_visible = false;
            for (const auto& pt : k.points) {
              if (pt.visible != 0 && pt.visible != 1) return "keypoint visibility must be 0 or 1";
              if (!all_finite({pt.x, pt.y})) return "non-finite keypoint";
              any_visible = any_visible || pt.visible == 1;
            }
            if (!any_visible) return "keypoint set has no visible point";
            return {};
          },
      },
      g);
}

bool Assignment::covers(std::string_view category_id) const {
  if (!categories) return true;
  return std::find(categories->begin(), categories->end(), category_id) != categories->end();
}

// ---------------------------------------------------------------------------

DatasetIndex::DatasetIndex(const Dataset& d) : d_(&d) {
  for (std::size_t i = 0; i < d.images.size(); ++i) image_pos_.emplace(d.images[i].id, i);
  by_image_.resize(d.images.size());
  raters_by_image_.resize(d.images.size());
  for (std::size_t i = 0; i < d.annotations.size(); ++i) {
    auto it = image_pos_.find(d.annotations[i].image_id);
    if (it != image_pos_.end()) by_image_[it->second].push_back(i);
  }
  std::unordered_map<std::string, std::size_t> rater_pos;
  for (std::size_t i = 0; i < d.raters.size(); ++i) rater_pos.emplace(d.raters[i].id, i);
  std::vector<std::vector<std::pair<std::size_t, std::string>>> tmp(d.images.size());
  for (std::size_t i = 0; i < d.assignments.size(); ++i) {
    const auto& a = d.assignments[i];
    assignment_pos_.emplace(std::make_pair(a.image_id, a.rater_id), i);
    auto it = image_pos_.find(a.image_id);
    if (it == image_pos_.end()) continue;
    auto rp = rater_pos.find(a.rater_id);
    tmp[it->second].emplace_back(rp == rater_pos.end() ? d.raters.size() : rp->second, a.rater_id);
  }
  for (std::size_t i = 0; i < tmp.size(); ++i) {
    std::sort(tmp[i].begin(), tmp[i].end());
    tmp[i].erase(std::unique(tmp[i].begin(), tmp[i].end()), tmp[i].end());
    for (auto& [pos, id] : tmp[i]) raters_by_image_[i].push_back(id);
  }
}

const ImageRecord* DatasetIndex::image(std::string_view id) const {
  auto it = image_pos_.find(std::string(id));
  return it == image_pos_.end() ? nullptr : &d_->images[it->second];
}

const std::vector<std::size_t>& DatasetIndex::annotations_of(std::string_view image_id) const {
  auto it = image_pos_.find(std::string(image_id));
  return it == image_pos_.end() ? empty_ : by_image_[it->second];
}

const Assignment* DatasetIndex::assignment(std::string_view image_id, std::string_view rater_id) const {
  auto it = assignment_pos_.find({std::string(image_id), std::string(rater_id)});
  return it == assignment_pos_.end() ? nullptr : &d_->assignments[it->second];
}

const std::vector<std::string>& DatasetIndex::assigned_raters(std::string_view image_id) const {
  auto it = image_pos_.find(std::string(image_id));
  return it == image_pos_.end() ? empty_raters_ : raters_by_image_[it->second];
}

// ---------------------------------------------------------------------------

ValidationReport validate_dataset(const Dataset& d) {
  ValidationReport r;
  auto check = [&](const std::string& name, bool ok, const std::string& id, const std::string& msg) {
    ++r.checked[name];
    if (!ok) {
      ++r.failed[name];
      r.violations.push_back({name, id, msg});
    }
  };

  std::unordered_map<std::string, const ImageRecord*> images;
  for (const auto& im : d.images) {
    check("image_id_unique", images.emplace(im.id, &im).second, im.id, "duplicate image id");
    check("image_dimensions", im.width > 0 && im.height > 0 && (!im.depth || *im.depth > 0), im.id,
          "image dimensions must be positive");
  }
  std::unordered_set<std::string> raters;
  for (const auto& ra : d.raters) check("rater_id_unique", raters.insert(ra.id).second, ra.id, "duplicate rater id");
  std::unordered_set<std::string> categories;
  for (const auto& c : d.categories)
    check("category_id_unique", categories.insert(c.id).second, c.id, "duplicate category id");

  std::set<std::pair<std::string, std::string>> assigned;
  for (const auto& a : d.assignments) {
    const std::string id = a.image_id + "/" + a.rater_id;
    check("assignment_references", images.count(a.image_id) && raters.count(a.rater_id), id,
          "assignment references unknown image or rater");
    check("assignment_unique", assigned.emplace(a.image_id, a.rater_id).second, id, "duplicate assignment");
    if (a.categories) {
      bool ok = std::all_of(a.categories->begin(), a.categories->end(),
                            [&](const std::string& c) { return categories.count(c) > 0; });
      check("assignment_categories", ok, id, "assignment references unknown category");
    }
  }

  DatasetIndex index(d);
  std::unordered_set<std::string> annotation_ids;
  std::optional<GeometryKind> kind;
  std::optional<std::size_t> skeleton;
  for (const auto& an : d.annotations) {
    check("annotation_id_unique", annotation_ids.insert(an.id).second, an.id, "duplicate annotation id");
    const bool refs_ok =
        images.count(an.image_id) && raters.count(an.rater_id) && categories.count(an.category_id);
    check("annotation_references", refs_ok, an.id, "annotation references unknown image, rater or category");
    if (refs_ok) {
      const Assignment* asg = index.assignment(an.image_id, an.rater_id);
      check("annotation_assigned", asg != nullptr, an.id, "rater is not assigned to the image");
      if (asg) check("annotation_scope", asg->covers(an.category_id), an.id, "category outside rater scope");
    }
    const std::string problem = geometry_problem(an.geometry);
    check("geometry", problem.empty(), an.id, problem);
    const GeometryKind k = kind_of(an.geometry);
    if (!kind) kind = k;
    check("geometry_uniform", *kind == k, an.id, "mixed geometry variants in one dataset");
    if (const auto* kp = std::get_if<KeypointSet>(&an.geometry)) {
      if (!skeleton) skeleton = kp->points.size();
      check("keypoint_skeleton", *skeleton == kp->points.size(), an.id, "keypoint skeleton length differs");
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

std::string_view size_class_name(SizeClass s) {
  switch (s) {
    case SizeClass::Small: return "small";
    case SizeClass::Medium: return "medium";
    case SizeClass::Large: return "large";
  }
  return "unknown";
}

double relative_area(const Geometry& g) {
  return std::visit(overloaded{
                        [](const Box2D& b) { return b.w * b.h; },
                        [](const Polygon& p) { return std::fabs(shoelace(p.vertices)); },
                        [](const VoxelBox& b) { return b.w * b.h * b.d; },
                        [](const KeypointSet& k) {
                          double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
                          bool any = false;
                          for (const auto& p : k.points) {
                            if (p.visible != 1) continue;
                            any = true;
                            x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
                            y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
                          }
                          return any ? (x1 - x0) * (y1 - y0) : 0.0;
                        },
                    },
                    g);
}

double relative_area(const Annotation& a) { return relative_area(a.geometry); }

SizeClass size_class(double area) {
  if (area < kSmallAreaLimit) return SizeClass::Small;
  if (area < kMediumAreaLimit) return SizeClass::Medium;
  return SizeClass::Large;
}

SizeClass size_class(const Annotation& a) { return size_class(relative_area(a)); }

Dataset restrict_to_raters(const Dataset& d, const std::vector<std::string>& rater_ids) {
  const std::unordered_set<std::string> keep(rater_ids.begin(), rater_ids.end());
  Dataset out;
  out.images = d.images;
  out.categories = d.categories;
  for (const auto& r : d.raters)
    if (keep.count(r.id)) out.raters.push_back(r);
  for (const auto& a : d.assignments)
    if (keep.count(a.rater_id)) out.assignments.push_back(a);
  for (const auto& a : d.annotations)
    if (keep.count(a.rater_id)) out.annotations.push_back(a);
  return out;
}

Dataset restrict_to_images(const Dataset& d, const std::vector<std::string>& image_ids) {
  const std::unordered_set<std::string> keep(image_ids.begin(), image_ids.end());
  Dataset out;
  out.raters = d.raters;
  out.categories = d.categories;
  for (const auto& im : d.images)
    if (keep.count(im.id)) out.images.push_back(im);
  for (const auto& a : d.assignments)
    if (keep.count(a.image_id)) out.assignments.push_back(a);
  for (const auto& a : d.annotations)
    if (keep.count(a.image_id)) out.annotations.push_back(a);
  return out;
}

}  // namespace kalos
