#include "kalos/dataset_io.hpp"

#include <fstream>

namespace kalos {

using nlohmann::json;

namespace {

struct Scale {
  double w = 1.0, h = 1.0, d = 1.0;
};

std::string record_label(const json& rec, const char* section, std::size_t i) {
  if (rec.is_object() && rec.contains("id") && rec["id"].is_string()) return rec["id"].get<std::string>();
  return std::string(section) + "[" + std::to_string(i) + "]";
}

const json& require(const json& rec, const char* field, const std::string& label) {
  if (!rec.is_object()) throw DatasetError(label, "record must be an object");
  auto it = rec.find(field);
  if (it == rec.end()) throw DatasetError(label, std::string("missing field '") + field + "'");
  return *it;
}

std::string require_string(const json& rec, const char* field, const std::string& label) {
  const json& v = require(rec, field, label);
  if (!v.is_string()) throw DatasetError(label, std::string("field '") + field + "' must be a string");
  return v.get<std::string>();
}

int require_int(const json& rec, const char* field, const std::string& label) {
  const json& v = require(rec, field, label);
  if (!v.is_number_integer()) throw DatasetError(label, std::string("field '") + field + "' must be an integer");
  return v.get<int>();
}

const json& require_array(const json& doc, const char* field) {
  auto it = doc.find(field);
  if (it == doc.end()) throw DatasetError("", std::string("missing top-level array '") + field + "'");
  if (!it->is_array()) throw DatasetError("", std::string("top-level '") + field + "' must be an array");
  return *it;
}

double number(const json& v, const std::string& label) {
  if (!v.is_number()) throw DatasetError(label, "geometry coordinate must be a number");
  return v.get<double>();
}

std::vector<double> number_list(const json& v, std::size_t n, const std::string& label) {
  if (!v.is_array() || v.size() != n)
    throw DatasetError(label, "geometry payload must be an array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (const auto& x : v) out.push_back(number(x, label));
  return out;
}

Geometry parse_geometry(const json& g, const Scale& s, const std::string& label) {
  const std::string type = require_string(g, "type", label);
  auto kind = parse_geometry_type(type);
  if (!kind) throw DatasetError(label, "unknown geometry type '" + type + "'");
  // Payload key: accept "coordinates" or the type name itself.
  const json* payload = nullptr;
  for (const char* key : {"coordinates", "bbox", "polygon", "voxel_box", "keypoints", "points"}) {
    auto it = g.find(key);
    if (it != g.end() && it->is_array()) {
      payload = &*it;
      break;
    }
  }
  if (!payload) throw DatasetError(label, "geometry has no coordinate payload");
  switch (*kind) {
    case GeometryKind::Box2D: {
      auto v = number_list(*payload, 4, label);
      return Box2D{v[0] / s.w, v[1] / s.h, v[2] / s.w, v[3] / s.h};
    }
    case GeometryKind::Polygon: {
      Polygon p;
      for (const auto& pt : *payload) {
        auto v = number_list(pt, 2, label);
        p.vertices.push_back({v[0] / s.w, v[1] / s.h});
      }
      return p;
    }
    case GeometryKind::VoxelBox: {
      auto v = number_list(*payload, 6, label);
      return VoxelBox{v[0] / s.w, v[1] / s.h, v[2] / s.d, v[3] / s.w, v[4] / s.h, v[5] / s.d};
    }
    case GeometryKind::Keypoints: {
      KeypointSet k;
      for (const auto& pt : *payload) {
        auto v = number_list(pt, 3, label);
        if (v[2] != 0.0 && v[2] != 1.0) throw DatasetError(label, "keypoint visibility must be 0 or 1");
        k.points.push_back({v[0] / s.w, v[1] / s.h, static_cast<int>(v[2])});
      }
      return k;
    }
  }
  throw DatasetError(label, "unreachable geometry type");
}

}  // namespace

Dataset dataset_from_json(const json& doc) {
  if (!doc.is_object()) throw DatasetError("", "dataset document must be a JSON object");
  if (auto it = doc.find("format_version"); it != doc.end() && !(it->is_string() && *it == "1"))
    throw DatasetError("", "unsupported format_version");
  bool absolute = false;
  if (auto it = doc.find("coordinate_mode"); it != doc.end()) {
    if (!it->is_string()) throw DatasetError("", "coordinate_mode must be a string");
    if (*it == "absolute")
      absolute = true;
    else if (*it != "relative")
      throw DatasetError("", "coordinate_mode must be 'relative' or 'absolute'");
  }

  Dataset d;
  const json& images = require_array(doc, "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string label = record_label(images[i], "images", i);
    ImageRecord im;
    im.id = require_string(images[i], "id", label);
    im.width = require_int(images[i], "width", label);
    im.height = require_int(images[i], "height", label);
    if (images[i].contains("depth") && !images[i]["depth"].is_null()) im.depth = require_int(images[i], "depth", label);
    if (images[i].contains("tag") && !images[i]["tag"].is_null()) im.tag = require_string(images[i], "tag", label);
    d.images.push_back(std::move(im));
  }
  const json& raters = require_array(doc, "raters");
  for (std::size_t i = 0; i < raters.size(); ++i) {
    const std::string label = record_label(raters[i], "raters", i);
    RaterRecord r;
    r.id = require_string(raters[i], "id", label);
    if (raters[i].contains("name") && !raters[i]["name"].is_null()) r.name = require_string(raters[i], "name", label);
    d.raters.push_back(std::move(r));
  }
  const json& categories = require_array(doc, "categories");
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const std::string label = record_label(categories[i], "categories", i);
    d.categories.push_back({require_string(categories[i], "id", label), require_string(categories[i], "name", label)});
  }
  const json& assignments = require_array(doc, "assignments");
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const std::string label = "assignments[" + std::to_string(i) + "]";
    Assignment a;
    a.image_id = require_string(assignments[i], "image_id", label);
    a.rater_id = require_string(assignments[i], "rater_id", label);
    if (assignments[i].contains("categories") && !assignments[i]["categories"].is_null()) {
      const json& cats = assignments[i]["categories"];
      if (!cats.is_array()) throw DatasetError(label, "categories must be an array of strings");
      std::vector<std::string> list;
      for (const auto& c : cats) {
        if (!c.is_string()) throw DatasetError(label, "categories must be an array of strings");
        list.push_back(c.get<std::string>());
      }
      a.categories = std::move(list);
    }
    d.assignments.push_back(std::move(a));
  }

  std::unordered_map<std::string, Scale> scales;
  for (const auto& im : d.images) {
    if (absolute) {
      if (im.width <= 0 || im.height <= 0) throw DatasetError(im.id, "image dimensions must be positive");
      scales[im.id] = {double(im.width), double(im.height), double(im.depth.value_or(1))};
    } else {
      scales[im.id] = {};
    }
  }
  const json& annotations = require_array(doc, "annotations");
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const std::string label = record_label(annotations[i], "annotations", i);
    Annotation a;
    a.id = require_string(annotations[i], "id", label);
    a.image_id = require_string(annotations[i], "image_id", label);
    a.rater_id = require_string(annotations[i], "rater_id", label);
    a.category_id = require_string(annotations[i], "category_id", label);
    auto sc = scales.find(a.image_id);
    if (sc == scales.end()) throw DatasetError(label, "annotation references unknown image '" + a.image_id + "'");
    a.geometry = parse_geometry(require(annotations[i], "geometry", label), sc->second, label);
    d.annotations.push_back(std::move(a));
  }

  const ValidationReport report = validate_dataset(d);
  if (!report.ok()) {
    const Violation& v = report.violations.front();
    throw DatasetError(v.record_id, v.check + ": " + v.message);
  }
  return d;
}

Dataset parse_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("", "cannot open dataset file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DatasetError("", std::string("malformed JSON: ") + e.what());
  }
  return dataset_from_json(doc);
}

json geometry_to_json(const Geometry& g) {
  json out;
  out["type"] = std::string(geometry_type_name(kind_of(g)));
  json coords = json::array();
  if (const auto* b = std::get_if<Box2D>(&g)) {
    coords = {b->x, b->y, b->w, b->h};
  } else if (const auto* p = std::get_if<Polygon>(&g)) {
    for (const auto& v : p->vertices) coords.push_back({v.x, v.y});
  } else if (const auto* v = std::get_if<VoxelBox>(&g)) {
    coords = {v->x, v->y, v->z, v->w, v->h, v->d};
  } else if (const auto* k = std::get_if<KeypointSet>(&g)) {
    for (const auto& pt : k->points) coords.push_back({pt.x, pt.y, pt.visible});
  }
  out["coordinates"] = std::move(coords);
  return out;
}

json dataset_to_json(const Dataset& d) {
  json doc;
  doc["format_version"] = "1";
  doc["coordinate_mode"] = "relative";
  json images = json::array();
  for (const auto& im : d.images) {
    json j{{"id", im.id}, {"width", im.width}, {"height", im.height}};
    if (im.depth) j["depth"] = *im.depth;
    if (im.tag) j["tag"] = *im.tag;
    images.push_back(std::move(j));
  }
  json raters = json::array();
  for (const auto& r : d.raters) {
    json j{{"id", r.id}};
    if (r.name) j["name"] = *r.name;
    raters.push_back(std::move(j));
  }
  json assignments = json::array();
  for (const auto& a : d.assignments) {
    json j{{"image_id", a.image_id}, {"rater_id", a.rater_id}};
    if (a.categories) j["categories"] = *a.categories;
    assignments.push_back(std::move(j));
  }
  json categories = json::array();
  for (const auto& c : d.categories) categories.push_back({{"id", c.id}, {"name", c.name}});
  json annotations = json::array();
  for (const auto& a : d.annotations)
    annotations.push_back({{"id", a.id},
                           {"image_id", a.image_id},
                           {"rater_id", a.rater_id},
                           {"category_id", a.category_id},
                           {"geometry", geometry_to_json(a.geometry)}});
  doc["images"] = std::move(images);
  doc["raters"] = std::move(raters);
  doc["assignments"] = std::move(assignments);
  doc["categories"] = std::move(categories);
  doc["annotations"] = std::move(annotations);
  return doc;
}

}  // namespace kalos
