#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kalos/dataset.hpp"
#include "kalos/geometry.hpp"
#include "kalos/random.hpp"

namespace kalos::testing {

// Fluent builder for small hand-made datasets. Ids are taken verbatim.
class DatasetBuilder {
public:
  DatasetBuilder& image(const std::string& id, int w = 100, int h = 100) {
    d_.images.push_back({id, w, h, std::nullopt, std::nullopt});
    return *this;
  }
  DatasetBuilder& rater(const std::string& id) {
    d_.raters.push_back({id, std::nullopt});
    return *this;
  }
  DatasetBuilder& category(const std::string& id) {
    d_.categories.push_back({id, id});
    return *this;
  }
  DatasetBuilder& assign(const std::string& image, const std::string& rater,
                         std::optional<std::vector<std::string>> cats = std::nullopt) {
    d_.assignments.push_back({image, rater, std::move(cats)});
    return *this;
  }
  /// Assigns every rater to every image.
  DatasetBuilder& assign_all() {
    for (const auto& im : d_.images)
      for (const auto& r : d_.raters) d_.assignments.push_back({im.id, r.id, std::nullopt});
    return *this;
  }
  DatasetBuilder& box(const std::string& id, const std::string& image, const std::string& rater,
                      const std::string& cat, double x, double y, double w, double h) {
    d_.annotations.push_back({id, image, rater, cat, Box2D{x, y, w, h}});
    return *this;
  }
  DatasetBuilder& add(Annotation a) {
    d_.annotations.push_back(std::move(a));
    return *this;
  }
  Dataset build() const { return d_; }

private:
  Dataset d_;
};

/// Single-rater reference of non-overlapping boxes with log-uniform areas in
/// [0.002, 0.08] and categories drawn from `categories` ("c0", "c1", ...).
inline Dataset synthetic_reference(std::uint64_t seed, int images, int per_image, int categories,
                                   const std::string& rater = "ref") {
  Rng rng(seed);
  DatasetBuilder b;
  b.rater(rater);
  for (int c = 0; c < categories; ++c) b.category("c" + std::to_string(c));
  for (int i = 0; i < images; ++i) {
    const std::string im = "img" + std::to_string(i);
    b.image(im, 640, 480).assign(im, rater);
    std::vector<Box2D> placed;
    for (int k = 0, tries = 0; k < per_image && tries < 200; ++tries) {
      const double a = std::exp(rng.uniform(std::log(0.002), std::log(0.08)));
      const double aspect = std::exp(rng.uniform(-0.5, 0.5));
      const double w = std::sqrt(a * aspect), h = std::sqrt(a / aspect);
      const Box2D box{rng.uniform(0.02, 0.98 - w), rng.uniform(0.02, 0.98 - h), w, h};
      bool clear = true;
      for (const auto& p : placed)
        if (box_iou(p, box) > 0.0) clear = false;
      if (!clear) continue;
      placed.push_back(box);
      b.box(im + "_" + std::to_string(k), im, rater, "c" + std::to_string(rng.index(categories)), box.x, box.y, box.w,
            box.h);
      ++k;
    }
  }
  return b.build();
}

}  // namespace kalos::testing
