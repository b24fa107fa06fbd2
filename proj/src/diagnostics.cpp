#include "kalos/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kalos/stats.hpp"

namespace kalos {

LsaCurve localization_sensitivity(const Dataset& d, const MatchConfig& c, const std::vector<double>& tau_s,
                                  std::optional<double> anchor, unsigned jobs) {
  if (tau_s.empty()) throw DiagnosticsError("localization sensitivity needs at least one threshold");
  for (std::size_t i = 0; i < tau_s.size(); ++i) {
    if (!(tau_s[i] > 0.0 && tau_s[i] <= 1.0)) throw DiagnosticsError("similarity thresholds must lie in (0, 1]");
    if (i > 0 && !(tau_s[i] > tau_s[i - 1])) throw DiagnosticsError("similarity thresholds must be strictly increasing");
  }
  LsaCurve curve;
  for (double s : tau_s) {
    MatchConfig cfg = c;
    // tau_s = 1 would mean tau = 0, which admits only exact duplicates.
    cfg.tau = std::max(1.0 - s, 1e-12);
    const auto r = run_pipeline(d, cfg, jobs);
    curve.points.push_back({s, r.mean.mean, r.global.value});
  }
  const double want = anchor.value_or(1.0 - c.tau);
  std::size_t a = 0;
  for (std::size_t i = 1; i < tau_s.size(); ++i)
    if (std::abs(tau_s[i] - want) < std::abs(tau_s[a] - want)) a = i;
  curve.anchor_tau_s = tau_s[a];
  const auto& lo = curve.points[a].mean_alpha;
  const auto& hi = curve.points.back().mean_alpha;
  if (lo && hi) curve.delta = *lo - *hi;
  return curve;
}

ClassScore class_difficulty(const std::vector<ReliabilityMatrix>& ms, const std::string& category) {
  ClassScore s;
  s.category = category;
  CoincidenceCounts counts;
  for (const auto& m : ms)
    for (std::size_t u = 0; u < m.units.size(); ++u) {
      if (m.consensus[u] != category) continue;
      ++s.support;
      std::vector<Value> vals;
      for (const auto& row : m.cells) {
        const Cell& cell = row[u];
        if (cell.kind == Cell::Kind::Missing) continue;
        if (cell.kind == Cell::Kind::Category && cell.category == category) vals.emplace_back(category);
        else vals.emplace_back(std::nullopt);
      }
      counts.add_column(vals);
    }
  if (s.support > 0) s.alpha = krippendorff_alpha(counts);
  return s;
}

std::vector<ClassScore> class_table(const std::vector<ReliabilityMatrix>& ms, const std::vector<std::string>& categories) {
  std::vector<ClassScore> out;
  for (const auto& c : categories) out.push_back(class_difficulty(ms, c));
  return out;
}

namespace {

bool leaves_two_raters(const Dataset& d, const std::string& rater) {
  const DatasetIndex idx(d);
  for (const auto& im : d.images) {
    const auto& rs = idx.assigned_raters(im.id);
    const auto others = std::count_if(rs.begin(), rs.end(), [&](const std::string& r) { return r != rater; });
    if (others >= 2) return true;
  }
  return false;
}

std::vector<std::string> other_raters(const Dataset& d, const std::string& rater) {
  std::vector<std::string> keep;
  for (const auto& r : d.raters)
    if (r.id != rater) keep.push_back(r.id);
  return keep;
}

}  // namespace

Vitality annotator_vitality(const Dataset& d, const MatchConfig& c, const std::string& rater, VitalityMode mode,
                            unsigned jobs) {
  if (std::none_of(d.raters.begin(), d.raters.end(), [&](const RaterRecord& r) { return r.id == rater; }))
    throw DiagnosticsError("unknown rater " + rater);
  if (!leaves_two_raters(d, rater)) throw DiagnosticsError("removing " + rater + " leaves fewer than two raters on every image");
  Vitality v;
  v.rater = rater;
  const auto full = run_pipeline(d, c, jobs);
  v.alpha_full = full.mean.mean;
  if (mode == VitalityMode::Rerun) {
    v.alpha_without = run_pipeline(restrict_to_raters(d, other_raters(d, rater)), c, jobs).mean.mean;
  } else {
    auto ms = full.matrices;
    for (auto& m : ms) {
      for (std::size_t r = 0; r < m.raters.size(); ++r)
        if (m.raters[r] == rater)
          for (auto& cell : m.cells[r]) cell = Cell::missing();
      m.assigned.erase(std::remove(m.assigned.begin(), m.assigned.end(), rater), m.assigned.end());
    }
    v.alpha_without = mean_alpha(ms).mean;
  }
  if (v.alpha_full && v.alpha_without) v.v = *v.alpha_full - *v.alpha_without;
  return v;
}

std::vector<Vitality> vitality_table(const Dataset& d, const MatchConfig& c, VitalityMode mode, unsigned jobs) {
  std::vector<Vitality> out;
  for (const auto& r : d.raters) out.push_back(annotator_vitality(d, c, r.id, mode, jobs));
  return out;
}

CollaborationMatrix collaboration_matrix(const Dataset& d, const MatchConfig& c, unsigned jobs) {
  if (d.raters.size() < 2) throw DiagnosticsError("collaboration matrix needs at least two raters");
  const DatasetIndex idx(d);
  CollaborationMatrix cm;
  for (const auto& r : d.raters) cm.raters.push_back(r.id);
  const std::size_t n = cm.raters.size();
  cm.entries.assign(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      std::vector<std::string> shared;
      for (const auto& im : d.images)
        if (idx.assignment(im.id, cm.raters[i]) && idx.assignment(im.id, cm.raters[j])) shared.push_back(im.id);
      if (shared.empty()) continue;
      const Dataset sub = restrict_to_images(restrict_to_raters(d, {cm.raters[i], cm.raters[j]}), shared);
      cm.entries[i][j] = cm.entries[j][i] = run_pipeline(sub, c, jobs).mean.mean;
    }
  return cm;
}

MeanAlpha intra_annotator(const Dataset& t0, const Dataset& t1, const std::string& rater, const MatchConfig& c,
                          unsigned jobs) {
  const DatasetIndex i0(t0), i1(t1);
  const std::string r0 = rater + "@t0", r1 = rater + "@t1";
  Dataset d;
  d.raters = {{r0, std::nullopt}, {r1, std::nullopt}};
  std::set<std::string> cats;
  for (const auto* src : {&t0, &t1})
    for (const auto& cat : src->categories)
      if (cats.insert(cat.id).second) d.categories.push_back(cat);
  for (const auto& im : t0.images) {
    const Assignment* a0 = i0.assignment(im.id, rater);
    const Assignment* a1 = i1.image(im.id) ? i1.assignment(im.id, rater) : nullptr;
    if (!a0 || !a1) continue;
    d.images.push_back(im);
    d.assignments.push_back({im.id, r0, a0->categories});
    d.assignments.push_back({im.id, r1, a1->categories});
    for (std::size_t k : i0.annotations_of(im.id))
      if (t0.annotations[k].rater_id == rater) {
        Annotation a = t0.annotations[k];
        a.id = "t0:" + a.id;
        a.rater_id = r0;
        d.annotations.push_back(std::move(a));
      }
    for (std::size_t k : i1.annotations_of(im.id))
      if (t1.annotations[k].rater_id == rater) {
        Annotation a = t1.annotations[k];
        a.id = "t1:" + a.id;
        a.rater_id = r1;
        d.annotations.push_back(std::move(a));
      }
  }
  if (d.images.empty()) throw DiagnosticsError("sessions share no image assigned to " + rater);
  return run_pipeline(d, c, jobs).mean;
}

AlphaDistribution per_image_distribution(const MeanAlpha& m) {
  AlphaDistribution out;
  for (const auto& im : m.images) {
    if (im.alpha.value) out.sorted.push_back(*im.alpha.value);
    else ++out.undefined_count;
  }
  std::sort(out.sorted.begin(), out.sorted.end());
  if (!out.sorted.empty()) {
    out.mean = stats::mean(out.sorted);
    out.median = stats::quantile_sorted(out.sorted, 0.5);
    out.q1 = stats::quantile_sorted(out.sorted, 0.25);
    out.q3 = stats::quantile_sorted(out.sorted, 0.75);
  }
  return out;
}

}  // namespace kalos
