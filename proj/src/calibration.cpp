#include "kalos/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

#include "kalos/parallel.hpp"
#include "kalos/random.hpp"
#include "kalos/stats.hpp"

namespace kalos {

std::string_view pairing_mode_name(PairingMode m) { return m == PairingMode::AllPairs ? "all_pairs" : "best_match"; }

std::optional<PairingMode> parse_pairing_mode(std::string_view s) {
  if (s == "all_pairs") return PairingMode::AllPairs;
  if (s == "best_match") return PairingMode::BestMatch;
  return std::nullopt;
}

std::string_view stratum_name(Stratum s) {
  switch (s) {
    case Stratum::All: return "all";
    case Stratum::Small: return "small";
    case Stratum::Medium: return "medium";
    case Stratum::Large: return "large";
  }
  return "all";
}

namespace {

// Per-image annotation lists and cached size classes.
struct Pool {
  const Dataset& d;
  std::vector<std::vector<std::size_t>> by_image;  // image position -> annotation indices
  std::vector<SizeClass> size;                     // per annotation
  std::vector<std::size_t> rater_rank;             // per annotation: dataset rater position
  std::vector<std::size_t> assigned;               // per image: assigned rater count

  explicit Pool(const Dataset& ds) : d(ds) {
    const DatasetIndex idx(ds);
    std::unordered_map<std::string, std::size_t> rater_pos;
    for (std::size_t r = 0; r < ds.raters.size(); ++r) rater_pos[ds.raters[r].id] = r;
    for (const auto& im : ds.images) {
      by_image.push_back(idx.annotations_of(im.id));
      assigned.push_back(idx.assigned_raters(im.id).size());
    }
    for (const auto& a : ds.annotations) {
      size.push_back(size_class(a));
      rater_rank.push_back(rater_pos.at(a.rater_id));
    }
  }

  bool is_anchor(std::size_t a, const SamplingOptions& opt) const { return !opt.target || size[a] == *opt.target; }
  double dist(std::size_t a, std::size_t b, DistanceMetric m) const {
    return distance(d.annotations[a].geometry, d.annotations[b].geometry, m);
  }
};

// Best-match distances from anchor `a` to each other rater's annotations in `partners`.
void best_match(const Pool& p, std::size_t a, const std::vector<std::size_t>& partners, DistanceMetric m,
                std::vector<double>& out) {
  std::vector<std::pair<std::size_t, double>> best;  // (rater rank, min d)
  for (std::size_t b : partners) {
    if (p.rater_rank[b] == p.rater_rank[a]) continue;
    const double dv = p.dist(a, b, m);
    auto it = std::find_if(best.begin(), best.end(), [&](const auto& e) { return e.first == p.rater_rank[b]; });
    if (it == best.end())
      best.emplace_back(p.rater_rank[b], dv);
    else
      it->second = std::min(it->second, dv);
  }
  std::sort(best.begin(), best.end());
  for (const auto& e : best) out.push_back(e.second);
}

std::vector<double> observed_on(const Pool& p, std::span<const std::size_t> images, DistanceMetric m,
                                const SamplingOptions& opt) {
  bool any_multi = false;
  std::vector<double> out;
  for (std::size_t img : images) {
    any_multi = any_multi || p.assigned[img] >= 2;
    const auto& anns = p.by_image[img];
    if (opt.mode == PairingMode::BestMatch) {
      for (std::size_t a : anns)
        if (p.is_anchor(a, opt)) best_match(p, a, anns, m, out);
      continue;
    }
    for (std::size_t i = 0; i < anns.size(); ++i)
      for (std::size_t j = opt.target ? 0 : i + 1; j < anns.size(); ++j) {
        const std::size_t a = anns[i], b = anns[j];
        if (p.rater_rank[a] == p.rater_rank[b] || !p.is_anchor(a, opt)) continue;
        out.push_back(p.dist(a, b, m));
      }
  }
  if (!any_multi) throw CalibrationError("no image has two or more assigned raters; observed disagreement is empty");
  return out;
}

// Draws up to `want` positions q (indices into `images`) whose image differs from images[k].
std::vector<std::size_t> draw_partners(std::span<const std::size_t> images, std::size_t k, std::size_t want,
                                       std::size_t candidates, Rng& rng) {
  std::vector<std::size_t> chosen;
  want = std::min(want, candidates);
  if (want == 0) return chosen;
  if (candidates <= 4 * want) {
    std::vector<std::size_t> pool;
    for (std::size_t q = 0; q < images.size(); ++q)
      if (images[q] != images[k]) pool.push_back(q);
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + rng.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      chosen.push_back(pool[i]);
    }
    return chosen;
  }
  while (chosen.size() < want) {
    const std::size_t q = rng.index(images.size());
    if (images[q] == images[k] || std::find(chosen.begin(), chosen.end(), q) != chosen.end()) continue;
    chosen.push_back(q);
  }
  return chosen;
}

std::vector<double> expected_on(const Pool& p, std::span<const std::size_t> images, DistanceMetric m,
                                const SamplingOptions& opt, std::uint64_t seed) {
  std::unordered_map<std::size_t, std::size_t> multiplicity;
  for (std::size_t img : images) ++multiplicity[img];
  if (multiplicity.size() < 2) throw CalibrationError("chance model needs at least two distinct images");
  const bool dedupe = opt.mode == PairingMode::AllPairs && !opt.target;
  std::set<std::pair<std::size_t, std::size_t>> used;
  std::vector<double> out;
  for (std::size_t k = 0; k < images.size(); ++k) {
    Rng rng(derive_seed(seed, {k}));
    const std::size_t candidates = images.size() - multiplicity[images[k]];
    const auto partners = draw_partners(images, k, static_cast<std::size_t>(std::max(0, opt.images_per_anchor)),
                                        candidates, rng);
    for (std::size_t q : partners) {
      if (dedupe && !used.insert({std::min(k, q), std::max(k, q)}).second) continue;
      const auto& anchors = p.by_image[images[k]];
      const auto& others = p.by_image[images[q]];
      for (std::size_t a : anchors) {
        if (!p.is_anchor(a, opt)) continue;
        if (opt.mode == PairingMode::BestMatch) {
          best_match(p, a, others, m, out);
          continue;
        }
        for (std::size_t b : others)
          if (p.rater_rank[a] != p.rater_rank[b]) out.push_back(p.dist(a, b, m));
      }
    }
  }
  return out;
}

std::vector<std::size_t> all_positions(const Dataset& d) {
  std::vector<std::size_t> v(d.images.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

void check_metric(const Dataset& d, DistanceMetric m) {
  if (d.annotations.empty()) return;
  const GeometryKind k = kind_of(d.annotations.front().geometry);
  if (!metric_accepts(m, k))
    throw IncompatibleGeometry(std::string(metric_name(m)) + " cannot compare " +
                               std::string(geometry_type_name(k)) + " geometry");
}

}  // namespace

std::vector<double> sample_observed(const Dataset& d, DistanceMetric m, const SamplingOptions& opt) {
  check_metric(d, m);
  const Pool p(d);
  return observed_on(p, all_positions(d), m, opt);
}

std::vector<double> sample_expected(const Dataset& d, DistanceMetric m, const SamplingOptions& opt) {
  check_metric(d, m);
  const Pool p(d);
  return expected_on(p, all_positions(d), m, opt, opt.seed);
}

DisagreementSamples sample_disagreement(const Dataset& d, DistanceMetric m, const SamplingOptions& opt) {
  check_metric(d, m);
  const Pool p(d);
  const auto pos = all_positions(d);
  return {observed_on(p, pos, m, opt), expected_on(p, pos, m, opt, opt.seed), m, opt.mode, opt.seed};
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw CalibrationError("ks statistic needs two non-empty samples");
  return stats::ks_two_sample(a, b);
}

CalibrationResult estimate_tau_star(const DisagreementSamples& s, std::size_t grid_size) {
  if (s.observed.size() < 10 || s.expected.size() < 10)
    throw CalibrationError("tau* estimation needs at least 10 observed and 10 expected samples (got " +
                           std::to_string(s.observed.size()) + " and " + std::to_string(s.expected.size()) + ")");
  if (grid_size < 2) throw CalibrationError("grid needs at least two points");
  CalibrationResult r;
  r.metric = s.metric;
  r.n_observed = s.observed.size();
  r.n_expected = s.expected.size();
  const auto ks = stats::ks_two_sample_detail(s.observed, s.expected);
  r.ks = ks.statistic;
  r.ks_argmax = ks.argmax;

  const stats::Kde kdo(s.observed), kde(s.expected);
  r.bandwidth_do = kdo.bandwidth();
  r.bandwidth_de = kde.bandwidth();
  r.f_do = kdo.on_grid(0.0, 1.0, grid_size);
  r.f_de = kde.on_grid(0.0, 1.0, grid_size);
  r.grid.resize(grid_size);
  for (std::size_t k = 0; k < grid_size; ++k) r.grid[k] = static_cast<double>(k) / static_cast<double>(grid_size - 1);

  double peak = 0.0;
  for (std::size_t k = 0; k < grid_size; ++k) peak = std::max({peak, r.f_do[k], r.f_de[k]});
  const double floor = 1e-9 * peak;
  // Sign changes of f_Do - f_De. Regions where both densities vanish, and
  // differences at rounding level, carry no sign.
  std::optional<std::size_t> last;  // last significant grid point with non-zero difference
  for (std::size_t k = 0; k < grid_size; ++k) {
    if (r.f_do[k] < floor && r.f_de[k] < floor) continue;
    const double diff = r.f_do[k] - r.f_de[k];
    if (std::fabs(diff) <= floor) continue;
    if (last) {
      const double prev = r.f_do[*last] - r.f_de[*last];
      if ((prev < 0.0) != (diff < 0.0)) {
        double root;
        if (k == *last + 1)
          root = r.grid[*last] + (r.grid[k] - r.grid[*last]) * prev / (prev - diff);
        else
          root = 0.5 * (r.grid[*last + 1] + r.grid[k - 1]);  // centre of the exact-zero run
        r.crossover_candidates.push_back(root);
      }
    }
    last = k;
  }
  if (r.crossover_candidates.empty()) {
    r.no_crossover = true;
    r.tau_star = 0.5 * (stats::mean(s.observed) + stats::mean(s.expected));
    return r;
  }
  r.tau_star = r.crossover_candidates.front();
  for (double c : r.crossover_candidates)
    if (std::fabs(c - r.ks_argmax) < std::fabs(r.tau_star - r.ks_argmax)) r.tau_star = c;
  return r;
}

std::vector<MetricRank> rank_metrics(const Dataset& d, std::span<const DistanceMetric> metrics,
                                     const SamplingOptions& opt, std::size_t grid_size) {
  std::vector<MetricRank> out;
  for (DistanceMetric m : metrics) {
    const CalibrationResult r = estimate_tau_star(sample_disagreement(d, m, opt), grid_size);
    out.push_back({m, r.ks, r.tau_star, r.no_crossover});
  }
  std::sort(out.begin(), out.end(), [](const MetricRank& a, const MetricRank& b) {
    return a.ks != b.ks ? a.ks > b.ks : metric_name(a.metric) < metric_name(b.metric);
  });
  return out;
}

namespace {

struct IterationResult {
  bool valid = false;
  double tau = 0.0;
  double ks = 0.0;
  bool no_crossover = false;
};

void summarize(BootstrapEntry& e, const std::vector<IterationResult>& runs) {
  e.iterations = runs.size();
  for (const auto& r : runs) {
    if (!r.valid) continue;
    ++e.valid_iterations;
    e.no_crossover += r.no_crossover;
    e.tau_values.push_back(r.tau);
    e.ks_values.push_back(r.ks);
  }
  if (e.valid_iterations == 0) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    e.tau_mean = e.tau_lo = e.tau_hi = e.ks_mean = e.ks_lo = e.ks_hi = nan;
    return;
  }
  auto fill = [](const std::vector<double>& v, double& mean, double& lo, double& hi) {
    mean = stats::mean(v);
    std::tie(lo, hi) = stats::percentile_interval(v);
    // Percentile bounds can exclude the mean on very skewed draws; widen to keep lo <= mean <= hi.
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
  };
  fill(e.tau_values, e.tau_mean, e.tau_lo, e.tau_hi);
  fill(e.ks_values, e.ks_mean, e.ks_lo, e.ks_hi);
}

IterationResult try_estimate(const DisagreementSamples& s, std::size_t grid_size) {
  IterationResult r;
  if (s.observed.size() < 10 || s.expected.size() < 10) return r;
  const CalibrationResult c = estimate_tau_star(s, grid_size);
  return {true, c.tau_star, c.ks, c.no_crossover};
}

}  // namespace

BootstrapTable bootstrap_calibration(const Dataset& d, DistanceMetric m, const SamplingOptions& sampling,
                                     const BootstrapOptions& opt) {
  check_metric(d, m);
  if (d.images.size() < 2) throw CalibrationError("bootstrap needs at least two images");
  const Pool pool(d);
  std::vector<Stratum> strata{Stratum::All};
  if (opt.stratify_by_size) strata.insert(strata.end(), {Stratum::Small, Stratum::Medium, Stratum::Large});

  std::vector<std::vector<IterationResult>> runs(strata.size(), std::vector<IterationResult>(opt.iterations));
  parallel_for(
      opt.iterations,
      [&](std::size_t it) {
        std::vector<std::size_t> images;
        std::uint64_t de_seed = sampling.seed;
        if (opt.identity_first && it == 0) {
          images = all_positions(d);
        } else {
          Rng rng(derive_seed(opt.seed, {it}));
          images.resize(d.images.size());
          for (auto& v : images) v = rng.index(d.images.size());
          de_seed = derive_seed(opt.seed, {it, 1});
        }
        for (std::size_t s = 0; s < strata.size(); ++s) {
          SamplingOptions so = sampling;
          if (strata[s] != Stratum::All) so.target = static_cast<SizeClass>(static_cast<int>(strata[s]) - 1);
          try {
            DisagreementSamples ds{observed_on(pool, images, m, so), expected_on(pool, images, m, so, de_seed), m,
                                   so.mode, de_seed};
            runs[s][it] = try_estimate(ds, opt.grid_size);
          } catch (const CalibrationError&) {
            runs[s][it] = {};  // e.g. a resample drew a single distinct image
          }
        }
      },
      opt.jobs);

  BootstrapTable t;
  t.metric = m;
  t.seed = opt.seed;
  t.iterations = opt.iterations;
  for (std::size_t s = 0; s < strata.size(); ++s) {
    BootstrapEntry e;
    e.stratum = strata[s];
    summarize(e, runs[s]);
    t.entries.push_back(std::move(e));
  }
  return t;
}

BootstrapTable bootstrap_samples(const DisagreementSamples& s, const BootstrapOptions& opt) {
  if (s.observed.size() < 10 || s.expected.size() < 10)
    throw CalibrationError("bootstrap needs at least 10 observed and 10 expected samples");
  std::vector<IterationResult> runs(opt.iterations);
  parallel_for(
      opt.iterations,
      [&](std::size_t it) {
        if (opt.identity_first && it == 0) {
          runs[it] = try_estimate(s, opt.grid_size);
          return;
        }
        Rng rng(derive_seed(opt.seed, {it}));
        DisagreementSamples r{{}, {}, s.metric, s.mode, s.seed};
        r.observed.reserve(s.observed.size());
        r.expected.reserve(s.expected.size());
        for (std::size_t i = 0; i < s.observed.size(); ++i) r.observed.push_back(s.observed[rng.index(s.observed.size())]);
        for (std::size_t i = 0; i < s.expected.size(); ++i) r.expected.push_back(s.expected[rng.index(s.expected.size())]);
        runs[it] = try_estimate(r, opt.grid_size);
      },
      opt.jobs);
  BootstrapTable t;
  t.metric = s.metric;
  t.seed = opt.seed;
  t.iterations = opt.iterations;
  BootstrapEntry e;
  summarize(e, runs);
  t.entries.push_back(std::move(e));
  return t;
}

}  // namespace kalos
