#include "kalos/noise.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>

#include "kalos/geometry.hpp"
#include "kalos/parallel.hpp"

namespace kalos {

namespace {

constexpr double kPi = std::numbers::pi;

const Box2D& box_of(const Annotation& a) {
  const auto* b = std::get_if<Box2D>(&a.geometry);
  if (!b) throw NoiseError("noise model supports bbox annotations only (annotation " + a.id + ")");
  return *b;
}

double cx(const Box2D& b) { return b.x + 0.5 * b.w; }
double cy(const Box2D& b) { return b.y + 0.5 * b.h; }
double area(const Box2D& b) { return b.w * b.h; }

Box2D enclosing(const Box2D& a, const Box2D& b) {
  const double x0 = std::min(a.x, b.x), y0 = std::min(a.y, b.y);
  const double x1 = std::max(a.x + a.w, b.x + b.w), y1 = std::max(a.y + a.h, b.y + b.h);
  return {x0, y0, x1 - x0, y1 - y0};
}

double intersection_area(const Box2D& a, const Box2D& b) {
  const double w = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double h = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  return w > 0 && h > 0 ? w * h : 0.0;
}

double wrap(double t) {
  t = std::fmod(t, 2.0 * kPi);
  return t < 0 ? t + 2.0 * kPi : t;
}

double safe_log_area(const Box2D& b) { return std::log(std::max(area(b), 1e-12)); }

// Angle between the vectors parent centre -> each child, divided by pi.
std::optional<double> separation(const Box2D& parent, const Box2D& c1, const Box2D& c2) {
  const double ax = cx(c1) - cx(parent), ay = cy(c1) - cy(parent);
  const double bx = cx(c2) - cx(parent), by = cy(c2) - cy(parent);
  const double na = std::hypot(ax, ay), nb = std::hypot(bx, by);
  if (na <= 1e-12 || nb <= 1e-12) return std::nullopt;
  const double c = std::clamp((ax * bx + ay * by) / (na * nb), -1.0, 1.0);
  return std::acos(c) / kPi;
}

double t_logpdf(double r, const stats::StudentTFit& f) {
  return stats::student_t_logpdf(r, f.nu, f.mu, std::max(f.sigma, 1e-6));
}

}  // namespace

// ===========================================================================
// Extraction
// ===========================================================================

ErrorCorpus extract_errors(const Dataset& d, double thr) {
  if (!(thr > 0.0 && thr <= 1.0)) throw NoiseError("iou threshold must lie in (0, 1]");
  const DatasetIndex idx(d);
  ErrorCorpus c;
  c.iou_threshold = thr;
  for (const auto& cat : d.categories) c.categories.push_back(cat.id);

  std::set<std::string> in_topology;
  std::size_t shared_pairs = 0;

  for (const auto& im : d.images) {
    const auto& raters = idx.assigned_raters(im.id);
    std::map<std::string, std::vector<const Annotation*>> by_rater;
    for (std::size_t i : idx.annotations_of(im.id)) by_rater[d.annotations[i].rater_id].push_back(&d.annotations[i]);

    for (std::size_t ra = 0; ra < raters.size(); ++ra)
      for (std::size_t rb = ra + 1; rb < raters.size(); ++rb) {
        ++shared_pairs;
        const auto& A = by_rater[raters[ra]];
        const auto& B = by_rater[raters[rb]];
        std::vector<char> used_a(A.size(), 0), used_b(B.size(), 0);
        std::vector<char> parent_a(A.size(), 0), parent_b(B.size(), 0);

        // Topology: a parent whose area is well covered by >= 2 smaller boxes of
        // the other rater, whose enclosing box beats every single one on IoU.
        auto detect = [&](const std::vector<const Annotation*>& P, std::vector<char>& used_p, std::vector<char>& is_parent,
                          const std::vector<const Annotation*>& Q, std::vector<char>& used_q) {
          for (std::size_t i = 0; i < P.size(); ++i) {
            if (used_p[i]) continue;
            const Box2D& p = box_of(*P[i]);
            std::vector<std::size_t> kids;
            for (std::size_t j = 0; j < Q.size(); ++j) {
              if (used_q[j]) continue;
              const Box2D& q = box_of(*Q[j]);
              if (area(q) < area(p) && intersection_area(p, q) >= 0.5 * area(q)) kids.push_back(j);
            }
            if (kids.size() < 2) continue;
            Box2D env = box_of(*Q[kids[0]]);
            double best_single = 0.0;
            for (std::size_t j : kids) {
              env = enclosing(env, box_of(*Q[j]));
              best_single = std::max(best_single, box_iou(p, box_of(*Q[j])));
            }
            const double iou_env = box_iou(p, env);
            if (iou_env < thr || iou_env <= best_single) continue;
            TopologyRecord t;
            t.image_id = im.id;
            t.parent = P[i]->id;
            t.parent_box = p;
            // Largest children first.
            std::stable_sort(kids.begin(), kids.end(),
                             [&](std::size_t x, std::size_t y) { return area(box_of(*Q[x])) > area(box_of(*Q[y])); });
            for (std::size_t j : kids) {
              t.children.push_back(Q[j]->id);
              t.child_boxes.push_back(box_of(*Q[j]));
              used_q[j] = 1;
              in_topology.insert(Q[j]->id);
            }
            used_p[i] = 1;
            is_parent[i] = 1;
            in_topology.insert(P[i]->id);
            c.topology.push_back(std::move(t));
          }
        };
        detect(A, used_a, parent_a, B, used_b);
        detect(B, used_b, parent_b, A, used_a);

        // Greedy one-to-one matching on IoU.
        struct Cand {
          double iou;
          std::size_t i, j;
        };
        std::vector<Cand> cand;
        for (std::size_t i = 0; i < A.size(); ++i) {
          if (used_a[i]) continue;
          for (std::size_t j = 0; j < B.size(); ++j) {
            if (used_b[j]) continue;
            const double v = box_iou(box_of(*A[i]), box_of(*B[j]));
            if (v >= thr) cand.push_back({v, i, j});
          }
        }
        std::sort(cand.begin(), cand.end(), [&](const Cand& x, const Cand& y) {
          if (x.iou != y.iou) return x.iou > y.iou;
          if (A[x.i]->id != A[y.i]->id) return A[x.i]->id < A[y.i]->id;
          return B[x.j]->id < B[y.j]->id;
        });
        std::vector<char> matched_a(A.size(), 0), matched_b(B.size(), 0);
        for (const auto& k : cand) {
          if (matched_a[k.i] || matched_b[k.j]) continue;
          matched_a[k.i] = matched_b[k.j] = 1;
          const Box2D& ba = box_of(*A[k.i]);
          const Box2D& bb = box_of(*B[k.j]);
          MatchedPairRecord m;
          m.image_id = im.id;
          m.a = A[k.i]->id;
          m.b = B[k.j]->id;
          m.category_a = A[k.i]->category_id;
          m.category_b = B[k.j]->category_id;
          m.d_loc = 1.0 - k.iou;
          m.a_avg = 0.5 * (area(ba) + area(bb));
          m.dx = cx(bb) - cx(ba);
          m.dy = cy(bb) - cy(ba);
          m.magnitude = std::hypot(m.dx, m.dy);
          m.angle = wrap(std::atan2(m.dy, m.dx));
          m.log_sw = std::log(bb.w / ba.w);
          m.log_sh = std::log(bb.h / ba.h);
          ++c.confusion[{m.category_a, m.category_b}];
          if (m.category_a != m.category_b) ++c.confusion[{m.category_b, m.category_a}];
          c.matched.push_back(std::move(m));
        }

        int unmatched = 0;
        auto leftovers = [&](const std::vector<const Annotation*>& X, const std::vector<char>& used,
                             const std::vector<char>& matched, const std::vector<char>& parent) {
          for (std::size_t i = 0; i < X.size(); ++i) {
            const bool um = !used[i] && !matched[i];
            if (um) {
              ++unmatched;
              c.unmatched.push_back({im.id, X[i]->id, X[i]->rater_id, static_cast<int>(X.size()),
                                     area(box_of(*X[i]))});
            }
            c.areas.push_back({safe_log_area(box_of(*X[i])), um, parent[i] != 0});
          }
        };
        leftovers(A, used_a, matched_a, parent_a);
        leftovers(B, used_b, matched_b, parent_b);
        c.counts.push_back({0.5 * static_cast<double>(A.size() + B.size()), unmatched});
      }
  }
  if (shared_pairs == 0) throw NoiseError("extract_errors: no image is shared by two raters");

  // Same-rater sibling pairs for the merge threshold.
  for (const auto& im : d.images) {
    std::map<std::string, std::vector<const Annotation*>> by_rater;
    for (std::size_t i : idx.annotations_of(im.id)) by_rater[d.annotations[i].rater_id].push_back(&d.annotations[i]);
    for (const auto& [r, anns] : by_rater)
      for (std::size_t i = 0; i < anns.size(); ++i)
        for (std::size_t j = i + 1; j < anns.size(); ++j) {
          if (anns[i]->category_id != anns[j]->category_id) continue;
          if (in_topology.count(anns[i]->id) || in_topology.count(anns[j]->id)) continue;
          c.sibling_pairs.emplace_back(box_of(*anns[i]), box_of(*anns[j]));
        }
  }
  return c;
}

std::vector<SweepRow> threshold_sweep(const Dataset& d, const std::vector<double>& thresholds) {
  std::vector<SweepRow> rows;
  for (double t : thresholds) {
    const ErrorCorpus c = extract_errors(d, t);
    SweepRow r;
    r.iou_threshold = t;
    for (const auto& m : c.matched) (m.same_category() ? r.matched_same : r.matched_confused)++;
    r.unmatched = c.unmatched.size();
    r.topology = c.topology.size();
    rows.push_back(r);
  }
  return rows;
}

// ===========================================================================
// Model pieces
// ===========================================================================

std::optional<std::string> CategoryTransition::draw(const std::string& from, const std::vector<std::string>& categories,
                                                    Rng& rng) const {
  std::vector<std::string> others;
  for (const auto& c : categories)
    if (c != from) others.push_back(c);
  if (others.empty()) return std::nullopt;
  auto row = similarity.find(from);
  if (row == similarity.end()) return others[rng.index(others.size())];

  std::vector<std::pair<double, std::string>> sims;
  for (const auto& c : others) {
    auto it = row->second.find(c);
    if (it != row->second.end()) sims.emplace_back(it->second, c);
  }
  if (sims.empty()) return others[rng.index(others.size())];
  std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  if (static_cast<int>(sims.size()) > top_k) sims.resize(static_cast<std::size_t>(top_k));
  std::vector<double> w;
  for (const auto& s : sims) w.push_back(std::exp((s.first - sims.front().first) / temperature));
  return sims[rng.weighted_index(w)].second;
}

double TopologyModel::log_merge_score(const Box2D& a, const Box2D& b) const {
  const Box2D p = enclosing(a, b);
  const double ap = area(p);
  double s = 0.0;
  for (const Box2D* c : {&a, &b}) {
    s += t_logpdf(std::log(c->w / p.w) - child_w.trend(ap), child_w.residual);
    s += t_logpdf(std::log(c->h / p.h) - child_h.trend(ap), child_h.residual);
    s += t_logpdf(std::hypot(cx(*c) - cx(p), cy(*c) - cy(p)) - child_offset.trend(ap), child_offset.residual);
  }
  const double ang = separation(p, a, b).value_or(0.0);
  s += stats::beta_logpdf(std::clamp(ang, 1e-6, 1.0 - 1e-6), child_angle.alpha, child_angle.beta);
  return s;
}

namespace {

stats::LinearTModel linear_t(double intercept, double slope, double nu, double sigma) {
  stats::LinearTModel m;
  m.intercept = intercept;
  m.slope = slope;
  m.residual.nu = nu;
  m.residual.mu = 0.0;
  m.residual.sigma = sigma;
  m.winsor_lo = m.residual.quantile(m.q_lo);
  m.winsor_hi = m.residual.quantile(m.q_hi);
  return m;
}

stats::VonMisesMixture cardinal(double kappa) {
  stats::VonMisesMixture m;
  m.mode = stats::VonMisesMode::AxisCentered;
  for (int k = 0; k < 4; ++k) m.components.push_back({k * kPi / 2.0, kappa, 0.25, true});
  m.k_params = 7;
  return m;
}

stats::VonMisesMixture axial(double kappa) {
  stats::VonMisesMixture m;
  m.mode = stats::VonMisesMode::UnimodalDoubled;
  m.components.push_back({0.0, kappa, 1.0, false});
  m.k_params = 2;
  return m;
}

}  // namespace

NoiseModel default_noise_model() {
  NoiseModel m;
  m.localization.translation = linear_t(0.004, 0.12, 4.0, 0.004);
  m.localization.direction = cardinal(6.0);
  m.localization.scale_w = linear_t(0.05, -0.5, 4.0, 0.03);
  m.localization.scale_h = linear_t(0.05, -0.5, 4.0, 0.03);
  m.p_global = 0.026;
  m.misclassified.translation = linear_t(0.008, 0.2, 4.0, 0.008);
  m.misclassified.direction = axial(1.0);
  m.misclassified.scale_w = linear_t(0.08, -0.5, 4.0, 0.05);
  m.misclassified.scale_h = linear_t(0.08, -0.5, 4.0, 0.05);
  m.unmatched_rate.intercept = -1.3;
  m.unmatched_rate.slope = 0.021;
  m.select.intercept = -2.0;
  m.select.slope = -0.5;
  m.fn_share = 0.5;
  auto& t = m.topology;
  t.enabled = true;
  t.parent.intercept = -1.06;
  t.parent.slope = 0.8;
  t.kappa = 0.2;
  t.child_w = linear_t(-0.7 + t.kappa, 0.0, 5.0, 0.2);
  t.child_h = linear_t(-0.7 + t.kappa, 0.0, 5.0, 0.2);
  t.child_offset = linear_t(0.0, 0.8, 5.0, 0.01);
  t.child_angle.alpha = 4.53;
  t.child_angle.beta = 0.53;
  t.merge_enabled = false;
  t.merge_threshold = std::numeric_limits<double>::infinity();
  m.flags.push_back("default_model");
  m.flags.push_back("merge_threshold_uncalibrated");
  return m;
}

// ===========================================================================
// Fitting
// ===========================================================================

namespace {

template <class Fn>
auto fit_part(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const stats::DegenerateInput& e) {
    throw NoiseError(name + ": " + e.what());
  }
}

LocalizationProfile fit_profile(const std::vector<const MatchedPairRecord*>& pairs, stats::VonMisesMode mode,
                                std::uint64_t seed, const std::string& name) {
  std::vector<double> a, mag, ang, sw, sh;
  for (const auto* p : pairs) {
    a.push_back(p->a_avg);
    mag.push_back(p->magnitude);
    ang.push_back(p->angle);
    sw.push_back(std::abs(p->log_sw));
    sh.push_back(std::abs(p->log_sh));
  }
  LocalizationProfile lp;
  lp.translation = fit_part(name + ".translation", [&] { return stats::fit_linear_t(a, mag); });
  lp.scale_w = fit_part(name + ".scale_w", [&] { return stats::fit_linear_t(a, sw); });
  lp.scale_h = fit_part(name + ".scale_h", [&] { return stats::fit_linear_t(a, sh); });
  std::vector<double> moving;  // angles of zero shifts carry no direction
  for (std::size_t i = 0; i < ang.size(); ++i)
    if (mag[i] > 1e-12) moving.push_back(ang[i]);
  lp.direction = fit_part(name + ".direction", [&] { return stats::fit_vonmises_mixture(moving, mode, 4, seed); });
  return lp;
}

std::string corpus_digest(const ErrorCorpus& c) {
  std::ostringstream s;
  s.precision(17);
  s << c.iou_threshold << '|';
  for (const auto& m : c.matched) s << m.a << ',' << m.b << ',' << m.category_b << ',' << m.dx << ',' << m.dy << ',' << m.log_sw << ',' << m.log_sh << ';';
  for (const auto& u : c.unmatched) s << u.annotation_id << ';';
  for (const auto& t : c.topology) s << t.parent << ':' << t.children.size() << ';';
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(s.str())));
  return buf;
}

}  // namespace

NoiseModel fit_noise_model(const ErrorCorpus& c, const FitOptions& opt) {
  NoiseModel m = default_noise_model();
  m.flags.clear();
  m.corpus_hash = corpus_digest(c);

  // Localization and category rate.
  std::vector<const MatchedPairRecord*> same, confused;
  for (const auto& p : c.matched) (p.same_category() ? same : confused).push_back(&p);
  if (same.size() < 20) throw NoiseError("localization: needs at least 20 same-category matched pairs");
  m.localization = fit_profile(same, stats::VonMisesMode::AxisCentered, derive_seed(opt.seed, {1}), "localization");
  m.p_global = static_cast<double>(confused.size()) / static_cast<double>(c.matched.size());
  if (confused.size() >= 20) {
    m.misclassified =
        fit_profile(confused, stats::VonMisesMode::UnimodalDoubled, derive_seed(opt.seed, {2}), "misclassified");
  } else {
    m.misclassified = m.localization;
    std::vector<double> ang;
    for (const auto* p : same)
      if (p->magnitude > 1e-12) ang.push_back(p->angle);
    m.misclassified.direction = fit_part("misclassified.direction", [&] {
      return stats::fit_vonmises_mixture(ang, stats::VonMisesMode::UnimodalDoubled, 4, derive_seed(opt.seed, {2}));
    });
    m.flags.push_back("misclassified_profile_from_localization");
  }

  if (opt.similarity_file) {
    m.transition.similarity = load_similarity(*opt.similarity_file);
  } else {
    m.flags.push_back("uniform_category_transition");
  }

  // Unmatched instances.
  std::vector<double> cx_, cy_;
  for (const auto& r : c.counts) cx_.push_back(r.mean_count), cy_.push_back(r.unmatched);
  double total_um = 0.0;
  for (double v : cy_) total_um += v;
  if (total_um > 0.0 && cx_.size() >= 20) {
    m.unmatched_rate = fit_part("unmatched.rate", [&] { return stats::fit_poisson(cx_, cy_); });
  } else {
    m.unmatched_rate.intercept = -30.0;
    m.unmatched_rate.slope = 0.0;
    m.flags.push_back("unmatched_rate_disabled");
  }
  {
    std::vector<double> x;
    std::vector<int> y;
    int pos = 0;
    for (const auto& a : c.areas) x.push_back(a.log_area), y.push_back(a.unmatched ? 1 : 0), pos += a.unmatched;
    if (pos > 0 && pos < static_cast<int>(y.size()) && y.size() >= 20) {
      m.select = fit_part("unmatched.select", [&] { return stats::fit_logistic(x, y); });
    } else {
      m.select = {};
      m.flags.push_back("uniform_selection");
    }
  }
  if (opt.proposal_file) {
    m.proposals = load_proposals(*opt.proposal_file);
  } else {
    m.flags.push_back("random_box_proposals");
  }

  // Topology.
  auto& t = m.topology;
  std::vector<double> pa, lw, lh, off, ang, real_ratio;
  for (const auto& rec : c.topology) {
    const Box2D& p = rec.parent_box;
    for (const Box2D& k : rec.child_boxes) {
      pa.push_back(area(p));
      lw.push_back(std::log(k.w / p.w));
      lh.push_back(std::log(k.h / p.h));
      off.push_back(std::hypot(cx(k) - cx(p), cy(k) - cy(p)));
      real_ratio.push_back(area(k) / area(p));
    }
    if (rec.child_boxes.size() >= 2)
      if (auto g = separation(p, rec.child_boxes[0], rec.child_boxes[1])) ang.push_back(*g);
  }
  int parents = 0;
  for (const auto& a : c.areas) parents += a.parent;
  if (c.topology.size() >= 10 && pa.size() >= 20 && ang.size() >= 10 && parents < static_cast<int>(c.areas.size())) {
    std::vector<double> x;
    std::vector<int> y;
    for (const auto& a : c.areas) x.push_back(a.log_area), y.push_back(a.parent ? 1 : 0);
    t.enabled = true;
    t.parent = fit_part("topology.parent", [&] { return stats::fit_logistic(x, y); });
    t.child_w = fit_part("topology.child_w", [&] { return stats::fit_linear_t(pa, lw); });
    t.child_h = fit_part("topology.child_h", [&] { return stats::fit_linear_t(pa, lh); });
    t.child_offset = fit_part("topology.child_offset", [&] { return stats::fit_linear_t(pa, off); });
    t.child_angle = fit_part("topology.child_angle", [&] { return stats::fit_beta(ang); });

    // Child sizes drawn from the raw fit against the observed ones.
    Rng rng(derive_seed(opt.seed, {3}));
    std::vector<double> synth;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      const double sw = std::min(t.child_w.sample(pa[i], rng), -1e-3);
      const double sh = std::min(t.child_h.sample(pa[i], rng), -1e-3);
      synth.push_back(std::exp(sw + sh));
    }
    t.kappa = 0.5 * std::log(stats::quantile(real_ratio, 0.5) / stats::quantile(synth, 0.5));
    t.child_w.intercept += t.kappa;
    t.child_h.intercept += t.kappa;

    std::vector<double> scores;
    for (const auto& [a, b] : c.sibling_pairs) scores.push_back(t.log_merge_score(a, b));
    if (scores.size() >= 20) {
      t.merge_threshold = stats::quantile(scores, 0.99);
      t.merge_enabled = true;
    } else {
      t.merge_enabled = false;
      t.merge_threshold = std::numeric_limits<double>::infinity();
      m.flags.push_back("merge_disabled");
    }
  } else {
    t = TopologyModel{};
    t.merge_threshold = std::numeric_limits<double>::infinity();
    m.flags.push_back("topology_disabled");
  }
  return m;
}

// ===========================================================================
// Serialization
// ===========================================================================

namespace {

using nlohmann::json;

json to_j(const stats::StudentTFit& f) { return {{"nu", f.nu}, {"mu", f.mu}, {"sigma", f.sigma}}; }
stats::StudentTFit t_from(const json& j) {
  stats::StudentTFit f;
  f.nu = j.at("nu").get<double>();
  f.mu = j.at("mu").get<double>();
  f.sigma = j.at("sigma").get<double>();
  return f;
}

json to_j(const stats::LinearTModel& m) {
  return {{"intercept", m.intercept}, {"slope", m.slope}, {"residual", to_j(m.residual)},
          {"q_lo", m.q_lo},           {"q_hi", m.q_hi},   {"winsor_lo", m.winsor_lo},
          {"winsor_hi", m.winsor_hi}};
}
stats::LinearTModel lin_from(const json& j) {
  stats::LinearTModel m;
  m.intercept = j.at("intercept").get<double>();
  m.slope = j.at("slope").get<double>();
  m.residual = t_from(j.at("residual"));
  m.q_lo = j.at("q_lo").get<double>();
  m.q_hi = j.at("q_hi").get<double>();
  m.winsor_lo = j.at("winsor_lo").get<double>();
  m.winsor_hi = j.at("winsor_hi").get<double>();
  return m;
}

json to_j(const stats::VonMisesMixture& m) {
  json comps = json::array();
  for (const auto& c : m.components)
    comps.push_back({{"mu", c.mu}, {"kappa", c.kappa}, {"weight", c.weight}, {"fixed_mean", c.fixed_mean}});
  return {{"mode", stats::vonmises_mode_name(m.mode)}, {"components", comps}};
}
stats::VonMisesMixture vm_from(const json& j) {
  stats::VonMisesMixture m;
  m.mode = stats::parse_vonmises_mode(j.at("mode").get<std::string>());
  for (const auto& c : j.at("components"))
    m.components.push_back({c.at("mu").get<double>(), c.at("kappa").get<double>(), c.at("weight").get<double>(),
                            c.at("fixed_mean").get<bool>()});
  return m;
}

json to_j(const LocalizationProfile& p) {
  return {{"translation", to_j(p.translation)},
          {"direction", to_j(p.direction)},
          {"scale_w", to_j(p.scale_w)},
          {"scale_h", to_j(p.scale_h)}};
}
LocalizationProfile prof_from(const json& j) {
  return {lin_from(j.at("translation")), vm_from(j.at("direction")), lin_from(j.at("scale_w")),
          lin_from(j.at("scale_h"))};
}

json glm(double a, double b) { return {{"intercept", a}, {"slope", b}}; }

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

nlohmann::json noise_model_to_json(const NoiseModel& m) {
  json props = json::array();
  for (const auto& p : m.proposals)
    props.push_back({{"image_id", p.image_id},
                     {"bbox", {p.box.x, p.box.y, p.box.w, p.box.h}},
                     {"category_id", p.category_id},
                     {"score", p.score}});
  const auto& t = m.topology;
  return {
      {"format", "kalos-noise-model"},
      {"version", 1},
      {"corpus_hash", m.corpus_hash},
      {"flags", m.flags},
      {"localization", to_j(m.localization)},
      {"category",
       {{"p_global", m.p_global},
        {"temperature", m.transition.temperature},
        {"top_k", m.transition.top_k},
        {"similarity", m.transition.similarity},
        {"misclassified", to_j(m.misclassified)}}},
      {"unmatched",
       {{"rate", glm(m.unmatched_rate.intercept, m.unmatched_rate.slope)},
        {"select", glm(m.select.intercept, m.select.slope)},
        {"fn_share", m.fn_share},
        {"proposals", props}}},
      {"topology",
       {{"enabled", t.enabled},
        {"parent", glm(t.parent.intercept, t.parent.slope)},
        {"child_w", to_j(t.child_w)},
        {"child_h", to_j(t.child_h)},
        {"child_offset", to_j(t.child_offset)},
        {"child_angle", {{"alpha", t.child_angle.alpha}, {"beta", t.child_angle.beta}}},
        {"kappa", t.kappa},
        {"merge_enabled", t.merge_enabled},
        {"merge_threshold", finite_or_null(t.merge_threshold)}}},
  };
}

NoiseModel noise_model_from_json(const nlohmann::json& j) {
  try {
    NoiseModel m;
    m.corpus_hash = j.value("corpus_hash", "");
    m.flags = j.value("flags", std::vector<std::string>{});
    m.localization = prof_from(j.at("localization"));
    const auto& c = j.at("category");
    m.p_global = c.at("p_global").get<double>();
    m.transition.temperature = c.value("temperature", 0.1);
    m.transition.top_k = c.value("top_k", 10);
    m.transition.similarity = c.value("similarity", std::map<std::string, std::map<std::string, double>>{});
    m.misclassified = prof_from(c.at("misclassified"));
    const auto& u = j.at("unmatched");
    m.unmatched_rate.intercept = u.at("rate").at("intercept").get<double>();
    m.unmatched_rate.slope = u.at("rate").at("slope").get<double>();
    m.select.intercept = u.at("select").at("intercept").get<double>();
    m.select.slope = u.at("select").at("slope").get<double>();
    m.fn_share = u.value("fn_share", 0.5);
    for (const auto& p : u.value("proposals", json::array())) {
      const auto b = p.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) throw NoiseError("proposal bbox needs 4 numbers");
      m.proposals.push_back({p.at("image_id").get<std::string>(), {b[0], b[1], b[2], b[3]},
                             p.value("category_id", ""), p.value("score", 0.0)});
    }
    const auto& t = j.at("topology");
    auto& tm = m.topology;
    tm.enabled = t.at("enabled").get<bool>();
    tm.parent.intercept = t.at("parent").at("intercept").get<double>();
    tm.parent.slope = t.at("parent").at("slope").get<double>();
    tm.child_w = lin_from(t.at("child_w"));
    tm.child_h = lin_from(t.at("child_h"));
    tm.child_offset = lin_from(t.at("child_offset"));
    tm.child_angle.alpha = t.at("child_angle").at("alpha").get<double>();
    tm.child_angle.beta = t.at("child_angle").at("beta").get<double>();
    tm.kappa = t.at("kappa").get<double>();
    tm.merge_enabled = t.at("merge_enabled").get<bool>();
    tm.merge_threshold = t.at("merge_threshold").is_null() ? std::numeric_limits<double>::infinity()
                                                           : t.at("merge_threshold").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw NoiseError(std::string("noise model: ") + e.what());
  }
}

std::map<std::string, std::map<std::string, double>> load_similarity(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw NoiseError("cannot open similarity file " + p.string());
  std::map<std::string, std::map<std::string, double>> out;
  if (p.extension() == ".csv") {
    std::string line;
    std::getline(in, line);
    auto split = [](const std::string& s) {
      std::vector<std::string> f;
      std::stringstream ss(s);
      std::string x;
      while (std::getline(ss, x, ',')) f.push_back(x);
      return f;
    };
    const auto header = split(line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split(line);
      if (f.size() != header.size()) throw NoiseError("similarity csv row width differs from header");
      for (std::size_t k = 1; k < f.size(); ++k) out[f[0]][header[k]] = std::stod(f[k]);
    }
    return out;
  }
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("matrix")) {
      const auto cats = j.at("categories").get<std::vector<std::string>>();
      const auto mat = j.at("matrix").get<std::vector<std::vector<double>>>();
      if (mat.size() != cats.size()) throw NoiseError("similarity matrix is not square");
      for (std::size_t a = 0; a < cats.size(); ++a) {
        if (mat[a].size() != cats.size()) throw NoiseError("similarity matrix is not square");
        for (std::size_t b = 0; b < cats.size(); ++b) out[cats[a]][cats[b]] = mat[a][b];
      }
    } else {
      out = j.get<std::map<std::string, std::map<std::string, double>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw NoiseError("similarity file: " + std::string(e.what()));
  }
  return out;
}

std::vector<Proposal> load_proposals(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw NoiseError("cannot open proposal file " + p.string());
  std::vector<Proposal> out;
  try {
    for (const auto& e : nlohmann::json::parse(in)) {
      const auto b = e.at("bbox").get<std::vector<double>>();
      if (b.size() != 4 || !(b[2] > 0) || !(b[3] > 0)) throw NoiseError("proposal bbox must be [x, y, w, h] with positive size");
      out.push_back({e.at("image_id").get<std::string>(), {b[0], b[1], b[2], b[3]}, e.value("category_id", ""),
                     e.value("score", 0.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw NoiseError("proposal file: " + std::string(e.what()));
  }
  return out;
}

// ===========================================================================
// Synthesis
// ===========================================================================

std::string_view fate_name(Fate f) {
  switch (f) {
    case Fate::Shifted: return "shifted";
    case Fate::Flipped: return "flipped";
    case Fate::Fragmented: return "fragmented";
    case Fate::Merged: return "merged";
    case Fate::Deleted: return "deleted";
  }
  return "shifted";
}

std::string_view origin_name(Origin o) {
  switch (o) {
    case Origin::Shifted: return "shifted";
    case Origin::Flipped: return "flipped";
    case Origin::Fragment: return "fragment";
    case Origin::Merged: return "merged";
    case Origin::FalsePositive: return "false_positive";
  }
  return "shifted";
}

void StageCounts::add(const StageCounts& o) {
  false_negatives += o.false_negatives;
  false_positives += o.false_positives;
  fp_skipped += o.fp_skipped;
  fragmentations += o.fragmentations;
  merges += o.merges;
  flips += o.flips;
  theoretical += o.theoretical;
  cannibalized += o.cannibalized;
}

namespace {

enum Stage : std::uint64_t { kUnmatched = 1, kFragment = 2, kMerge = 3, kCategory = 4, kShift = 5 };

Box2D from_centre(double x, double y, double w, double h) {
  x = std::clamp(x, 0.0, 1.0);
  y = std::clamp(y, 0.0, 1.0);
  return {x - 0.5 * w, y - 0.5 * h, w, h};
}

Box2D shift(const Box2D& b, const LocalizationProfile& p, double lambda, Rng& rng) {
  if (lambda == 0.0) return b;
  const double a = area(b);
  const double t = std::abs(p.translation.sample(a, rng));
  const double theta = p.direction.sample(rng);
  double sw = std::abs(p.scale_w.sample(a, rng));
  double sh = std::abs(p.scale_h.sample(a, rng));
  if (rng.bernoulli(0.5)) sw = -sw;
  if (rng.bernoulli(0.5)) sh = -sh;
  const double w = b.w * std::exp(lambda * sw);
  const double h = b.h * std::exp(lambda * sh);
  return from_centre(cx(b) + lambda * t * std::cos(theta), cy(b) + lambda * t * std::sin(theta), w, h);
}

std::pair<Box2D, Box2D> fragment(const Box2D& p, const NoiseModel& m, Rng& rng) {
  const TopologyModel& t = m.topology;
  const double ap = area(p);
  auto child = [&](double theta) {
    const double sw = std::min(t.child_w.sample(ap, rng), -1e-3);
    const double sh = std::min(t.child_h.sample(ap, rng), -1e-3);
    const double r = std::abs(t.child_offset.sample(ap, rng));
    return from_centre(cx(p) + r * std::cos(theta), cy(p) + r * std::sin(theta), p.w * std::exp(sw), p.h * std::exp(sh));
  };
  const double t1 = m.localization.direction.sample(rng);
  const double sep = kPi * std::clamp(t.child_angle.sample(rng), 0.0, 1.0);
  const double t2 = t1 + (rng.bernoulli(0.5) ? sep : -sep);
  Box2D c1 = child(t1);
  Box2D c2 = child(t2);
  return {c1, c2};
}

struct CellOutput {
  std::vector<Annotation> annotations;
  std::vector<std::pair<std::string, SyntheticSource>> sources;
  std::vector<std::pair<std::string, Fate>> fates;
  StageCounts counts;
};

struct CellContext {
  const Dataset& ref;
  const NoiseModel& m;
  const std::vector<std::string>& categories;
  const std::unordered_map<std::string, std::vector<const Proposal*>>& proposals;
  double lambda;
  std::uint64_t seed;
};

CellOutput synthesize_cell(const CellContext& ctx, std::size_t rater_idx, const std::string& rater,
                           const std::string& image_id, const std::vector<const Annotation*>& refs) {
  const NoiseModel& m = ctx.m;
  const double lambda = ctx.lambda;
  const std::uint64_t img = hash_string(image_id);
  auto stream = [&](std::uint64_t stage, std::uint64_t k) {
    return Rng(derive_seed(ctx.seed, {rater_idx, img, stage, k}));
  };
  auto clamp01 = [](double p) { return std::clamp(p, 0.0, 1.0); };

  CellOutput out;
  StageCounts& sc = out.counts;
  const std::size_t n = refs.size();
  std::vector<char> consumed(n, 0);
  std::vector<Box2D> boxes;
  for (const auto* a : refs) boxes.push_back(box_of(*a));
  std::vector<Annotation> fps;
  std::vector<std::pair<Box2D, std::string>> emitted_fp;

  // 1. Unmatched instances.
  {
    Rng rng = stream(kUnmatched, 0);
    const double mean = lambda * m.unmatched_rate.rate(static_cast<double>(n));
    const std::uint64_t k = mean > 0.0 ? rng.poisson(mean) : 0;
    std::vector<double> w;
    for (const auto& b : boxes) w.push_back(m.select.probability(safe_log_area(b)));
    for (std::uint64_t e = 0; e < k; ++e) {
      if (rng.bernoulli(m.fn_share)) {
        ++sc.theoretical;
        if (n == 0) {
          ++sc.cannibalized;
          continue;
        }
        const std::size_t i = rng.weighted_index(w);
        if (consumed[i]) {
          ++sc.cannibalized;
          continue;
        }
        consumed[i] = 1;
        ++sc.false_negatives;
        out.fates.emplace_back(refs[i]->id, Fate::Deleted);
        continue;
      }
      // False positive: admissible candidates have IoU < 0.1 with everything present.
      auto admissible = [&](const Box2D& c) {
        for (std::size_t i = 0; i < n; ++i)
          if (!consumed[i] && box_iou(c, boxes[i]) >= 0.1) return false;
        for (const auto& f : emitted_fp)
          if (box_iou(c, f.first) >= 0.1) return false;
        return true;
      };
      std::vector<std::pair<Box2D, std::string>> pool;
      if (!m.proposals.empty()) {
        auto it = ctx.proposals.find(image_id);
        if (it != ctx.proposals.end())
          for (const Proposal* p : it->second)
            if (admissible(p->box)) pool.emplace_back(p->box, p->category_id);
      } else {
        for (int tries = 0; tries < 20; ++tries) {
          double bw = 0.1, bh = 0.1;
          if (n > 0) {
            const Box2D& s = boxes[rng.index(n)];
            bw = s.w, bh = s.h;
          }
          bw = std::min(bw, 1.0), bh = std::min(bh, 1.0);
          const Box2D c{rng.uniform(0.0, 1.0 - bw), rng.uniform(0.0, 1.0 - bh), bw, bh};
          if (admissible(c)) pool.emplace_back(c, std::string());
        }
      }
      if (pool.empty()) {
        ++sc.fp_skipped;
        continue;
      }
      ++sc.theoretical;
      std::vector<double> pw;
      for (const auto& p : pool) pw.push_back(m.select.probability(safe_log_area(p.first)));
      auto pick = pool[rng.weighted_index(pw)];
      std::string cat = pick.second;
      if (cat.empty() || std::find(ctx.categories.begin(), ctx.categories.end(), cat) == ctx.categories.end()) {
        if (n > 0) cat = refs[rng.index(n)]->category_id;
        else if (!ctx.categories.empty()) cat = ctx.categories[rng.index(ctx.categories.size())];
        else {
          ++sc.fp_skipped;
          --sc.theoretical;
          continue;
        }
      }
      ++sc.false_positives;
      emitted_fp.emplace_back(pick.first, cat);
    }
  }

  std::vector<std::pair<Annotation, SyntheticSource>> produced;
  auto emit = [&](const Box2D& b, const std::string& cat, Origin o, std::vector<std::string> ids) {
    Annotation a;
    a.image_id = image_id;
    a.rater_id = rater;
    a.category_id = cat;
    a.geometry = b;
    produced.push_back({std::move(a), {o, std::move(ids)}});
  };

  // 2. Topology: fragmentation, then merges of reference pairs that look like fragments.
  if (m.topology.enabled) {
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng = stream(kFragment, i);
      const double p = clamp01(m.topology.parent.probability(safe_log_area(boxes[i])) * lambda);
      if (!(rng.uniform() < p)) continue;
      ++sc.theoretical;
      if (consumed[i]) {
        ++sc.cannibalized;
        continue;
      }
      consumed[i] = 1;
      ++sc.fragmentations;
      auto [c1, c2] = fragment(boxes[i], m, rng);
      emit(c1, refs[i]->category_id, Origin::Fragment, {refs[i]->id});
      emit(c2, refs[i]->category_id, Origin::Fragment, {refs[i]->id});
      out.fates.emplace_back(refs[i]->id, Fate::Fragmented);
    }
    if (m.topology.merge_enabled) {
      struct MergeCand {
        double score;
        std::size_t i, j;
      };
      std::vector<MergeCand> cands;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          if (refs[i]->category_id != refs[j]->category_id) continue;
          const double s = m.topology.log_merge_score(boxes[i], boxes[j]);
          if (s > m.topology.merge_threshold) cands.push_back({s, i, j});
        }
      std::sort(cands.begin(), cands.end(), [&](const MergeCand& a, const MergeCand& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::make_pair(refs[a.i]->id, refs[a.j]->id) < std::make_pair(refs[b.i]->id, refs[b.j]->id);
      });
      for (const auto& c : cands) {
        Rng rng = stream(kMerge, c.i * n + c.j);
        if (!(rng.uniform() < clamp01(lambda))) continue;
        ++sc.theoretical;
        if (consumed[c.i] || consumed[c.j]) {
          ++sc.cannibalized;
          continue;
        }
        consumed[c.i] = consumed[c.j] = 1;
        ++sc.merges;
        emit(enclosing(boxes[c.i], boxes[c.j]), refs[c.i]->category_id, Origin::Merged, {refs[c.i]->id, refs[c.j]->id});
        out.fates.emplace_back(refs[c.i]->id, Fate::Merged);
        out.fates.emplace_back(refs[c.j]->id, Fate::Merged);
      }
    }
  }

  // 3. Category mistakes, 4. localization of the untouched rest.
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = stream(kCategory, i);
    const bool event = rng.uniform() < clamp01(m.p_global * lambda);
    if (event) {
      ++sc.theoretical;
      if (consumed[i]) {
        ++sc.cannibalized;
        continue;
      }
      if (auto to = m.transition.draw(refs[i]->category_id, ctx.categories, rng)) {
        consumed[i] = 1;
        ++sc.flips;
        emit(shift(boxes[i], m.misclassified, lambda, rng), *to, Origin::Flipped, {refs[i]->id});
        out.fates.emplace_back(refs[i]->id, Fate::Flipped);
        continue;
      }
      --sc.theoretical;  // single-category dataset: nothing to flip to
    }
    if (consumed[i]) continue;
    Rng srng = stream(kShift, i);
    emit(shift(boxes[i], m.localization, lambda, srng), refs[i]->category_id, Origin::Shifted, {refs[i]->id});
    out.fates.emplace_back(refs[i]->id, Fate::Shifted);
  }
  for (const auto& [b, cat] : emitted_fp) emit(b, cat, Origin::FalsePositive, {});

  std::size_t k = 0;
  for (auto& [a, src] : produced) {
    a.id = rater + ":" + image_id + ":" + std::to_string(k++);
    out.sources.emplace_back(a.id, std::move(src));
    out.annotations.push_back(std::move(a));
  }
  return out;
}

}  // namespace

SynthesisResult generate(const Dataset& reference, const NoiseModel& model, const GenerateOptions& opt) {
  if (!(opt.lambda >= 0.0) || !std::isfinite(opt.lambda)) throw NoiseError("lambda must be a finite value >= 0");
  if (opt.raters < 1) throw NoiseError("at least one synthetic rater is required");
  const DatasetIndex idx(reference);
  for (const auto& a : reference.annotations) box_of(a);

  std::vector<std::string> categories;
  for (const auto& c : reference.categories) categories.push_back(c.id);
  std::unordered_map<std::string, std::vector<const Proposal*>> props;
  for (const auto& p : model.proposals) props[p.image_id].push_back(&p);
  const CellContext ctx{reference, model, categories, props, opt.lambda, opt.seed};

  SynthesisResult r;
  r.dataset.images = reference.images;
  r.dataset.categories = reference.categories;
  std::vector<std::string> names;
  for (int k = 0; k < opt.raters; ++k) {
    names.push_back(opt.rater_prefix + "_" + std::to_string(k));
    r.dataset.raters.push_back({names.back(), std::nullopt});
  }
  for (const auto& name : names)
    for (const auto& im : reference.images) r.dataset.assignments.push_back({im.id, name, std::nullopt});

  const std::size_t n_img = reference.images.size();
  std::vector<CellOutput> cells(names.size() * n_img);
  parallel_for(
      cells.size(),
      [&](std::size_t c) {
        const std::size_t ri = c / n_img, ii = c % n_img;
        const auto& im = reference.images[ii];
        std::vector<const Annotation*> refs;
        for (std::size_t a : idx.annotations_of(im.id)) refs.push_back(&reference.annotations[a]);
        cells[c] = synthesize_cell(ctx, ri, names[ri], im.id, refs);
      },
      opt.jobs);

  for (std::size_t c = 0; c < cells.size(); ++c) {
    const std::string& rater = names[c / n_img];
    const std::string& image = reference.images[c % n_img].id;
    auto& cell = cells[c];
    for (auto& a : cell.annotations) r.dataset.annotations.push_back(std::move(a));
    for (auto& [id, s] : cell.sources) r.source.emplace(id, std::move(s));
    for (auto& [ref_id, f] : cell.fates) r.fate[{rater, ref_id}] = f;
    r.log[{rater, image}] = cell.counts;
    r.totals.add(cell.counts);
  }
  r.signal_loss = r.totals.theoretical ? static_cast<double>(r.totals.cannibalized) / r.totals.theoretical : 0.0;
  return r;
}

Dataset combine_raters(const Dataset& a, const Dataset& b) {
  Dataset d = a;
  std::set<std::string> cats;
  for (const auto& c : d.categories) cats.insert(c.id);
  for (const auto& c : b.categories)
    if (cats.insert(c.id).second) d.categories.push_back(c);
  std::set<std::string> images;
  for (const auto& im : d.images) images.insert(im.id);
  for (const auto& im : b.images)
    if (images.insert(im.id).second) d.images.push_back(im);
  d.raters.insert(d.raters.end(), b.raters.begin(), b.raters.end());
  d.assignments.insert(d.assignments.end(), b.assignments.begin(), b.assignments.end());
  d.annotations.insert(d.annotations.end(), b.annotations.begin(), b.annotations.end());
  return d;
}

SynthesisResult generate_collaboration(const Dataset& style_a, const Dataset& style_b, int group_a, int group_b,
                                       const NoiseModel& model, double lambda, std::uint64_t seed, unsigned jobs) {
  SynthesisResult a = generate(style_a, model, {lambda, group_a, derive_seed(seed, {1}), "A", jobs});
  SynthesisResult b = generate(style_b, model, {lambda, group_b, derive_seed(seed, {2}), "B", jobs});
  a.dataset = combine_raters(a.dataset, b.dataset);
  a.source.merge(b.source);
  a.fate.merge(b.fate);
  a.log.merge(b.log);
  a.totals.add(b.totals);
  a.signal_loss = a.totals.theoretical ? static_cast<double>(a.totals.cannibalized) / a.totals.theoretical : 0.0;
  return a;
}

nlohmann::json sources_to_json(const SynthesisResult& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, s] : r.source) j[id] = {{"origin", origin_name(s.origin)}, {"reference_ids", s.reference_ids}};
  return j;
}

}  // namespace kalos
