#include "kalos/validation.hpp"

#include <algorithm>
#include <set>

#include "kalos/parallel.hpp"
#include "kalos/reliability.hpp"

namespace kalos {

TruthMap TruthMap::from_synthesis(const SynthesisResult& r) {
  TruthMap t;
  for (const auto& a : r.dataset.annotations) {
    t.rater[a.id] = a.rater_id;
    t.image[a.id] = a.image_id;
    const auto it = r.source.find(a.id);
    if (it == r.source.end()) continue;
    switch (it->second.origin) {
      case Origin::Shifted:
      case Origin::Flipped:
        t.known[a.id] = it->second.reference_ids.at(0);
        break;
      case Origin::FalsePositive:
        t.known[a.id] = std::nullopt;
        break;
      default:
        break;
    }
  }
  return t;
}

bool TruthMap::true_pair(const std::string& a, const std::string& b) const {
  const auto x = known.find(a), y = known.find(b);
  if (x == known.end() || y == known.end() || !x->second || !y->second) return false;
  return *x->second == *y->second && rater.at(a) != rater.at(b);
}

namespace {

struct EvalPair {
  std::string a, b;
  bool predicted = false;
  bool truth = false;
};

// Cross-rater pairs on the same image with at least one known member, in a
// deterministic order.
std::vector<EvalPair> evaluation_pairs(const std::vector<UnitSet>& pred, const TruthMap& truth) {
  const auto labels = partition_labels(pred);
  std::map<std::string, std::vector<std::string>> by_image;
  for (const auto& [id, im] : truth.image) by_image[im].push_back(id);
  std::vector<EvalPair> out;
  for (const auto& [im, ids] : by_image)
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = i + 1; j < ids.size(); ++j) {
        const auto& a = ids[i];
        const auto& b = ids[j];
        if (truth.rater.at(a) == truth.rater.at(b)) continue;
        if (!truth.is_known(a) && !truth.is_known(b)) continue;
        const auto la = labels.find(a), lb = labels.find(b);
        const bool p = la != labels.end() && lb != labels.end() && la->second == lb->second;
        out.push_back({a, b, p, truth.true_pair(a, b)});
      }
  return out;
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::map<std::string, std::string> partition_labels(const std::vector<UnitSet>& units) {
  std::map<std::string, std::string> out;
  for (const auto& us : units)
    for (std::size_t u = 0; u < us.units.size(); ++u)
      for (const auto& id : us.units[u]) out[id] = us.image_id + "/" + std::to_string(u);
  return out;
}

std::optional<double> filtered_rand_index(const std::vector<UnitSet>& pred, const TruthMap& truth) {
  const auto pairs = evaluation_pairs(pred, truth);
  const auto agree = std::count_if(pairs.begin(), pairs.end(), [](const EvalPair& p) { return p.predicted == p.truth; });
  return ratio(static_cast<std::size_t>(agree), pairs.size());
}

std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::TruePositive: return "tp";
    case Outcome::FalsePositive: return "fp";
    case Outcome::MissedOpportunity: return "missed_opportunity";
    case Outcome::CuckooEgg: return "cuckoo_egg";
  }
  return "?";
}

PairMetrics pair_metrics(const std::vector<UnitSet>& pred, const TruthMap& truth, const Dataset* d, DistanceMetric m) {
  std::map<std::string, const Annotation*> geom;
  if (d)
    for (const auto& a : d->annotations) geom[a.id] = &a;
  auto d_loc = [&](const std::string& a, const std::string& b) -> std::optional<double> {
    const auto x = geom.find(a), y = geom.find(b);
    if (x == geom.end() || y == geom.end()) return std::nullopt;
    return distance(x->second->geometry, y->second->geometry, m);
  };

  PairMetrics pm;
  const auto pairs = evaluation_pairs(pred, truth);
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> false_pairs_of;
  for (const auto& p : pairs) {
    if (p.predicted && p.truth) {
      ++pm.tp;
      pm.outcomes.push_back({Outcome::TruePositive, {p.a, p.b}, std::nullopt, d_loc(p.a, p.b)});
    } else if (p.predicted) {
      ++pm.fp;
      pm.outcomes.push_back({Outcome::FalsePositive, {p.a, p.b}, std::nullopt, d_loc(p.a, p.b)});
      false_pairs_of[p.a].push_back({p.a, p.b});
      false_pairs_of[p.b].push_back({p.a, p.b});
    }
  }
  for (const auto& p : pairs) {
    if (p.predicted || !p.truth) continue;
    ++pm.missed;
    pm.outcomes.push_back({Outcome::MissedOpportunity, {p.a, p.b}, std::nullopt, d_loc(p.a, p.b)});
    // A false pair sharing a member lives in that member's unit by construction.
    for (const auto* id : {&p.a, &p.b}) {
      const auto it = false_pairs_of.find(*id);
      if (it == false_pairs_of.end()) continue;
      ++pm.cuckoo;
      pm.outcomes.push_back({Outcome::CuckooEgg, {p.a, p.b}, it->second.front(), d_loc(p.a, p.b)});
      break;
    }
  }
  pm.precision = ratio(pm.tp, pm.tp + pm.fp);
  pm.recall = ratio(pm.tp, pm.tp + pm.missed);
  if (pm.precision && pm.recall)
    pm.f1 = *pm.precision + *pm.recall > 0.0 ? 2.0 * *pm.precision * *pm.recall / (*pm.precision + *pm.recall) : 0.0;
  return pm;
}

double adjusted_rand_index(const std::map<std::string, std::string>& x, const std::map<std::string, std::string>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("partitions cover different item counts");
  auto c2 = [](double n) { return n * (n - 1.0) / 2.0; };
  std::map<std::pair<std::string, std::string>, double> table;
  std::map<std::string, double> rows, cols;
  for (const auto& [item, lx] : x) {
    const auto it = y.find(item);
    if (it == y.end()) throw std::invalid_argument("partitions cover different items");
    table[{lx, it->second}] += 1;
    rows[lx] += 1;
    cols[it->second] += 1;
  }
  double index = 0, sa = 0, sb = 0;
  for (const auto& [k, n] : table) index += c2(n);
  for (const auto& [k, n] : rows) sa += c2(n);
  for (const auto& [k, n] : cols) sb += c2(n);
  const double total = c2(static_cast<double>(x.size()));
  const double expected = total > 0 ? sa * sb / total : 0.0;
  const double max_index = (sa + sb) / 2.0;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

StabilityResult permutation_stability(const Dataset& d, const MatchConfig& c, int n_perms, std::uint64_t seed,
                                      unsigned jobs) {
  if (n_perms < 2) throw std::invalid_argument("permutation stability needs at least two permutations");
  const auto base = partition_labels(correspond(d, c, jobs));
  StabilityResult r;
  r.ari.resize(static_cast<std::size_t>(n_perms));
  parallel_for(
      r.ari.size(),
      [&](std::size_t k) {
        Rng rng(derive_seed(seed, {k}));
        Dataset p = d;
        rng.shuffle(p.annotations);
        rng.shuffle(p.raters);
        rng.shuffle(p.assignments);
        r.ari[k] = adjusted_rand_index(base, partition_labels(correspond(p, c, 1)));
      },
      jobs);
  r.min = *std::min_element(r.ari.begin(), r.ari.end());
  r.mean = 0.0;
  for (double v : r.ari) r.mean += v;
  r.mean /= static_cast<double>(r.ari.size());
  return r;
}

ExperimentReport run_suite(const Dataset& reference, const NoiseModel& model, const SuiteOptions& opt) {
  struct Cell {
    std::size_t lambda;
    int raters;
    int seed_index;
  };
  std::vector<Cell> cells;
  for (std::size_t l = 0; l < opt.lambdas.size(); ++l)
    for (int r : opt.rater_counts)
      for (int s = 0; s < opt.seeds; ++s) cells.push_back({l, r, s});
  const std::size_t per_cell = opt.solvers.size() * opt.costs.size();

  ExperimentReport rep;
  rep.rows.resize(cells.size() * per_cell);
  parallel_for(
      cells.size(),
      [&](std::size_t ci) {
        const Cell& cell = cells[ci];
        SuiteRow* rows = &rep.rows[ci * per_cell];
        std::size_t k = 0;
        for (Solver s : opt.solvers)
          for (CostFunction f : opt.costs) {
            rows[k].lambda = opt.lambdas[cell.lambda];
            rows[k].raters = cell.raters;
            rows[k].solver = s;
            rows[k].cost = f;
            rows[k].seed_index = cell.seed_index;
            ++k;
          }
        try {
          GenerateOptions g;
          g.lambda = opt.lambdas[cell.lambda];
          g.raters = cell.raters;
          // Common random numbers: rater k's stream depends only on the seed
          // index, so rater sweeps are nested and lambda sweeps are paired.
          g.seed = derive_seed(opt.seed, {static_cast<std::uint64_t>(cell.seed_index)});
          g.jobs = 1;
          const SynthesisResult syn = generate(reference, model, g);
          const TruthMap truth = TruthMap::from_synthesis(syn);
          for (std::size_t i = 0; i < per_cell; ++i) {
            SuiteRow& row = rows[i];
            try {
              MatchConfig mc;
              mc.metric = opt.metric;
              mc.tau = opt.tau;
              mc.solver = row.solver;
              mc.cost = row.cost;
              const PipelineResult pr = run_pipeline(syn.dataset, mc, 1);
              row.rand_index = filtered_rand_index(pr.units, truth);
              row.metrics = pair_metrics(pr.units, truth);
              row.metrics.outcomes.clear();
              row.mean_alpha = pr.mean.mean;
              row.global_alpha = pr.global.value;
            } catch (const std::exception& e) {
              row.error = e.what();
            }
          }
        } catch (const std::exception& e) {
          for (std::size_t i = 0; i < per_cell; ++i) rows[i].error = e.what();
        }
      },
      opt.jobs);

  std::vector<std::pair<std::size_t, int>> ccells;
  for (std::size_t i = 0; i < opt.collaboration.size(); ++i)
    for (int s = 0; s < opt.seeds; ++s) ccells.push_back({i, s});
  rep.collaboration.resize(ccells.size());
  parallel_for(
      ccells.size(),
      [&](std::size_t ci) {
        const auto [split, s] = ccells[ci];
        CollaborationRow& row = rep.collaboration[ci];
        row.group_a = opt.collaboration[split].first;
        row.group_b = opt.collaboration[split].second;
        row.seed_index = s;
        try {
          // The second style is shared by every split of a seed, so splits are compared on equal footing.
          GenerateOptions g;
          g.lambda = opt.style_lambda;
          g.raters = 1;
          g.seed = derive_seed(opt.seed, {0x5747, static_cast<std::uint64_t>(s)});
          g.jobs = 1;
          const Dataset style_b = generate(reference, model, g).dataset;
          const auto syn = generate_collaboration(reference, style_b, row.group_a, row.group_b, model,
                                                  opt.collaboration_lambda,
                                                  derive_seed(opt.seed, {0xC011, static_cast<std::uint64_t>(s)}), 1);
          MatchConfig mc;
          mc.metric = opt.metric;
          mc.tau = opt.tau;
          row.mean_alpha = run_pipeline(syn.dataset, mc, 1).mean.mean;
        } catch (const std::exception& e) {
          row.error = e.what();
        }
      },
      opt.jobs);
  return rep;
}

}  // namespace kalos
