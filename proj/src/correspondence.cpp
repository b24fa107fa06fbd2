#include "kalos/correspondence.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>

#include "kalos/hungarian.hpp"
#include "kalos/parallel.hpp"

namespace kalos {

std::string_view cost_function_name(CostFunction f) { return f == CostFunction::Soft ? "soft" : "neg"; }

std::optional<CostFunction> parse_cost_function(std::string_view s) {
  if (s == "soft") return CostFunction::Soft;
  if (s == "neg") return CostFunction::Neg;
  return std::nullopt;
}

std::string_view solver_name(Solver s) {
  switch (s) {
    case Solver::Greedy: return "greedy";
    case Solver::Shm: return "shm";
    case Solver::Ahc: return "ahc";
  }
  return "greedy";
}

std::optional<Solver> parse_solver(std::string_view s) {
  for (Solver v : {Solver::Greedy, Solver::Shm, Solver::Ahc})
    if (solver_name(v) == s) return v;
  return std::nullopt;
}

double pair_cost(double d_loc, int d_cls, CostFunction f) {
  if (f == CostFunction::Neg) return -d_loc;
  return d_cls == 0 ? -(1.0 - d_loc) - 1.0 : -(1.0 - d_loc);
}

std::string config_notation(const MatchConfig& c) {
  char tau[32];
  std::snprintf(tau, sizeof tau, "%g", c.tau);
  return "KaLOS(d=" + std::string(metric_name(c.metric)) + ", tau=" + tau + ", S=" + std::string(solver_name(c.solver)) +
         ", psi=" + std::string(cost_function_name(c.cost)) + ")";
}

namespace {

using Key = std::tuple<std::string, std::string, std::string, std::string>;

Key content_key(const Annotation& a) { return {canonical_string(a.geometry), a.category_id, a.rater_id, a.id}; }

std::vector<Key> keys_of(std::span<const Annotation> anns) {
  std::vector<Key> k;
  k.reserve(anns.size());
  for (const auto& a : anns) k.push_back(content_key(a));
  return k;
}

void sort_pairs(std::vector<CandidatePair>& pairs, const std::vector<Key>& keys) {
  std::sort(pairs.begin(), pairs.end(), [&](const CandidatePair& x, const CandidatePair& y) {
    if (x.cost != y.cost) return x.cost < y.cost;
    if (x.d_loc != y.d_loc) return x.d_loc < y.d_loc;
    if (keys[x.a] != keys[y.a]) return keys[x.a] < keys[y.a];
    return keys[x.b] < keys[y.b];
  });
}

std::vector<CandidatePair> candidates_with_keys(std::span<const Annotation> anns, const std::vector<Key>& keys,
                                                DistanceMetric m, double tau, CostFunction f) {
  std::vector<CandidatePair> out;
  for (std::size_t i = 0; i < anns.size(); ++i)
    for (std::size_t j = i + 1; j < anns.size(); ++j) {
      if (anns[i].rater_id == anns[j].rater_id) continue;
      const double d = distance(anns[i].geometry, anns[j].geometry, m);
      if (d > tau) continue;
      const int cls = anns[i].category_id == anns[j].category_id ? 0 : 1;
      CandidatePair p{i, j, d, cls, pair_cost(d, cls, f)};
      if (keys[j] < keys[i]) std::swap(p.a, p.b);
      out.push_back(p);
    }
  sort_pairs(out, keys);
  return out;
}

UnitSet units_from_groups(std::span<const Annotation> anns, const std::vector<std::vector<std::size_t>>& groups) {
  UnitSet u;
  if (!anns.empty()) u.image_id = anns.front().image_id;
  for (const auto& g : groups) {
    if (g.empty()) continue;
    std::vector<std::string> ids;
    for (std::size_t i : g) ids.push_back(anns[i].id);
    u.units.push_back(std::move(ids));
  }
  canonicalize(u);
  return u;
}

struct DisjointSets {
  std::vector<std::size_t> parent;
  std::vector<std::set<std::string>> raters;

  explicit DisjointSets(std::span<const Annotation> anns) : parent(anns.size()), raters(anns.size()) {
    std::iota(parent.begin(), parent.end(), 0);
    for (std::size_t i = 0; i < anns.size(); ++i) raters[i].insert(anns[i].rater_id);
  }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  bool try_merge(std::size_t a, std::size_t b) {
    a = find(a), b = find(b);
    if (a == b) return false;
    for (const auto& r : raters[b])
      if (raters[a].count(r)) return false;
    if (a > b) std::swap(a, b);
    parent[b] = a;
    raters[a].insert(raters[b].begin(), raters[b].end());
    raters[b].clear();
    return true;
  }
  std::vector<std::vector<std::size_t>> groups() {
    std::vector<std::vector<std::size_t>> g(parent.size());
    for (std::size_t i = 0; i < parent.size(); ++i) g[find(i)].push_back(i);
    return g;
  }
};

}  // namespace

bool content_less(const Annotation& x, const Annotation& y) { return content_key(x) < content_key(y); }

std::vector<CandidatePair> build_candidates(std::span<const Annotation> anns, DistanceMetric m, double tau,
                                            CostFunction f) {
  return candidates_with_keys(anns, keys_of(anns), m, tau, f);
}

void canonicalize(UnitSet& u) {
  for (auto& unit : u.units) std::sort(unit.begin(), unit.end());
  std::sort(u.units.begin(), u.units.end());
}

UnitSet solve_greedy(std::span<const Annotation> anns, std::span<const CandidatePair> pairs) {
  std::vector<CandidatePair> sorted(pairs.begin(), pairs.end());
  sort_pairs(sorted, keys_of(anns));
  DisjointSets ds(anns);
  for (const auto& p : sorted) ds.try_merge(p.a, p.b);
  return units_from_groups(anns, ds.groups());
}

UnitSet solve_shm(std::span<const Annotation> anns, DistanceMetric m, double tau, CostFunction f) {
  // Raters in sorted id order; each rater's annotations in content order.
  std::map<std::string, std::vector<std::size_t>> by_rater;
  for (std::size_t i = 0; i < anns.size(); ++i) by_rater[anns[i].rater_id].push_back(i);
  const auto keys = keys_of(anns);
  for (auto& [r, v] : by_rater) std::sort(v.begin(), v.end(), [&](std::size_t x, std::size_t y) { return keys[x] < keys[y]; });

  std::vector<std::vector<std::size_t>> units;
  for (const auto& [rater, members] : by_rater) {
    if (units.empty()) {
      for (std::size_t i : members) units.push_back({i});
      continue;
    }
    const std::size_t U = units.size(), A = members.size();
    std::vector<std::vector<double>> cost(U, std::vector<double>(A));
    std::vector<std::vector<char>> ok(U, std::vector<char>(A, 0));
    for (std::size_t u = 0; u < U; ++u)
      for (std::size_t a = 0; a < A; ++a) {
        double sum_d = 0.0, sum_c = 0.0;
        for (std::size_t w : units[u]) {
          const double d = distance(anns[w].geometry, anns[members[a]].geometry, m);
          sum_d += d;
          sum_c += pair_cost(d, anns[w].category_id == anns[members[a]].category_id ? 0 : 1, f);
        }
        const double k = static_cast<double>(units[u].size());
        ok[u][a] = sum_d / k <= tau;
        cost[u][a] = sum_c / k;
      }
    // Square matrix; the offset makes any admissible match beat leaving both
    // sides unmatched, so cardinality is maximised before total cost.
    const std::size_t n = std::max(U, A);
    const double offset = 4.0 * static_cast<double>(n + 1);
    std::vector<std::vector<double>> sq(n, std::vector<double>(n, 0.0));
    for (std::size_t u = 0; u < U; ++u)
      for (std::size_t a = 0; a < A; ++a)
        if (ok[u][a]) sq[u][a] = cost[u][a] - offset;
    const auto assign = hungarian(sq);
    std::vector<char> placed(A, 0);
    for (std::size_t u = 0; u < U; ++u) {
      const int a = assign[u];
      if (a >= 0 && static_cast<std::size_t>(a) < A && ok[u][a]) {
        units[u].push_back(members[a]);
        placed[a] = 1;
      }
    }
    for (std::size_t a = 0; a < A; ++a)
      if (!placed[a]) units.push_back({members[a]});
  }
  return units_from_groups(anns, units);
}

UnitSet solve_ahc(std::span<const Annotation> anns, std::span<const CandidatePair> pairs, double tau, CostFunction f) {
  const std::size_t n = anns.size();
  const auto keys = keys_of(anns);
  // Dense edge tables; absent edges are d_loc = 1.
  std::vector<std::vector<double>> dloc(n, std::vector<double>(n, 1.0));
  std::vector<std::vector<char>> edge(n, std::vector<char>(n, 0));
  for (const auto& p : pairs) {
    dloc[p.a][p.b] = dloc[p.b][p.a] = p.d_loc;
    edge[p.a][p.b] = edge[p.b][p.a] = 1;
  }
  auto cost_of = [&](std::size_t i, std::size_t j) {
    return pair_cost(dloc[i][j], anns[i].category_id == anns[j].category_id ? 0 : 1, f);
  };

  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
  auto min_key = [&](const std::vector<std::size_t>& c) {
    std::size_t best = c.front();
    for (std::size_t i : c)
      if (keys[i] < keys[best]) best = i;
    return best;
  };

  while (true) {
    struct Best {
      double cost, d;
      std::size_t p, q;
    };
    std::optional<Best> best;
    for (std::size_t p = 0; p < clusters.size(); ++p)
      for (std::size_t q = p + 1; q < clusters.size(); ++q) {
        bool linked = false, clash = false;
        double sd = 0.0, sc = 0.0;
        for (std::size_t i : clusters[p]) {
          for (std::size_t j : clusters[q]) {
            if (anns[i].rater_id == anns[j].rater_id) clash = true;
            linked = linked || edge[i][j];
            sd += dloc[i][j];
            sc += cost_of(i, j);
          }
        }
        if (clash || !linked) continue;
        const double k = static_cast<double>(clusters[p].size() * clusters[q].size());
        const double avg_d = sd / k, avg_c = sc / k;
        if (avg_d > tau) continue;
        bool better = !best || avg_c < best->cost || (avg_c == best->cost && avg_d < best->d);
        if (best && avg_c == best->cost && avg_d == best->d) {
          // Content tie-break on the smaller members of both clusters.
          auto lo_hi = [&](std::size_t x, std::size_t y) {
            auto a = keys[min_key(clusters[x])], b = keys[min_key(clusters[y])];
            return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
          };
          better = lo_hi(p, q) < lo_hi(best->p, best->q);
        }
        if (better) best = Best{avg_c, avg_d, p, q};
      }
    if (!best) break;
    auto& into = clusters[best->p];
    into.insert(into.end(), clusters[best->q].begin(), clusters[best->q].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(best->q));
  }
  return units_from_groups(anns, clusters);
}

UnitSet solve(std::span<const Annotation> anns, const MatchConfig& c) {
  UnitSet u;
  switch (c.solver) {
    case Solver::Greedy: u = solve_greedy(anns, build_candidates(anns, c.metric, c.tau, c.cost)); break;
    case Solver::Shm: u = solve_shm(anns, c.metric, c.tau, c.cost); break;
    case Solver::Ahc: u = solve_ahc(anns, build_candidates(anns, c.metric, c.tau, c.cost), c.tau, c.cost); break;
  }
  check_unit_set(u, anns);
  return u;
}

std::vector<UnitSet> correspond(const Dataset& d, const MatchConfig& c, unsigned jobs) {
  if (!(c.tau > 0.0 && c.tau <= 1.0)) throw std::invalid_argument("tau must lie in (0, 1]");
  const DatasetIndex idx(d);
  std::vector<UnitSet> out(d.images.size());
  parallel_for(
      d.images.size(),
      [&](std::size_t i) {
        std::vector<Annotation> anns;
        for (std::size_t k : idx.annotations_of(d.images[i].id)) anns.push_back(d.annotations[k]);
        out[i] = solve(anns, c);
        out[i].image_id = d.images[i].id;
      },
      jobs);
  return out;
}

void check_unit_set(const UnitSet& u, std::span<const Annotation> anns) {
  std::map<std::string, const Annotation*> by_id;
  for (const auto& a : anns) by_id[a.id] = &a;
  std::set<std::string> seen;
  for (const auto& unit : u.units) {
    std::set<std::string> raters;
    for (const auto& id : unit) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw std::logic_error("unit references unknown annotation " + id);
      if (!seen.insert(id).second) throw std::logic_error("annotation " + id + " appears in two units");
      if (!raters.insert(it->second->rater_id).second)
        throw std::logic_error("unit holds two annotations of rater " + it->second->rater_id);
    }
  }
  if (seen.size() != anns.size()) throw std::logic_error("units do not cover every annotation");
}

}  // namespace kalos
