#include "kalos/reliability.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "kalos/parallel.hpp"

namespace kalos {

std::string consensus_category(const std::vector<std::string>& categories) {
  std::map<std::string, int> count;
  for (const auto& c : categories) ++count[c];
  std::string best;
  int best_n = 0;
  for (const auto& [c, n] : count)
    if (n > best_n) best = c, best_n = n;  // map order gives the lexicographic tie-break
  return best;
}

ReliabilityMatrix build_reliability_matrix(const UnitSet& units, const DatasetIndex& idx) {
  const Dataset& d = idx.dataset();
  ReliabilityMatrix m;
  m.image_id = units.image_id;
  for (const auto& r : d.raters) m.raters.push_back(r.id);
  m.assigned = idx.assigned_raters(units.image_id);

  std::unordered_map<std::string, const Annotation*> by_id;
  for (std::size_t i : idx.annotations_of(units.image_id)) by_id[d.annotations[i].id] = &d.annotations[i];

  const std::size_t R = m.raters.size();
  m.cells.assign(R, {});
  for (const auto& unit : units.units) {
    if (unit.empty()) continue;
    std::vector<const Annotation*> members;
    std::vector<std::string> cats;
    for (const auto& id : unit) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw std::logic_error("unit references unknown annotation " + id);
      if (!idx.assignment(units.image_id, it->second->rater_id))
        throw std::logic_error("annotation " + id + " comes from a rater not assigned to " + units.image_id);
      members.push_back(it->second);
      cats.push_back(it->second->category_id);
    }
    const std::string cons = consensus_category(cats);
    m.units.push_back(unit.front());
    m.consensus.push_back(cons);
    for (std::size_t r = 0; r < R; ++r) {
      const Annotation* own = nullptr;
      for (const Annotation* a : members)
        if (a->rater_id == m.raters[r]) own = a;
      Cell cell;
      if (own) {
        cell = Cell::of(own->category_id);
      } else if (const Assignment* as = idx.assignment(units.image_id, m.raters[r]); as && as->covers(cons)) {
        cell = Cell::no_object();
      }
      m.cells[r].push_back(std::move(cell));
    }
  }
  return m;
}

void CoincidenceCounts::add_column(const std::vector<Value>& values) {
  const std::size_t mu = values.size();
  if (mu < 2) return;
  const double w = 1.0 / static_cast<double>(mu - 1);
  for (std::size_t i = 0; i < mu; ++i)
    for (std::size_t j = 0; j < mu; ++j)
      if (i != j) o[{values[i], values[j]}] += w;
  for (const auto& v : values) n_c[v] += 1.0;
  n += static_cast<double>(mu);
}

void CoincidenceCounts::merge(const CoincidenceCounts& other) {
  for (const auto& [k, v] : other.o) o[k] += v;
  for (const auto& [k, v] : other.n_c) n_c[k] += v;
  n += other.n;
}

namespace {

std::vector<Value> pairable(const ReliabilityMatrix& m, std::size_t u) {
  std::vector<Value> vals;
  for (const auto& row : m.cells) {
    const Cell& c = row[u];
    if (c.kind == Cell::Kind::Category) vals.emplace_back(c.category);
    else if (c.kind == Cell::Kind::NoObject) vals.emplace_back(std::nullopt);
  }
  return vals;
}

}  // namespace

CoincidenceCounts coincidence_counts(const ReliabilityMatrix& m) {
  CoincidenceCounts c;
  for (std::size_t u = 0; u < m.units.size(); ++u) c.add_column(pairable(m, u));
  return c;
}

CoincidenceCounts coincidence_counts(const std::vector<ReliabilityMatrix>& ms) {
  CoincidenceCounts c;
  for (const auto& m : ms) c.merge(coincidence_counts(m));
  return c;
}

std::string_view band_name(Band b) {
  switch (b) {
    case Band::NearPerfect: return "near_perfect";
    case Band::Substantial: return "substantial";
    case Band::Moderate: return "moderate";
    case Band::Weak: return "weak";
    case Band::Systematic: return "systematic_disagreement";
  }
  return "weak";
}

Band band_of(double a) {
  if (a >= 0.8) return Band::NearPerfect;
  if (a >= 0.6) return Band::Substantial;
  if (a >= 0.4) return Band::Moderate;
  if (a >= 0.0) return Band::Weak;
  return Band::Systematic;
}

AlphaScore krippendorff_alpha(const CoincidenceCounts& c) {
  AlphaScore s;
  s.n_pairable = c.n;
  if (c.n < 2.0) return s;
  double diag = 0.0;
  for (const auto& [k, v] : c.o)
    if (k.first == k.second) diag += v;
  double chance = 0.0;
  for (const auto& [k, v] : c.n_c) chance += v * (v - 1.0);
  const double num = (c.n - 1.0) * diag - chance;
  const double den = c.n * (c.n - 1.0) - chance;
  // A single value overall leaves den == 0; that only happens with full agreement.
  if (std::abs(den) <= 1e-12 * c.n * c.n) {
    s.value = 1.0;
    return s;
  }
  s.value = num / den;
  return s;
}

ImageAlpha image_alpha(const ReliabilityMatrix& m) {
  ImageAlpha ia;
  ia.image_id = m.image_id;
  if (m.empty_image() && m.assigned.size() >= 2) {
    ia.alpha.value = 1.0;
    ia.alpha.n_pairable = static_cast<double>(m.assigned.size());
    ia.empty = true;
    return ia;
  }
  ia.alpha = krippendorff_alpha(coincidence_counts(m));
  return ia;
}

MeanAlpha mean_alpha(const std::vector<ReliabilityMatrix>& ms) {
  MeanAlpha r;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : ms) {
    ImageAlpha ia = image_alpha(m);
    if (ia.empty) ++r.empty_count;
    if (ia.alpha.value) sum += *ia.alpha.value, ++n;
    else ++r.undefined_count;
    r.images.push_back(std::move(ia));
  }
  if (n > 0) r.mean = sum / static_cast<double>(n);
  return r;
}

AlphaScore global_alpha(const std::vector<ReliabilityMatrix>& ms) {
  CoincidenceCounts c;
  for (const auto& m : ms) {
    if (m.empty_image()) c.add_column(std::vector<Value>(m.assigned.size(), std::nullopt));
    else c.merge(coincidence_counts(m));
  }
  return krippendorff_alpha(c);
}

PipelineResult run_pipeline(const Dataset& d, const MatchConfig& c, unsigned jobs) {
  PipelineResult r;
  r.config = c;
  r.units = correspond(d, c, jobs);
  const DatasetIndex idx(d);
  r.matrices.resize(r.units.size());
  parallel_for(
      r.units.size(), [&](std::size_t i) { r.matrices[i] = build_reliability_matrix(r.units[i], idx); }, jobs);
  r.mean = mean_alpha(r.matrices);
  r.global = global_alpha(r.matrices);
  return r;
}

}  // namespace kalos
