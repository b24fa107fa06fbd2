#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kalos/dataset.hpp"
#include "kalos/geometry.hpp"

namespace kalos {

enum class CostFunction { Soft, Neg };
enum class Solver { Greedy, Shm, Ahc };

std::string_view cost_function_name(CostFunction f);  // "soft" | "neg"
std::optional<CostFunction> parse_cost_function(std::string_view s);
std::string_view solver_name(Solver s);  // "greedy" | "shm" | "ahc"
std::optional<Solver> parse_solver(std::string_view s);

/// Soft: -(1 - d_loc) - 1 for equal categories, -(1 - d_loc) otherwise.
/// Neg: -d_loc. Lower is better for every solver.
double pair_cost(double d_loc, int d_cls, CostFunction f);

struct MatchConfig {
  DistanceMetric metric = DistanceMetric::BoxIou;
  double tau = 0.5;
  CostFunction cost = CostFunction::Soft;
  Solver solver = Solver::Greedy;
};

/// "KaLOS(d=box_iou, tau=0.5, S=greedy, psi=soft)".
std::string config_notation(const MatchConfig& c);

/// A cross-rater pair with d_loc <= tau. `a` and `b` index the annotation span
/// the pair was built from; `a` is the content-wise smaller annotation.
struct CandidatePair {
  std::size_t a = 0;
  std::size_t b = 0;
  double d_loc = 0.0;
  int d_cls = 0;
  double cost = 0.0;
};

/// Canonical content key of an annotation: geometry serialization, category,
/// rater, id. All solver tie-breaks use it instead of input positions.
bool content_less(const Annotation& x, const Annotation& y);

/// Every cross-rater pair with d_loc <= tau, sorted by (cost, d_loc, content
/// of the two members).
std::vector<CandidatePair> build_candidates(std::span<const Annotation> anns, DistanceMetric m, double tau,
                                            CostFunction f);

/// Disjoint units of annotation ids. Canonical form: ids sorted inside each
/// unit, units sorted lexicographically.
struct UnitSet {
  std::string image_id;
  std::vector<std::vector<std::string>> units;

  bool operator==(const UnitSet&) const = default;
};
void canonicalize(UnitSet& u);

UnitSet solve_greedy(std::span<const Annotation> anns, std::span<const CandidatePair> pairs);
UnitSet solve_shm(std::span<const Annotation> anns, DistanceMetric m, double tau, CostFunction f);
/// Average linkage over the candidate graph; absent edges count as d_loc = 1.
UnitSet solve_ahc(std::span<const Annotation> anns, std::span<const CandidatePair> pairs, double tau, CostFunction f);

/// Runs the configured solver on one image's annotations.
UnitSet solve(std::span<const Annotation> anns, const MatchConfig& c);

/// Per-image solves in dataset image order (parallel across images).
std::vector<UnitSet> correspond(const Dataset& d, const MatchConfig& c, unsigned jobs = 0);

/// Throws std::logic_error unless the units are a disjoint cover of `anns`
/// with at most one annotation per rater per unit.
void check_unit_set(const UnitSet& u, std::span<const Annotation> anns);

}  // namespace kalos
