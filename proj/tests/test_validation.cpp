#include <catch_amalgamated.hpp>

#include <set>
#include <tuple>

#include "fixtures.hpp"
#include "kalos/validation.hpp"

using namespace kalos;
using namespace kalos::testing;
using Catch::Matchers::WithinAbs;

namespace {

using Units = std::vector<std::vector<std::string>>;

// Hand-made synthesis: every annotation lives on image "i" and sits on its own
// spot so geometry never matters.
SynthesisResult synthesis(const std::vector<std::tuple<std::string, std::string, Origin, std::string>>& anns) {
  SynthesisResult r;
  DatasetBuilder b;
  b.image("i").category("c");
  std::set<std::string> raters;
  double x = 0.0;
  for (const auto& [id, rater, origin, ref] : anns) {
    if (raters.insert(rater).second) b.rater(rater).assign("i", rater);
    b.box(id, "i", rater, "c", x, 0.1, 0.05, 0.05);
    x += 0.06;
    r.source[id] = {origin, ref.empty() ? std::vector<std::string>{} : std::vector<std::string>{ref}};
  }
  r.dataset = b.build();
  return r;
}

std::vector<UnitSet> units(const Units& u) { return {UnitSet{"i", u}}; }

// Prediction that reproduces the truth: known annotations grouped by reference,
// everything else alone.
std::vector<UnitSet> truth_units(const SynthesisResult& syn) {
  const TruthMap t = TruthMap::from_synthesis(syn);
  std::map<std::string, std::map<std::string, std::vector<std::string>>> groups;  // image -> key -> ids
  for (const auto& a : syn.dataset.annotations) {
    const auto it = t.known.find(a.id);
    const std::string key = it != t.known.end() && it->second ? "r:" + *it->second : "s:" + a.id;
    groups[a.image_id][key].push_back(a.id);
  }
  std::vector<UnitSet> out;
  for (const auto& im : syn.dataset.images) {
    UnitSet u{im.id, {}};
    for (auto& [k, ids] : groups[im.id]) u.units.push_back(ids);
    canonicalize(u);
    out.push_back(u);
  }
  return out;
}

SynthesisResult noisy(std::uint64_t seed, double lambda, int raters, int images = 15) {
  GenerateOptions g;
  g.lambda = lambda;
  g.raters = raters;
  g.seed = seed;
  return generate(synthetic_reference(seed, images, 6, 3), default_noise_model(), g);
}

}  // namespace

TEST_CASE("filtered rand index", "[validation]") {
  const auto syn = synthesis({{"a1", "A", Origin::Shifted, "r1"},
                              {"b1", "B", Origin::Shifted, "r1"},
                              {"b2", "B", Origin::FalsePositive, ""}});
  const TruthMap t = TruthMap::from_synthesis(syn);
  CHECK(*filtered_rand_index(units({{"a1", "b1"}, {"b2"}}), t) == 1.0);
  // One true pair (a1, b1) and one true non-pair (a1, b2): singletons agree on 1 of 2.
  CHECK(*filtered_rand_index(units({{"a1"}, {"b1"}, {"b2"}}), t) == 0.5);

  const auto unknown = synthesis({{"f1", "A", Origin::Fragment, "r1"}, {"f2", "B", Origin::Merged, "r1"}});
  CHECK_FALSE(filtered_rand_index(units({{"f1", "f2"}}), TruthMap::from_synthesis(unknown)).has_value());
}

TEST_CASE("filtered rand index is one when the prediction reproduces the truth", "[validation][property]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto syn = noisy(seed, 0.5 * static_cast<double>(seed), 3, 6);
    CHECK(*filtered_rand_index(truth_units(syn), TruthMap::from_synthesis(syn)) == 1.0);
  }
}

TEST_CASE("pair metrics", "[validation]") {
  SECTION("perfect prediction") {
    const auto syn = synthesis({{"a", "A", Origin::Shifted, "r"}, {"b", "B", Origin::Flipped, "r"}});
    const auto m = pair_metrics(units({{"a", "b"}}), TruthMap::from_synthesis(syn), &syn.dataset);
    CHECK(m.tp == 1);
    CHECK(m.fp + m.missed + m.cuckoo == 0);
    CHECK(*m.precision == 1.0);
    CHECK(*m.recall == 1.0);
    CHECK(*m.f1 == 1.0);
    REQUIRE(m.outcomes.size() == 1);
    CHECK(m.outcomes[0].variant == Outcome::TruePositive);
    CHECK(m.outcomes[0].d_loc.has_value());
  }
  SECTION("split true pair") {
    const auto syn = synthesis({{"a", "A", Origin::Shifted, "r"}, {"b", "B", Origin::Shifted, "r"}});
    const auto m = pair_metrics(units({{"a"}, {"b"}}), TruthMap::from_synthesis(syn));
    CHECK(m.missed == 1);
    CHECK(m.cuckoo == 0);
    CHECK(*m.recall == 0.0);
    CHECK_FALSE(m.precision.has_value());
  }
  SECTION("displaced partner is a cuckoo egg") {
    const auto syn = synthesis({{"a", "A", Origin::Shifted, "r"},
                                {"b", "B", Origin::FalsePositive, ""},
                                {"c", "C", Origin::Shifted, "r"}});
    const auto m = pair_metrics(units({{"a", "b"}, {"c"}}), TruthMap::from_synthesis(syn));
    CHECK(m.fp == 1);
    CHECK(m.missed == 1);
    CHECK(m.cuckoo == 1);
    const auto egg = std::find_if(m.outcomes.begin(), m.outcomes.end(),
                                  [](const PairOutcome& o) { return o.variant == Outcome::CuckooEgg; });
    REQUIRE(egg != m.outcomes.end());
    CHECK(egg->pair == std::pair<std::string, std::string>{"a", "c"});
    CHECK(*egg->displacing == std::pair<std::string, std::string>{"a", "b"});
  }
}

TEST_CASE("outcome conservation and f1 identity on generated data", "[validation][property]") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto syn = noisy(seed, 2.0, 3);
    const TruthMap t = TruthMap::from_synthesis(syn);
    const std::size_t truth_pairs = pair_metrics(truth_units(syn), t).tp;
    for (Solver s : {Solver::Greedy, Solver::Shm, Solver::Ahc})
      for (CostFunction f : {CostFunction::Soft, CostFunction::Neg}) {
        MatchConfig c;
        c.solver = s;
        c.cost = f;
        const auto m = pair_metrics(correspond(syn.dataset, c), t, &syn.dataset);
        CHECK(m.tp + m.missed == truth_pairs);
        CHECK_THAT(*m.f1, WithinAbs(2 * *m.precision * *m.recall / (*m.precision + *m.recall), 1e-15));
        CHECK(m.cuckoo <= m.missed);
      }
  }
}

TEST_CASE("adjusted rand index", "[validation]") {
  const std::map<std::string, std::string> x{{"a", "0"}, {"b", "0"}, {"c", "1"}, {"d", "1"}};
  const std::map<std::string, std::string> y{{"a", "0"}, {"b", "0"}, {"c", "1"}, {"d", "2"}};
  const std::map<std::string, std::string> single{{"a", "0"}, {"b", "1"}, {"c", "2"}, {"d", "3"}};
  CHECK(adjusted_rand_index(x, x) == 1.0);
  // Contingency oracle: index 1, expected 1/3, max 3/2.
  CHECK_THAT(adjusted_rand_index(x, y), WithinAbs(4.0 / 7.0, 1e-15));
  CHECK(adjusted_rand_index(x, single) <= 0.0);
  CHECK(adjusted_rand_index(single, single) == 1.0);
  CHECK_THROWS(adjusted_rand_index(x, {{"a", "0"}}));
}

TEST_CASE("greedy is permutation stable", "[validation]") {
  const auto syn = noisy(9, 1.5, 4, 10);
  const auto r = permutation_stability(syn.dataset, {}, 10, 3);
  REQUIRE(r.ari.size() == 10);
  for (double v : r.ari) CHECK(v == 1.0);
  CHECK(r.min == 1.0);
  CHECK_THROWS(permutation_stability(syn.dataset, {}, 1, 3));
}

TEST_CASE("suite", "[validation]") {
  const Dataset ref = synthetic_reference(11, 10, 5, 3);
  SuiteOptions o;
  o.lambdas = {0.5, 2};
  o.rater_counts = {2, 3};
  o.solvers = {Solver::Greedy, Solver::Ahc};
  o.costs = {CostFunction::Soft, CostFunction::Neg};
  o.seeds = 2;
  o.collaboration = {{2, 1}, {1, 2}};
  const auto r = run_suite(ref, default_noise_model(), o);
  CHECK(r.rows.size() == 2 * 2 * 2 * 2 * 2);
  CHECK(r.collaboration.size() == 4);
  for (const auto& row : r.rows) {
    CHECK_FALSE(row.error.has_value());
    CHECK(row.metrics.outcomes.empty());
  }

  SECTION("deterministic across worker counts") {
    SuiteOptions p = o;
    p.jobs = 3;
    const auto q = run_suite(ref, default_noise_model(), p);
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      CHECK(q.rows[i].mean_alpha == r.rows[i].mean_alpha);
      CHECK(q.rows[i].rand_index == r.rows[i].rand_index);
      CHECK(q.rows[i].metrics.f1 == r.rows[i].metrics.f1);
    }
    for (std::size_t i = 0; i < r.collaboration.size(); ++i)
      CHECK(q.collaboration[i].mean_alpha == r.collaboration[i].mean_alpha);
  }
  SECTION("a failing cell does not abort the sweep") {
    SuiteOptions p = o;
    p.lambdas = {1, -1};
    const auto q = run_suite(ref, default_noise_model(), p);
    for (const auto& row : q.rows) CHECK(row.error.has_value() == (row.lambda < 0));
  }
}
