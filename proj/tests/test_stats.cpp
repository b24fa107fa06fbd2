#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "kalos/random.hpp"
#include "kalos/stats.hpp"

using namespace kalos;
using namespace kalos::stats;
using Catch::Approx;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<double> draw(std::size_t n, std::uint64_t seed, auto&& gen) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = gen(rng);
  return out;
}

// Trapezoid integral of f on [lo, hi].
double integrate(auto&& f, double lo, double hi, int steps = 20000) {
  const double h = (hi - lo) / steps;
  double s = 0.5 * (f(lo) + f(hi));
  for (int i = 1; i < steps; ++i) s += f(lo + i * h);
  return s * h;
}

}  // namespace

TEST_CASE("aic arithmetic", "[stats]") {
  CHECK(aic(-100.0, 3) == 206.0);
  CHECK(aic(0.0, 0) == 0.0);
  const auto ranked = rank_models({{"big", -90.0, 10, 0}, {"small", -95.0, 2, 0}});
  CHECK(ranked.front().name == "small");
}

TEST_CASE("two-sample KS", "[stats][ks]") {
  const std::vector<double> a{0.1, 0.2, 0.3}, b{0.2, 0.3, 0.4};
  // Pooled steps: at 0.1 F_a=1/3, F_b=0; at 0.2 2/3 vs 1/3; at 0.3 1 vs 2/3; at 0.4 1 vs 1.
  CHECK(ks_two_sample(a, b) == Approx(1.0 / 3.0));
  CHECK(ks_two_sample(a, a) == 0.0);
  CHECK(ks_two_sample(std::vector<double>{0.1, 0.2}, std::vector<double>{0.5, 0.9}) == 1.0);
  CHECK_THROWS_AS(ks_two_sample(std::vector<double>{}, b), DegenerateInput);
}

TEST_CASE("KS is order and monotone-map invariant", "[stats][ks][property]") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(1 + rng.index(30)), b(1 + rng.index(30));
    for (auto& v : a) v = std::round(rng.uniform() * 20) / 20;
    for (auto& v : b) v = std::round(rng.uniform() * 20) / 20;
    const double ks = ks_two_sample(a, b);
    std::vector<double> ra(a.rbegin(), a.rend()), ea, eb;
    for (double v : a) ea.push_back(std::exp(3 * v));
    for (double v : b) eb.push_back(std::exp(3 * v));
    REQUIRE(ks_two_sample(ra, b) == ks);
    REQUIRE(ks_two_sample(ea, eb) == Approx(ks).margin(1e-15));
  }
}

TEST_CASE("kde integrates to one and tracks the data", "[stats][kde]") {
  const auto x = draw(3000, 1, [](Rng& r) { return r.normal(); });
  const Kde kde(x);
  CHECK(integrate([&](double v) { return kde(v); }, -8, 8) == Approx(1.0).margin(1e-3));
  const auto grid = kde.on_grid(-8, 8, 16001);
  double s = 0;
  for (double v : grid) s += v * 0.001;
  CHECK(s == Approx(1.0).margin(1e-3));
  CHECK(grid[8000] == Approx(1.0 / std::sqrt(2 * kPi)).epsilon(0.1));

  const Kde spike(std::vector<double>(50, 0.4));
  CHECK(spike.bandwidth() == 1e-3);
  const auto g = spike.on_grid(0, 1, 1001);
  CHECK(std::max_element(g.begin(), g.end()) - g.begin() == 400);

  // Two equal clusters: symmetric bimodal density.
  std::vector<double> two;
  for (int i = 0; i < 100; ++i) two.push_back(i % 2 ? 0.25 : 0.75);
  const Kde bimodal(two, 0.05);
  CHECK(bimodal(0.25) == Approx(bimodal(0.75)));
  CHECK(bimodal(0.5) < 0.1 * bimodal(0.25));
}

TEST_CASE("binned kde agrees with the exact sum", "[stats][kde]") {
  const auto x = draw(5000, 2, [](Rng& r) { return r.beta(2, 5); });
  const Kde kde(x);
  const auto grid = kde.on_grid(0, 1, 101);
  for (int i = 0; i <= 100; ++i) REQUIRE(grid[i] == Approx(kde(i / 100.0)).margin(2e-3 * (1 + kde(i / 100.0))));
}

TEST_CASE("student t density integrates to one", "[stats][t]") {
  for (double nu : {1.5, 5.0, 50.0})
    CHECK(integrate([&](double v) { return std::exp(student_t_logpdf(v, nu, 0.3, 2.0)); }, -400, 400, 400000) ==
          Approx(1.0).margin(2e-3));
}

TEST_CASE("fit_student_t recovers parameters", "[stats][t]") {
  const auto x = draw(10000, 42, [](Rng& r) { return r.student_t(5.0); });
  const StudentTFit f = fit_student_t(x);
  CHECK(f.nu >= 4.0);
  CHECK(f.nu <= 6.5);
  CHECK(std::fabs(f.mu) <= 0.05);
  CHECK(f.sigma == Approx(1.0).epsilon(0.05));
  CHECK(f.ks_gof < 0.02);

  const auto normal = draw(10000, 43, [](Rng& r) { return r.normal(); });
  CHECK(fit_student_t(normal).nu > 30.0);

  CHECK_THROWS_AS(fit_student_t(std::vector<double>(50, 1.0)), DegenerateInput);
  CHECK_THROWS_AS(fit_student_t(std::vector<double>{1, 2, 3}), DegenerateInput);
}

TEST_CASE("t beats normal on heavy-tailed data", "[stats][t][property]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto x = draw(2000, seed, [](Rng& r) { return 0.5 + 0.1 * r.student_t(3.0); });
    REQUIRE(fit_student_t(x).loglik >= fit_normal(x).loglik);
  }
}

TEST_CASE("fit_linear_t", "[stats][t]") {
  std::vector<double> x, y;
  for (int i = 0; i < 50; ++i) x.push_back(i * 0.1), y.push_back(2 + 3 * i * 0.1);
  const auto exact = fit_linear_t(x, y);
  CHECK(exact.intercept == Approx(2.0));
  CHECK(exact.slope == Approx(3.0));
  CHECK(exact.residual.sigma == 0.0);

  Rng rng(9);
  std::vector<double> xs, ys;
  for (int i = 0; i < 5000; ++i) {
    xs.push_back(rng.uniform(0, 10));
    ys.push_back(1.0 + 0.2 * rng.student_t(4.0));
  }
  const auto noisy = fit_linear_t(xs, ys);
  CHECK(std::fabs(noisy.slope) < 0.01);
  CHECK(noisy.winsor_lo < 0.0);
  CHECK(noisy.winsor_hi > 0.0);
  CHECK(std::isfinite(noisy.winsor_lo));
  Rng r2(1);
  for (int i = 0; i < 1000; ++i) {
    const double e = noisy.residual_sample(r2);
    REQUIRE(e >= noisy.winsor_lo);
    REQUIRE(e <= noisy.winsor_hi);
  }
  CHECK_THROWS_AS(fit_linear_t(std::vector<double>(30, 1.0), std::span<const double>(ys).subspan(0, 30)), DegenerateInput);
}

TEST_CASE("bessel ratio inversion", "[stats][vonmises]") {
  for (double k : {0.01, 0.5, 2.0, 10.0, 300.0, 2000.0}) CHECK(inverse_bessel_ratio(bessel_ratio(k)) == Approx(k).epsilon(1e-6));
  CHECK(inverse_bessel_ratio(0.0) == 0.0);
}

TEST_CASE("von Mises mixture recovery", "[stats][vonmises]") {
  const auto four = draw(4000, 3, [](Rng& r) { return r.von_mises(r.index(4) * kPi / 2, 50.0); });
  const auto axis = fit_vonmises_mixture(four, VonMisesMode::AxisCentered);
  REQUIRE(axis.components.size() == 4);
  for (const auto& c : axis.components) {
    CHECK(c.weight == Approx(0.25).margin(0.03));
    CHECK(c.kappa > 20.0);
  }
  const auto uni = fit_vonmises_mixture(four, VonMisesMode::UnimodalDoubled);
  CHECK(axis.aic < uni.aic);

  const auto single = draw(1000, 4, [](Rng& r) { return r.von_mises(kPi, 20.0); });
  const auto at_pi = fit_vonmises_mixture(single, VonMisesMode::AxisCentered);
  CHECK(at_pi.components[2].weight > 0.95);

  const auto flat = draw(2000, 5, [](Rng& r) { return r.uniform(0, 2 * kPi); });
  const auto fflat = fit_vonmises_mixture(flat, VonMisesMode::AxisCentered);
  // Equal-weight cardinal components cancel every harmonic below the fourth,
  // so flatness shows in the density rather than in each kappa.
  double lo = 1e9, hi = 0;
  for (int i = 0; i < 720; ++i) {
    const double d = std::exp(fflat.logpdf(i * 2 * kPi / 720));
    lo = std::min(lo, d), hi = std::max(hi, d);
  }
  CHECK(hi / lo < 1.15);
  CHECK(fflat.aic > aic(uniform_circular_loglik(flat.size()), 0));

  const auto free = fit_vonmises_mixture(four, VonMisesMode::FreeK, 4, 7);
  CHECK(free.k_params == 11);
  CHECK(free.loglik >= axis.loglik - 5.0);
  CHECK_THROWS_AS(fit_vonmises_mixture(std::vector<double>(10, 0.0), VonMisesMode::FreeK), DegenerateInput);
}

TEST_CASE("doubled-angle data prefers the unimodal model", "[stats][vonmises][property]") {
  // Axial data at 0.6 and 0.6 + pi: one doubled-angle mode, off the cardinals.
  const auto axial = draw(2000, 6, [](Rng& r) { return r.von_mises(0.6 + (r.bernoulli(0.5) ? kPi : 0), 30.0); });
  const auto uni = fit_vonmises_mixture(axial, VonMisesMode::UnimodalDoubled);
  const auto axis = fit_vonmises_mixture(axial, VonMisesMode::AxisCentered);
  CHECK(uni.aic < axis.aic);
  CHECK(uni.components[0].mu == Approx(1.2).margin(0.02));
  Rng rng(1);
  std::vector<double> resampled;
  for (int i = 0; i < 2000; ++i) resampled.push_back(uni.sample(rng));
  CHECK(fit_vonmises_mixture(resampled, VonMisesMode::UnimodalDoubled).components[0].kappa ==
        Approx(uni.components[0].kappa).epsilon(0.15));
}

TEST_CASE("von Mises mixture density integrates to one", "[stats][vonmises]") {
  const auto four = draw(500, 8, [](Rng& r) { return r.von_mises(r.index(4) * kPi / 2, 5.0); });
  for (auto mode : {VonMisesMode::AxisCentered, VonMisesMode::UnimodalDoubled}) {
    const auto m = fit_vonmises_mixture(four, mode);
    CHECK(integrate([&](double t) { return std::exp(m.logpdf(t)); }, 0, 2 * kPi) == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("beta fit", "[stats][beta]") {
  const auto x = draw(10000, 11, [](Rng& r) { return r.beta(4.53, 0.53); });
  CHECK(mean(x) == Approx(4.53 / 5.06).margin(0.01));
  const auto f = fit_beta(x);
  CHECK(f.alpha == Approx(4.53).epsilon(0.25));
  CHECK(f.beta == Approx(0.53).epsilon(0.25));
  CHECK_FALSE(f.boundary);

  const auto sym = fit_beta(draw(5000, 12, [](Rng& r) { return r.beta(2, 2); }));
  CHECK(sym.alpha == Approx(sym.beta).epsilon(0.1));

  const auto edge = fit_beta(std::vector<double>(40, 1.0 - 1e-9));
  CHECK(edge.boundary);
  CHECK(edge.alpha / edge.beta > 1e3);
}

TEST_CASE("logistic regression", "[stats][glm]") {
  Rng rng(13);
  std::vector<double> x;
  std::vector<int> y;
  for (int i = 0; i < 5000; ++i) {
    x.push_back(rng.uniform(-3, 3));
    y.push_back(rng.bernoulli(0.3));
  }
  const auto flat = fit_logistic(x, y);
  CHECK(std::fabs(flat.slope) < 0.05);
  CHECK(flat.converged);
  CHECK_FALSE(flat.separated);

  std::vector<double> xs;
  std::vector<int> ys;
  for (int i = 0; i < 5000; ++i) {
    xs.push_back(rng.uniform(-3, 3));
    ys.push_back(rng.bernoulli(1.0 / (1.0 + std::exp(-(-0.5 + 1.2 * xs.back())))));
  }
  const auto fit = fit_logistic(xs, ys);
  CHECK(fit.intercept == Approx(-0.5).margin(0.1));
  CHECK(fit.slope == Approx(1.2).margin(0.1));

  std::vector<double> sx;
  std::vector<int> sy;
  for (int i = 0; i < 40; ++i) sx.push_back(i), sy.push_back(i >= 20);
  const auto sep = fit_logistic(sx, sy);
  CHECK(sep.separated);
  CHECK(std::fabs(sep.slope) <= 20.0);
  CHECK(std::fabs(sep.intercept) <= 20.0);
}

TEST_CASE("poisson regression recovers rates", "[stats][glm]") {
  Rng rng(17);
  std::vector<double> x, c;
  for (int i = 0; i < 10000; ++i) {
    x.push_back(rng.uniform(0, 60));
    c.push_back(static_cast<double>(rng.poisson(std::exp(0.5 + 0.02 * x.back()))));
  }
  const auto m = fit_poisson(x, c);
  CHECK(m.converged);
  CHECK(m.intercept == Approx(0.5).margin(0.05));
  CHECK(m.slope == Approx(0.02).margin(0.002));
  CHECK_THROWS_AS(fit_poisson(x, std::vector<double>(x.size(), 0.0)), DegenerateInput);
}

TEST_CASE("circular uniformity tests", "[stats][circular]") {
  const auto same = circular_uniformity(std::vector<double>(20, 1.0));
  CHECK(same.rayleigh_R == Approx(1.0));
  CHECK(same.rayleigh_p < 1e-6);

  std::vector<double> grid;
  for (int i = 0; i < 36; ++i) grid.push_back(i * 2 * kPi / 36);
  CHECK(circular_uniformity(grid).rayleigh_R == Approx(0.0).margin(1e-12));

  // Four tight cardinal clusters: the mean vector cancels, the CDF does not.
  const auto four = draw(400, 19, [](Rng& r) { return r.von_mises(r.index(4) * kPi / 2, 200.0); });
  const auto cu = circular_uniformity(four);
  CHECK(cu.rayleigh_p > 0.05);
  CHECK(cu.kuiper_p < 1e-3);

  const auto flat = draw(400, 20, [](Rng& r) { return r.uniform(0, 2 * kPi); });
  CHECK(circular_uniformity(flat).kuiper_p > 0.05);
}

TEST_CASE("chi-squared permutation test", "[stats][perm]") {
  const Table diag{{20, 0, 0}, {0, 20, 0}, {0, 0, 20}};
  CHECK(chi2_permutation(diag, 500, 1) == 0.0);
  const Table indep{{10, 20, 30}, {20, 40, 60}};
  CHECK(chi2_permutation(indep, 500, 1) > 0.05);
  CHECK(chi2_permutation(indep, 200, 99) == chi2_permutation(indep, 200, 99));
  // Hand value: 2x2 with margins 20/20, cells 15/5/5/15 gives chi2 = 10.
  CHECK(chi2_statistic({{15, 5}, {5, 15}}) == Approx(10.0));
  CHECK_THROWS_AS(chi2_permutation({{1, 2}}, 10, 1), DegenerateInput);
}

TEST_CASE("mantel test", "[stats][perm]") {
  Rng rng(23);
  const std::size_t n = 12;
  Table a(n, std::vector<double>(n, 0.0)), neg = a, rnd = a;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      a[i][j] = a[j][i] = rng.uniform();
      neg[i][j] = neg[j][i] = -2.0 * a[i][j] + 1.0;
      rnd[i][j] = rnd[j][i] = rng.uniform();
    }
  const auto self = mantel(a, a, 999, 1);
  CHECK(self.r == Approx(1.0));
  CHECK(self.p < 0.01);
  CHECK(mantel(a, neg, 99, 1).r == Approx(-1.0));
  CHECK(mantel(a, rnd, 999, 1).p > 0.01);
  Table flat(n, std::vector<double>(n, 1.0));
  CHECK_THROWS_AS(mantel(a, flat, 10, 1), DegenerateInput);
}
