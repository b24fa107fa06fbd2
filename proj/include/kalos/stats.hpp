#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kalos/random.hpp"

namespace kalos::stats {

/// Raised for inputs a fitter cannot use (too few points, constant data, ...).
class DegenerateInput : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- descriptive

double mean(std::span<const double> x);
double variance(std::span<const double> x);  // unbiased, 0 for n < 2
double stddev(std::span<const double> x);
/// Linear-interpolation quantile (type 7) of unsorted data.
double quantile(std::vector<double> x, double q);
double quantile_sorted(std::span<const double> sorted, double q);
/// Percentile interval [q_lo, q_hi] of the data.
std::pair<double, double> percentile_interval(std::vector<double> x, double lo = 0.025, double hi = 0.975);

/// 2k - 2 loglik.
double aic(double loglik, int k_params);

struct RankedModel {
  std::string name;
  double loglik = 0.0;
  int k_params = 0;
  double aic = 0.0;
};
/// Sorts by AIC ascending (best first), ties by name.
std::vector<RankedModel> rank_models(std::vector<RankedModel> models);

// ----------------------------------------------------------- KS and densities

/// Exact two-sample sup-difference of the empirical CDFs.
double ks_two_sample(std::span<const double> a, std::span<const double> b);
/// Location of the sup-difference (a pooled sample point where it is attained).
struct KsResult {
  double statistic = 0.0;
  double argmax = 0.0;
};
KsResult ks_two_sample_detail(std::span<const double> a, std::span<const double> b);
/// One-sample KS against a continuous CDF.
double ks_one_sample(std::span<const double> x, const std::function<double(double)>& cdf);

/// 0.9 * min(sd, IQR/1.34) * n^(-1/5), floored at `floor`.
double silverman_bandwidth(std::span<const double> x, double floor = 1e-3);

class Kde {
public:
  /// bandwidth <= 0 selects Silverman's rule.
  explicit Kde(std::vector<double> samples, double bandwidth = 0.0, double floor = 1e-3);
  double bandwidth() const { return h_; }
  double operator()(double x) const;
  /// Density on `count` equally spaced points over [lo, hi].
  std::vector<double> on_grid(double lo, double hi, std::size_t count) const;

private:
  std::vector<double> x_;  // sorted
  double h_ = 0.0;
};

// ------------------------------------------------------------------ Student t

double student_t_logpdf(double x, double nu, double mu, double sigma);
double student_t_cdf(double x, double nu, double mu, double sigma);
double student_t_quantile(double p, double nu, double mu, double sigma);

struct StudentTFit {
  double nu = 200.0;
  double mu = 0.0;
  double sigma = 1.0;
  double loglik = 0.0;
  double ks_gof = 0.0;
  bool converged = true;

  double cdf(double x) const { return student_t_cdf(x, nu, mu, sigma); }
  double quantile(double p) const { return student_t_quantile(p, nu, mu, sigma); }
  double sample(Rng& rng) const { return mu + sigma * rng.student_t(nu); }
};

/// ML fit over (nu, mu, sigma) with nu in [1, 200]: EM for (mu, sigma) at
/// fixed nu, golden-section search on log nu. Needs >= 20 non-constant points.
StudentTFit fit_student_t(std::span<const double> x);

struct NormalFit {
  double mu = 0.0;
  double sigma = 1.0;
  double loglik = 0.0;
};
NormalFit fit_normal(std::span<const double> x);

struct LinearTModel {
  double intercept = 0.0;
  double slope = 0.0;
  StudentTFit residual;
  double q_lo = 0.001;
  double q_hi = 0.999;
  double winsor_lo = 0.0;  // residual quantile at q_lo
  double winsor_hi = 0.0;  // residual quantile at q_hi

  double trend(double x) const { return intercept + slope * x; }
  /// Residual draw clipped to the winsor bounds.
  double residual_sample(Rng& rng) const;
  double sample(double x, Rng& rng) const { return trend(x) + residual_sample(rng); }
};

/// Least-squares trend then a Student-t residual fit. Exactly linear data
/// yields a zero-scale residual.
LinearTModel fit_linear_t(std::span<const double> x, std::span<const double> y);

// ----------------------------------------------------------------- von Mises

double vonmises_logpdf(double theta, double mu, double kappa);
/// Mean resultant length A(kappa) = I1/I0 and its inverse.
double bessel_ratio(double kappa);
double inverse_bessel_ratio(double r);

enum class VonMisesMode { AxisCentered, UnimodalDoubled, FreeK };
std::string vonmises_mode_name(VonMisesMode m);
VonMisesMode parse_vonmises_mode(const std::string& s);

struct VonMisesComponent {
  double mu = 0.0;
  double kappa = 0.0;
  double weight = 1.0;
  bool fixed_mean = false;
};

struct VonMisesMixture {
  VonMisesMode mode = VonMisesMode::AxisCentered;
  std::vector<VonMisesComponent> components;
  double loglik = 0.0;
  double aic = 0.0;
  int k_params = 0;
  bool converged = true;

  double logpdf(double theta) const;
  double sample(Rng& rng) const;
};

/// EM fit with 5 seeded restarts, best loglik kept. FreeK uses `k` components.
/// UnimodalDoubled fits a single component to 2*theta; its density on theta is
/// vM(2 theta) so log-likelihoods stay comparable across modes.
VonMisesMixture fit_vonmises_mixture(std::span<const double> angles, VonMisesMode mode, int k = 4,
                                     std::uint64_t seed = 0);

/// Uniform circular log-likelihood n * ln(1 / 2pi).
double uniform_circular_loglik(std::size_t n);

// ---------------------------------------------------------------------- Beta

struct BetaFit {
  double alpha = 1.0;
  double beta = 1.0;
  double loglik = 0.0;
  bool boundary = false;  // parameters diverged or hit the cap

  double sample(Rng& rng) const { return rng.beta(alpha, beta); }
};
double beta_logpdf(double x, double a, double b);
/// Newton ML fit; samples are clamped to [1e-6, 1 - 1e-6].
BetaFit fit_beta(std::span<const double> x);

// ------------------------------------------------------------ GLMs via IRLS

struct LogisticModel {
  double intercept = 0.0;
  double slope = 0.0;
  double loglik = 0.0;
  bool separated = false;
  bool converged = true;

  double probability(double x) const;
};
LogisticModel fit_logistic(std::span<const double> x, std::span<const int> labels);

struct PoissonModel {
  double intercept = 0.0;
  double slope = 0.0;
  double loglik = 0.0;
  bool converged = true;

  double rate(double x) const;
};
PoissonModel fit_poisson(std::span<const double> x, std::span<const double> counts);

// ------------------------------------------------------------ circular tests

struct CircularUniformity {
  double rayleigh_R = 0.0;  // mean resultant length
  double rayleigh_p = 1.0;
  double kuiper_V = 0.0;
  double kuiper_p = 1.0;
};
CircularUniformity circular_uniformity(std::span<const double> angles);

// -------------------------------------------------------- permutation tests

using Table = std::vector<std::vector<double>>;

double chi2_statistic(const Table& t);
/// Shuffles the column labels of the expanded table; p is the fraction of
/// permuted statistics >= the observed one.
double chi2_permutation(const Table& t, int n_perms, std::uint64_t seed);

struct MantelResult {
  double r = 0.0;
  double p = 1.0;
};
/// Pearson r over the upper triangles; two-sided permutation p from joint
/// row/column shuffles of `b`.
MantelResult mantel(const Table& a, const Table& b, int n_perms, std::uint64_t seed);

double pearson(std::span<const double> x, std::span<const double> y);

}  // namespace kalos::stats
