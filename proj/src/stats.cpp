#include "kalos/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "kalos/parallel.hpp"

namespace kalos::stats {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_angle(double t) {
  t = std::fmod(t, kTwoPi);
  return t < 0.0 ? t + kTwoPi : t;
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Solves the 2x2 system H d = g. Returns false when H is singular.
bool solve2(const std::array<double, 4>& h, const std::array<double, 2>& g, std::array<double, 2>& d) {
  const double det = h[0] * h[3] - h[1] * h[2];
  if (!(std::fabs(det) > 1e-300)) return false;
  d[0] = (h[3] * g[0] - h[1] * g[1]) / det;
  d[1] = (h[0] * g[1] - h[2] * g[0]) / det;
  return true;
}

void require_size(std::size_t n, std::size_t min, const char* what) {
  if (n < min)
    throw DegenerateInput(std::string(what) + ": needs at least " + std::to_string(min) + " samples, got " +
                          std::to_string(n));
}

}  // namespace

// ---------------------------------------------------------------- descriptive

double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

double stddev(std::span<const double> x) { return std::sqrt(variance(x)); }

double quantile_sorted(std::span<const double> s, double q) {
  if (s.empty()) throw DegenerateInput("quantile of empty data");
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(s.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

double quantile(std::vector<double> x, double q) {
  std::sort(x.begin(), x.end());
  return quantile_sorted(x, q);
}

std::pair<double, double> percentile_interval(std::vector<double> x, double lo, double hi) {
  std::sort(x.begin(), x.end());
  return {quantile_sorted(x, lo), quantile_sorted(x, hi)};
}

double aic(double loglik, int k_params) { return 2.0 * k_params - 2.0 * loglik; }

std::vector<RankedModel> rank_models(std::vector<RankedModel> models) {
  for (auto& m : models) m.aic = aic(m.loglik, m.k_params);
  std::sort(models.begin(), models.end(), [](const RankedModel& a, const RankedModel& b) {
    return a.aic != b.aic ? a.aic < b.aic : a.name < b.name;
  });
  return models;
}

// ----------------------------------------------------------- KS and densities

KsResult ks_two_sample_detail(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DegenerateInput("ks statistic needs two non-empty samples");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  KsResult best{0.0, std::min(sa.front(), sb.front())};
  while (i < sa.size() || j < sb.size()) {
    double x;
    if (j == sb.size() || (i < sa.size() && sa[i] <= sb[j]))
      x = sa[i];
    else
      x = sb[j];
    // Step both CDFs past every copy of x before comparing.
    while (i < sa.size() && sa[i] == x) ++i;
    while (j < sb.size() && sb[j] == x) ++j;
    const double d = std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb);
    if (d > best.statistic) best = {d, x};
  }
  return best;
}

double ks_two_sample(std::span<const double> a, std::span<const double> b) {
  return ks_two_sample_detail(a, b).statistic;
}

double ks_one_sample(std::span<const double> x, const std::function<double(double)>& cdf) {
  if (x.empty()) throw DegenerateInput("ks statistic needs a non-empty sample");
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double f = cdf(s[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

double silverman_bandwidth(std::span<const double> x, double floor) {
  if (x.size() < 2) return floor;
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  const double sd = stddev(x);
  const double iqr = (quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (!(spread > 0.0)) spread = std::max(sd, iqr);
  const double h = 0.9 * spread * std::pow(static_cast<double>(x.size()), -0.2);
  return std::max(h, floor);
}

Kde::Kde(std::vector<double> samples, double bandwidth, double floor) : x_(std::move(samples)) {
  if (x_.size() < 2) throw DegenerateInput("kde needs at least 2 samples");
  std::sort(x_.begin(), x_.end());
  h_ = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(x_, floor);
}

double Kde::operator()(double x) const {
  const double reach = 8.0 * h_;
  auto lo = std::lower_bound(x_.begin(), x_.end(), x - reach);
  auto hi = std::upper_bound(lo, x_.end(), x + reach);
  double s = 0.0;
  for (auto it = lo; it != hi; ++it) {
    const double z = (x - *it) / h_;
    s += std::exp(-0.5 * z * z);
  }
  return s / (static_cast<double>(x_.size()) * h_ * std::sqrt(kTwoPi));
}

std::vector<double> Kde::on_grid(double lo, double hi, std::size_t count) const {
  std::vector<double> out(count, 0.0);
  if (count == 0) return out;
  const double step = count > 1 ? (hi - lo) / static_cast<double>(count - 1) : 0.0;
  if (x_.size() <= 2000) {
    for (std::size_t g = 0; g < count; ++g) out[g] = (*this)(lo + step * static_cast<double>(g));
    return out;
  }
  // Linear binning at h/16 spacing, then a truncated direct sum over bins.
  const double delta = h_ / 16.0;
  const double x0 = x_.front();
  const std::size_t nbins = static_cast<std::size_t>((x_.back() - x0) / delta) + 2;
  std::vector<double> weight(nbins, 0.0);
  for (double v : x_) {
    const double pos = (v - x0) / delta;
    const std::size_t k = std::min(static_cast<std::size_t>(pos), nbins - 2);
    const double frac = pos - static_cast<double>(k);
    weight[k] += 1.0 - frac;
    weight[k + 1] += frac;
  }
  const double norm = 1.0 / (static_cast<double>(x_.size()) * h_ * std::sqrt(kTwoPi));
  const double reach = 8.0 * h_;
  for (std::size_t g = 0; g < count; ++g) {
    const double x = lo + step * static_cast<double>(g);
    const double first = std::ceil((x - reach - x0) / delta);
    const double last = std::floor((x + reach - x0) / delta);
    if (last < 0.0 || first > static_cast<double>(nbins - 1)) continue;
    const std::size_t k0 = static_cast<std::size_t>(std::max(0.0, first));
    const std::size_t k1 = static_cast<std::size_t>(std::min(static_cast<double>(nbins - 1), last));
    double s = 0.0;
    for (std::size_t k = k0; k <= k1; ++k) {
      if (weight[k] == 0.0) continue;
      const double z = (x - (x0 + delta * static_cast<double>(k))) / h_;
      s += weight[k] * std::exp(-0.5 * z * z);
    }
    out[g] = s * norm;
  }
  return out;
}

// ------------------------------------------------------------------ Student t

double student_t_logpdf(double x, double nu, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi) -
         std::log(sigma) - 0.5 * (nu + 1.0) * std::log1p(z * z / nu);
}

double student_t_cdf(double x, double nu, double mu, double sigma) {
  if (!(sigma > 0.0)) return x < mu ? 0.0 : 1.0;
  return boost::math::cdf(boost::math::students_t_distribution<double>(nu), (x - mu) / sigma);
}

double student_t_quantile(double p, double nu, double mu, double sigma) {
  if (!(sigma > 0.0)) return mu;
  return mu + sigma * boost::math::quantile(boost::math::students_t_distribution<double>(nu), p);
}

namespace {

struct TState {
  double mu;
  double sigma;
  bool converged;
};

double t_loglik(std::span<const double> x, double nu, double mu, double sigma) {
  double ll = 0.0;
  for (double v : x) ll += student_t_logpdf(v, nu, mu, sigma);
  return ll;
}

// EM for location and scale at fixed nu.
TState t_em(std::span<const double> x, double nu, TState s) {
  const double n = static_cast<double>(x.size());
  s.converged = false;
  for (int it = 0; it < 1000; ++it) {
    double sw = 0.0, swx = 0.0;
    std::vector<double> w(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = (x[i] - s.mu) / s.sigma;
      w[i] = (nu + 1.0) / (nu + z * z);
      sw += w[i];
      swx += w[i] * x[i];
    }
    const double mu = swx / sw;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) ss += w[i] * (x[i] - mu) * (x[i] - mu);
    const double sigma = std::sqrt(ss / n);
    const bool done = std::fabs(mu - s.mu) <= 1e-10 * (s.sigma + std::fabs(s.mu)) &&
                      std::fabs(sigma - s.sigma) <= 1e-10 * s.sigma;
    s.mu = mu;
    s.sigma = std::max(sigma, 1e-300);
    if (done) {
      s.converged = true;
      break;
    }
  }
  return s;
}

}  // namespace

StudentTFit fit_student_t(std::span<const double> x) {
  require_size(x.size(), 20, "fit_student_t");
  const double sd = stddev(x);
  if (!(sd > 0.0)) throw DegenerateInput("fit_student_t: constant samples");

  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  const double med = quantile_sorted(s, 0.5);
  std::vector<double> dev;
  dev.reserve(s.size());
  for (double v : s) dev.push_back(std::fabs(v - med));
  double scale = 1.4826 * quantile(dev, 0.5);
  if (!(scale > 0.0)) scale = sd;
  TState start{med, scale, true};

  auto profile = [&](double log_nu, TState& st) {
    st = t_em(x, std::exp(log_nu), st);
    return t_loglik(x, std::exp(log_nu), st.mu, st.sigma);
  };

  // Golden-section search for the maximum over log nu in [0, ln 200].
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.0, b = std::log(200.0);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  TState sc = start, sd_state = start;
  double fc = profile(c, sc), fd = profile(d, sd_state);
  while (b - a > 1e-5) {
    if (fc >= fd) {
      b = d, d = c, fd = fc, sd_state = sc;
      c = b - phi * (b - a);
      fc = profile(c, sc);
    } else {
      a = c, c = d, fc = fd, sc = sd_state;
      d = a + phi * (b - a);
      fd = profile(d, sd_state);
    }
  }
  // The likelihood can be monotone in nu; compare against both ends.
  StudentTFit best;
  best.loglik = -std::numeric_limits<double>::infinity();
  for (double log_nu : {0.5 * (a + b), 0.0, std::log(200.0)}) {
    TState st = fc >= fd ? sc : sd_state;
    const double ll = profile(log_nu, st);
    if (ll > best.loglik) {
      best.nu = std::exp(log_nu);
      best.mu = st.mu;
      best.sigma = st.sigma;
      best.loglik = ll;
      best.converged = st.converged;
    }
  }
  best.ks_gof = ks_one_sample(x, [&](double v) { return best.cdf(v); });
  return best;
}

NormalFit fit_normal(std::span<const double> x) {
  require_size(x.size(), 2, "fit_normal");
  NormalFit f;
  f.mu = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - f.mu) * (v - f.mu);
  f.sigma = std::sqrt(ss / static_cast<double>(x.size()));
  if (!(f.sigma > 0.0)) throw DegenerateInput("fit_normal: constant samples");
  const double n = static_cast<double>(x.size());
  f.loglik = -0.5 * n * (std::log(kTwoPi * f.sigma * f.sigma) + 1.0);
  return f;
}

double LinearTModel::residual_sample(Rng& rng) const {
  if (!(residual.sigma > 0.0)) return residual.mu;
  return std::clamp(residual.sample(rng), winsor_lo, winsor_hi);
}

LinearTModel fit_linear_t(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DegenerateInput("fit_linear_t: predictor and response lengths differ");
  require_size(x.size(), 20, "fit_linear_t");
  const double mx = mean(x), my = mean(y);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw DegenerateInput("fit_linear_t: predictor is constant");
  LinearTModel m;
  m.slope = sxy / sxx;
  m.intercept = my - m.slope * mx;
  std::vector<double> res(x.size());
  double max_abs = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    res[i] = y[i] - m.trend(x[i]);
    max_abs = std::max(max_abs, std::fabs(res[i]));
    scale = std::max(scale, std::fabs(y[i]));
  }
  if (max_abs <= 1e-12 * std::max(1.0, scale)) {
    m.residual = StudentTFit{200.0, 0.0, 0.0, 0.0, 0.0, true};
    return m;
  }
  m.residual = fit_student_t(res);
  m.winsor_lo = m.residual.quantile(m.q_lo);
  m.winsor_hi = m.residual.quantile(m.q_hi);
  return m;
}

// ----------------------------------------------------------------- von Mises

namespace {

double log_bessel_i0(double k) {
  if (k < 500.0) return std::log(boost::math::cyl_bessel_i(0, k));
  return k - 0.5 * std::log(kTwoPi * k) + std::log1p(1.0 / (8.0 * k) + 9.0 / (128.0 * k * k));
}

}  // namespace

double vonmises_logpdf(double theta, double mu, double kappa) {
  return kappa * std::cos(theta - mu) - std::log(kTwoPi) - log_bessel_i0(kappa);
}

double bessel_ratio(double k) {
  if (k <= 0.0) return 0.0;
  if (k < 500.0) return boost::math::cyl_bessel_i(1, k) / boost::math::cyl_bessel_i(0, k);
  return 1.0 - 1.0 / (2.0 * k) - 1.0 / (8.0 * k * k) - 1.0 / (8.0 * k * k * k);
}

double inverse_bessel_ratio(double r) {
  constexpr double kMax = 1e5;
  if (!(r > 0.0)) return 0.0;
  if (r >= bessel_ratio(kMax)) return kMax;
  double k;
  if (r < 0.53)
    k = 2.0 * r + r * r * r + 5.0 * std::pow(r, 5) / 6.0;
  else if (r < 0.85)
    k = -0.4 + 1.39 * r + 0.43 / (1.0 - r);
  else
    k = 1.0 / (r * r * r - 4.0 * r * r + 3.0 * r);
  for (int it = 0; it < 20; ++it) {
    const double a = bessel_ratio(k);
    const double deriv = 1.0 - a / k - a * a;
    if (!(deriv > 0.0)) break;
    const double next = std::clamp(k - (a - r) / deriv, 0.5 * k, 2.0 * k);
    if (std::fabs(next - k) < 1e-12 * k) {
      k = next;
      break;
    }
    k = next;
  }
  return std::min(k, kMax);
}

std::string vonmises_mode_name(VonMisesMode m) {
  switch (m) {
    case VonMisesMode::AxisCentered: return "axis_centered";
    case VonMisesMode::UnimodalDoubled: return "unimodal_doubled";
    case VonMisesMode::FreeK: return "free_k";
  }
  return "axis_centered";
}

VonMisesMode parse_vonmises_mode(const std::string& s) {
  for (auto m : {VonMisesMode::AxisCentered, VonMisesMode::UnimodalDoubled, VonMisesMode::FreeK})
    if (vonmises_mode_name(m) == s) return m;
  throw std::invalid_argument("unknown von Mises mode '" + s + "'");
}

double VonMisesMixture::logpdf(double theta) const {
  const double t = mode == VonMisesMode::UnimodalDoubled ? wrap_angle(2.0 * theta) : theta;
  std::vector<double> terms;
  for (const auto& c : components)
    if (c.weight > 0.0) terms.push_back(std::log(c.weight) + vonmises_logpdf(t, c.mu, c.kappa));
  return terms.empty() ? -std::numeric_limits<double>::infinity() : log_sum_exp(terms);
}

double VonMisesMixture::sample(Rng& rng) const {
  std::vector<double> w;
  for (const auto& c : components) w.push_back(c.weight);
  const auto& c = components[rng.weighted_index(w)];
  const double t = rng.von_mises(c.mu, c.kappa);
  if (mode == VonMisesMode::UnimodalDoubled) return wrap_angle(0.5 * t + (rng.bernoulli(0.5) ? std::numbers::pi : 0.0));
  return t;
}

double uniform_circular_loglik(std::size_t n) { return static_cast<double>(n) * std::log(1.0 / kTwoPi); }

namespace {

struct EmOutcome {
  std::vector<VonMisesComponent> comps;
  double loglik;
  bool converged;
};

EmOutcome vm_em(std::span<const double> t, std::vector<VonMisesComponent> comps) {
  const std::size_t n = t.size(), K = comps.size();
  std::vector<double> resp(n * K);
  std::vector<double> terms(K);
  double prev = -std::numeric_limits<double>::infinity();
  EmOutcome out{comps, prev, false};
  for (int it = 0; it < 2000; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k)
        terms[k] = comps[k].weight > 0.0 ? std::log(comps[k].weight) + vonmises_logpdf(t[i], comps[k].mu, comps[k].kappa)
                                         : -std::numeric_limits<double>::infinity();
      const double lse = log_sum_exp(terms);
      ll += lse;
      for (std::size_t k = 0; k < K; ++k) resp[i * K + k] = std::exp(terms[k] - lse);
    }
    if (ll > out.loglik || !std::isfinite(out.loglik)) out = {comps, ll, false};
    if (std::fabs(ll - prev) <= 1e-9 * (1.0 + std::fabs(ll))) {
      out.converged = true;
      break;
    }
    prev = ll;
    for (std::size_t k = 0; k < K; ++k) {
      double nk = 0.0, c = 0.0, s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * K + k];
        nk += r;
        c += r * std::cos(t[i]);
        s += r * std::sin(t[i]);
      }
      comps[k].weight = nk / static_cast<double>(n);
      if (nk <= 1e-12) continue;
      if (!comps[k].fixed_mean) comps[k].mu = wrap_angle(std::atan2(s, c));
      const double rbar = (c * std::cos(comps[k].mu) + s * std::sin(comps[k].mu)) / nk;
      comps[k].kappa = inverse_bessel_ratio(std::clamp(rbar, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace

VonMisesMixture fit_vonmises_mixture(std::span<const double> angles, VonMisesMode mode, int k, std::uint64_t seed) {
  require_size(angles.size(), 50, "fit_vonmises_mixture");
  std::vector<double> t;
  t.reserve(angles.size());
  for (double a : angles) t.push_back(wrap_angle(mode == VonMisesMode::UnimodalDoubled ? 2.0 * a : a));

  const int K = mode == VonMisesMode::AxisCentered ? 4 : mode == VonMisesMode::UnimodalDoubled ? 1 : std::max(1, k);
  constexpr int kRestarts = 5;
  std::vector<EmOutcome> runs(kRestarts);
  parallel_for(kRestarts, [&](std::size_t r) {
    Rng rng(derive_seed(seed, {r}));
    std::vector<VonMisesComponent> comps(K);
    std::vector<double> w(K, 1.0);
    if (r > 0)
      for (auto& x : w) x = rng.gamma(1.0);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    for (int c = 0; c < K; ++c) {
      auto& comp = comps[c];
      comp.weight = w[c] / wsum;
      comp.kappa = r == 0 ? 1.0 : rng.uniform(0.5, 5.0);
      if (mode == VonMisesMode::AxisCentered) {
        comp.mu = c * std::numbers::pi / 2.0;
        comp.fixed_mean = true;
      } else if (r == 0) {
        comp.mu = c * kTwoPi / K;
      } else {
        comp.mu = t[rng.index(t.size())];
      }
    }
    runs[r] = vm_em(t, std::move(comps));
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].loglik > runs[best].loglik) best = r;

  VonMisesMixture m;
  m.mode = mode;
  m.components = runs[best].comps;
  m.loglik = runs[best].loglik;
  m.converged = runs[best].converged;
  m.k_params = mode == VonMisesMode::AxisCentered ? 2 * K - 1 : mode == VonMisesMode::UnimodalDoubled ? 2 : 3 * K - 1;
  m.aic = aic(m.loglik, m.k_params);
  return m;
}

// ---------------------------------------------------------------------- Beta

double beta_logpdf(double x, double a, double b) {
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) + std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
}

BetaFit fit_beta(std::span<const double> x) {
  require_size(x.size(), 20, "fit_beta");
  constexpr double kCap = 1e6;
  std::vector<double> c;
  c.reserve(x.size());
  for (double v : x) c.push_back(std::clamp(v, 1e-6, 1.0 - 1e-6));
  const double n = static_cast<double>(c.size());
  double s1 = 0.0, s2 = 0.0;
  for (double v : c) s1 += std::log(v), s2 += std::log1p(-v);
  s1 /= n, s2 /= n;
  auto ll = [&](double a, double b) {
    return n * ((a - 1.0) * s1 + (b - 1.0) * s2 + std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b));
  };

  BetaFit f;
  const double m = mean(c), v = variance(c);
  if (!(v > 1e-12 * m * (1.0 - m))) {
    f.alpha = kCap * m;
    f.beta = kCap * (1.0 - m);
    f.boundary = true;
    f.loglik = ll(f.alpha, f.beta);
    return f;
  }
  const double common = m * (1.0 - m) / v - 1.0;
  double a = common > 0.0 ? m * common : 1.0;
  double b = common > 0.0 ? (1.0 - m) * common : 1.0;
  double cur = ll(a, b);
  bool converged = false;
  using boost::math::digamma;
  using boost::math::trigamma;
  for (int it = 0; it < 500; ++it) {
    const std::array<double, 2> g{digamma(a + b) - digamma(a) + s1, digamma(a + b) - digamma(b) + s2};
    if (std::hypot(g[0], g[1]) < 1e-10) {
      converged = true;
      break;
    }
    const double tab = trigamma(a + b);
    // Negative Hessian (per sample) is positive definite.
    const std::array<double, 4> h{trigamma(a) - tab, -tab, -tab, trigamma(b) - tab};
    std::array<double, 2> d{};
    if (!solve2(h, g, d)) break;
    double step = 1.0;
    bool moved = false;
    for (int half = 0; half < 60; ++half, step *= 0.5) {
      const double na = a + step * d[0], nb = b + step * d[1];
      if (na <= 0.0 || nb <= 0.0) continue;
      const double cand = ll(na, nb);
      if (cand >= cur) {
        a = na, b = nb, cur = cand, moved = true;
        break;
      }
    }
    if (!moved) {
      converged = true;
      break;
    }
    if (a > kCap || b > kCap) break;
  }
  f.alpha = std::min(a, kCap);
  f.beta = std::min(b, kCap);
  f.loglik = ll(f.alpha, f.beta);
  f.boundary = !converged || a >= kCap || b >= kCap || f.alpha / f.beta > 1e4 || f.beta / f.alpha > 1e4;
  return f;
}

// ------------------------------------------------------------ GLMs via IRLS

double LogisticModel::probability(double x) const { return 1.0 / (1.0 + std::exp(-(intercept + slope * x))); }

LogisticModel fit_logistic(std::span<const double> x, std::span<const int> labels) {
  if (x.size() != labels.size()) throw DegenerateInput("fit_logistic: predictor and label lengths differ");
  require_size(x.size(), 20, "fit_logistic");
  constexpr double kCap = 20.0;
  double pos = 0.0;
  double min0 = INFINITY, max0 = -INFINITY, min1 = INFINITY, max1 = -INFINITY;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DegenerateInput("fit_logistic: labels must be 0 or 1");
    if (labels[i] == 1)
      pos += 1.0, min1 = std::min(min1, x[i]), max1 = std::max(max1, x[i]);
    else
      min0 = std::min(min0, x[i]), max0 = std::max(max0, x[i]);
  }
  const double n = static_cast<double>(x.size());
  if (pos == 0.0 || pos == n) throw DegenerateInput("fit_logistic: both label values must be present");
  if (!(stddev(x) > 0.0)) throw DegenerateInput("fit_logistic: predictor is constant");

  LogisticModel m;
  m.intercept = std::log(pos / (n - pos));
  auto loglik = [&](double b0, double b1) {
    double ll = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double eta = b0 + b1 * x[i];
      // log sigma(eta) and log(1 - sigma(eta)) computed stably.
      ll += labels[i] == 1 ? -std::log1p(std::exp(-eta)) : -std::log1p(std::exp(eta));
      if (!std::isfinite(ll)) ll = -std::numeric_limits<double>::max();
    }
    return ll;
  };
  double cur = loglik(m.intercept, m.slope);
  m.converged = false;
  for (int it = 0; it < 100; ++it) {
    std::array<double, 2> g{0.0, 0.0};
    std::array<double, 4> h{0.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-(m.intercept + m.slope * x[i])));
      const double w = p * (1.0 - p);
      const double r = labels[i] - p;
      g[0] += r, g[1] += r * x[i];
      h[0] += w, h[1] += w * x[i], h[3] += w * x[i] * x[i];
    }
    h[2] = h[1];
    // Gradient norm per observation, so the tolerance does not scale with n.
    if (std::hypot(g[0], g[1]) / n < 1e-8) {
      m.converged = true;
      break;
    }
    std::array<double, 2> d{};
    if (!solve2(h, g, d)) break;
    double step = 1.0;
    bool moved = false;
    for (int half = 0; half < 40; ++half, step *= 0.5) {
      const double b0 = m.intercept + step * d[0], b1 = m.slope + step * d[1];
      const double cand = loglik(b0, b1);
      if (cand >= cur) {
        m.intercept = b0, m.slope = b1, cur = cand, moved = true;
        break;
      }
    }
    if (!moved) {
      m.converged = true;  // no ascent direction left at machine precision
      break;
    }
    if (std::fabs(m.intercept) > kCap || std::fabs(m.slope) > kCap) break;
  }
  const bool separable = max0 < min1 || max1 < min0;
  if (separable || std::fabs(m.intercept) > kCap || std::fabs(m.slope) > kCap) {
    m.separated = true;
    m.intercept = std::clamp(m.intercept, -kCap, kCap);
    m.slope = std::clamp(m.slope, -kCap, kCap);
  }
  m.loglik = loglik(m.intercept, m.slope);
  return m;
}

double PoissonModel::rate(double x) const { return std::exp(intercept + slope * x); }

PoissonModel fit_poisson(std::span<const double> x, std::span<const double> counts) {
  if (x.size() != counts.size()) throw DegenerateInput("fit_poisson: predictor and count lengths differ");
  require_size(x.size(), 20, "fit_poisson");
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0) throw DegenerateInput("fit_poisson: counts must be non-negative");
    total += c;
  }
  if (!(total > 0.0)) throw DegenerateInput("fit_poisson: all counts are zero");
  const bool constant_x = !(stddev(x) > 0.0);

  const double n = static_cast<double>(x.size());
  PoissonModel m;
  m.intercept = std::log(total / n);
  auto loglik = [&](double b0, double b1) {
    double ll = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double eta = b0 + b1 * x[i];
      ll += counts[i] * eta - std::exp(eta) - std::lgamma(counts[i] + 1.0);
    }
    return std::isfinite(ll) ? ll : -std::numeric_limits<double>::max();
  };
  double cur = loglik(m.intercept, m.slope);
  m.converged = constant_x;
  for (int it = 0; it < 100 && !constant_x; ++it) {
    std::array<double, 2> g{0.0, 0.0};
    std::array<double, 4> h{0.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double mu = std::exp(m.intercept + m.slope * x[i]);
      const double r = counts[i] - mu;
      g[0] += r, g[1] += r * x[i];
      h[0] += mu, h[1] += mu * x[i], h[3] += mu * x[i] * x[i];
    }
    h[2] = h[1];
    // Gradient norm per observation, so the tolerance does not scale with n.
    if (std::hypot(g[0], g[1]) / n < 1e-8) {
      m.converged = true;
      break;
    }
    std::array<double, 2> d{};
    if (!solve2(h, g, d)) break;
    double step = 1.0;
    bool moved = false;
    for (int half = 0; half < 40; ++half, step *= 0.5) {
      const double b0 = m.intercept + step * d[0], b1 = m.slope + step * d[1];
      const double cand = loglik(b0, b1);
      if (cand >= cur) {
        m.intercept = b0, m.slope = b1, cur = cand, moved = true;
        break;
      }
    }
    if (!moved) {
      m.converged = true;
      break;
    }
  }
  m.loglik = cur;
  return m;
}

// ------------------------------------------------------------ circular tests

CircularUniformity circular_uniformity(std::span<const double> angles) {
  require_size(angles.size(), 10, "circular_uniformity");
  const double n = static_cast<double>(angles.size());
  double c = 0.0, s = 0.0;
  for (double a : angles) c += std::cos(a), s += std::sin(a);
  CircularUniformity out;
  const double rn = std::hypot(c, s);
  out.rayleigh_R = rn / n;
  // Zar's large-sample approximation.
  out.rayleigh_p = std::clamp(std::exp(std::sqrt(1.0 + 4.0 * n + 4.0 * (n * n - rn * rn)) - (1.0 + 2.0 * n)), 0.0, 1.0);

  std::vector<double> u;
  for (double a : angles) u.push_back(wrap_angle(a) / kTwoPi);
  std::sort(u.begin(), u.end());
  double dplus = 0.0, dminus = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dplus = std::max(dplus, static_cast<double>(i + 1) / n - u[i]);
    dminus = std::max(dminus, u[i] - static_cast<double>(i) / n);
  }
  out.kuiper_V = dplus + dminus;
  const double lambda = out.kuiper_V * (std::sqrt(n) + 0.155 + 0.24 / std::sqrt(n));
  if (lambda < 0.4) {
    out.kuiper_p = 1.0;
  } else {
    double p = 0.0;
    for (int j = 1; j <= 100; ++j) {
      const double l2 = static_cast<double>(j * j) * lambda * lambda;
      const double term = 2.0 * (4.0 * l2 - 1.0) * std::exp(-2.0 * l2);
      p += term;
      if (std::fabs(term) < 1e-16) break;
    }
    out.kuiper_p = std::clamp(p, 0.0, 1.0);
  }
  return out;
}

// -------------------------------------------------------- permutation tests

double chi2_statistic(const Table& t) {
  const std::size_t R = t.size(), C = R ? t[0].size() : 0;
  std::vector<double> row(R, 0.0), col(C, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) row[i] += t[i][j], col[j] += t[i][j], total += t[i][j];
  if (!(total > 0.0)) return 0.0;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      const double e = row[i] * col[j] / total;
      if (e > 0.0) chi2 += (t[i][j] - e) * (t[i][j] - e) / e;
    }
  return chi2;
}

double chi2_permutation(const Table& t, int n_perms, std::uint64_t seed) {
  const std::size_t R = t.size();
  if (R < 2) throw DegenerateInput("chi2_permutation: table needs at least 2 rows");
  const std::size_t C = t[0].size();
  std::vector<std::size_t> rows, cols;
  for (std::size_t i = 0; i < R; ++i) {
    if (t[i].size() != C) throw DegenerateInput("chi2_permutation: ragged table");
    for (std::size_t j = 0; j < C; ++j) {
      const double v = t[i][j];
      if (v < 0.0 || v != std::floor(v)) throw DegenerateInput("chi2_permutation: counts must be whole numbers");
      for (int k = 0; k < static_cast<int>(v); ++k) rows.push_back(i), cols.push_back(j);
    }
  }
  if (rows.size() < 20) throw DegenerateInput("chi2_permutation: table total must be at least 20");
  if (n_perms < 1) throw DegenerateInput("chi2_permutation: n_perms must be positive");
  const double observed = chi2_statistic(t);
  std::vector<char> exceed(static_cast<std::size_t>(n_perms), 0);
  parallel_for(exceed.size(), [&](std::size_t p) {
    Rng rng(derive_seed(seed, {p}));
    std::vector<std::size_t> perm = cols;
    rng.shuffle(perm);
    Table shuffled(R, std::vector<double>(C, 0.0));
    for (std::size_t k = 0; k < rows.size(); ++k) shuffled[rows[k]][perm[k]] += 1.0;
    exceed[p] = chi2_statistic(shuffled) >= observed * (1.0 - 1e-12);
  });
  return static_cast<double>(std::count(exceed.begin(), exceed.end(), 1)) / n_perms;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateInput("pearson: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

MantelResult mantel(const Table& a, const Table& b, int n_perms, std::uint64_t seed) {
  const std::size_t n = a.size();
  if (n < 3 || b.size() != n) throw DegenerateInput("mantel: matrices must be square, equal-sized and at least 3x3");
  for (std::size_t i = 0; i < n; ++i)
    if (a[i].size() != n || b[i].size() != n) throw DegenerateInput("mantel: matrices must be square");
  if (n_perms < 1) throw DegenerateInput("mantel: n_perms must be positive");
  auto upper = [n](const Table& m, const std::vector<std::size_t>& p) {
    std::vector<double> v;
    v.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) v.push_back(m[p[i]][p[j]]);
    return v;
  };
  std::vector<std::size_t> ident(n);
  std::iota(ident.begin(), ident.end(), 0);
  const std::vector<double> va = upper(a, ident);
  MantelResult out;
  out.r = pearson(va, upper(b, ident));
  std::vector<char> exceed(static_cast<std::size_t>(n_perms), 0);
  parallel_for(exceed.size(), [&](std::size_t p) {
    Rng rng(derive_seed(seed, {p}));
    std::vector<std::size_t> perm = ident;
    rng.shuffle(perm);
    const double r = pearson(va, upper(b, perm));
    exceed[p] = std::fabs(r) >= std::fabs(out.r) - 1e-12;
  });
  out.p = static_cast<double>(std::count(exceed.begin(), exceed.end(), 1)) / n_perms;
  return out;
}

}  // namespace kalos::stats
