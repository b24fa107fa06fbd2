// kalos: command-line front end for calibration, scoring, diagnostics, noise
// modelling and solver validation. Exit codes: 0 ok, 1 invalid input, 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kalos/calibration.hpp"
#include "kalos/correspondence.hpp"
#include "kalos/dataset_io.hpp"
#include "kalos/diagnostics.hpp"
#include "kalos/noise.hpp"
#include "kalos/parallel.hpp"
#include "kalos/reliability.hpp"
#include "kalos/report.hpp"
#include "kalos/validation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kalos;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("invalid number for " + what + ": '" + s + "'");
  }
}

int to_int(const std::string& s, const std::string& what) {
  const double v = to_double(s, what);
  if (v != std::floor(v)) throw UsageError("expected an integer for " + what + ": '" + s + "'");
  return static_cast<int>(v);
}

std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& t : split(s)) out.push_back(to_double(t, what));
  if (out.empty()) throw UsageError(what + " needs at least one value");
  return out;
}

// "2..8" or "2,3,5".
std::vector<int> parse_int_range(const std::string& s, const std::string& what) {
  std::vector<int> out;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const int lo = to_int(s.substr(0, dots), what), hi = to_int(s.substr(dots + 2), what);
    if (lo > hi) throw UsageError(what + " range is empty");
    for (int i = lo; i <= hi; ++i) out.push_back(i);
  } else {
    for (const auto& t : split(s)) out.push_back(to_int(t, what));
  }
  if (out.empty()) throw UsageError(what + " needs at least one value");
  return out;
}

DistanceMetric metric_of(const std::string& s) {
  if (auto m = parse_metric(s)) return *m;
  throw UsageError("unknown metric '" + s + "'");
}
Solver solver_of(const std::string& s) {
  if (auto v = parse_solver(s)) return *v;
  throw UsageError("unknown solver '" + s + "'");
}
CostFunction cost_of(const std::string& s) {
  if (auto v = parse_cost_function(s)) return *v;
  throw UsageError("unknown cost function '" + s + "'");
}

void require_file(const std::string& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " is required");
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p);
}

Dataset load_dataset(const std::string& p, const std::string& what = "--dataset") {
  require_file(p, what);
  return parse_dataset(p);
}

json input_entry(const std::string& p) { return {{"file", fs::path(p).filename().string()}, {"hash", file_hash(p)}}; }

json envelope(const std::string& command, const json& inputs, std::uint64_t seed) {
  return {{"tool", "kalos"}, {"version", kVersion}, {"command", command}, {"inputs", inputs}, {"seed", seed}};
}

// ---------------------------------------------------------------------------
// Shared matching configuration

struct MatchFlags {
  std::string config_file;
  std::string metric = "box_iou";
  std::string tau = "0.5";
  std::string solver = "greedy";
  std::string cost = "soft";
  std::string aggregation = "both";
  std::string calibration;
  std::uint64_t seed = 0;
  CLI::Option* o_metric = nullptr;
  CLI::Option* o_tau = nullptr;
  CLI::Option* o_solver = nullptr;
  CLI::Option* o_cost = nullptr;
  CLI::Option* o_aggregation = nullptr;
  CLI::Option* o_seed = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "JSON run config (a report's \"config\" object is accepted)");
    o_metric = app->add_option("--metric", metric, "distance metric");
    o_tau = app->add_option("--tau", tau, "matching threshold in (0, 1] or 'auto'");
    o_solver = app->add_option("--solver", solver, "greedy | shm | ahc");
    o_cost = app->add_option("--cost", cost, "soft | neg");
    o_aggregation = app->add_option("--aggregation", aggregation, "mean | global | both");
    app->add_option("--calibration", calibration, "calibration report used by --tau auto");
    o_seed = app->add_option("--seed", seed, "seed");
  }
};

struct ResolvedMatch {
  MatchConfig config;
  std::string aggregation;
  std::uint64_t seed = 0;
  json echo;
  json inputs = json::object();
};

ResolvedMatch resolve(MatchFlags f) {
  if (!f.config_file.empty()) {
    require_file(f.config_file, "--config");
    json j;
    try {
      std::ifstream in(f.config_file);
      j = json::parse(in);
    } catch (const std::exception& e) {
      throw UsageError("config file: " + std::string(e.what()));
    }
    if (j.contains("config")) j = j["config"];
    auto take = [&](const char* key, std::string& dst, CLI::Option* o) {
      if (j.contains(key) && !o->count()) dst = j[key].is_string() ? j[key].get<std::string>() : j[key].dump();
    };
    take("metric", f.metric, f.o_metric);
    take("tau", f.tau, f.o_tau);
    take("solver", f.solver, f.o_solver);
    take("cost", f.cost, f.o_cost);
    take("aggregation", f.aggregation, f.o_aggregation);
    if (j.contains("seed") && !f.o_seed->count()) f.seed = j["seed"].get<std::uint64_t>();
  }
  ResolvedMatch r;
  r.config.metric = metric_of(f.metric);
  r.config.solver = solver_of(f.solver);
  r.config.cost = cost_of(f.cost);
  if (f.aggregation != "mean" && f.aggregation != "global" && f.aggregation != "both")
    throw UsageError("unknown aggregation '" + f.aggregation + "'");
  r.aggregation = f.aggregation;
  r.seed = f.seed;
  std::string tau_source = "fixed";
  if (f.tau == "auto") {
    if (f.calibration.empty())
      throw UsageError("--tau auto needs a calibration report (--calibration FILE from 'kalos calibrate')");
    require_file(f.calibration, "--calibration");
    std::ifstream in(f.calibration);
    const json cal = json::parse(in, nullptr, false);
    const std::string m{metric_name(r.config.metric)};
    if (cal.is_discarded() || !cal.contains("metrics") || !cal["metrics"].contains(m) ||
        !cal["metrics"][m].contains("tau_star") || !cal["metrics"][m]["tau_star"].is_number())
      throw UsageError("calibration report has no tau_star for metric " + m);
    r.config.tau = cal["metrics"][m]["tau_star"].get<double>();
    tau_source = "calibrated";
    r.inputs["calibration"] = input_entry(f.calibration);
  } else {
    r.config.tau = to_double(f.tau, "--tau");
  }
  if (!(r.config.tau > 0.0 && r.config.tau <= 1.0)) throw UsageError("--tau must lie in (0, 1]");
  r.echo = {{"metric", metric_name(r.config.metric)}, {"tau", r.config.tau},
            {"solver", solver_name(r.config.solver)}, {"cost", cost_function_name(r.config.cost)},
            {"aggregation", r.aggregation}, {"seed", r.seed},
            {"notation", config_notation(r.config)}, {"tau_source", tau_source}};
  return r;
}

json band_json(const std::optional<double>& v) {
  return v ? json(band_name(band_of(*v))) : json(nullptr);
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  std::string dataset, metrics = "box_iou", pairing = "all_pairs", stratify = "none", out;
  int images_per_anchor = 1;
  int bootstrap = 0;
  int grid = 1001;
  std::uint64_t seed = 0;
};

json bootstrap_json(const BootstrapTable& t) {
  json entries = json::array();
  for (const auto& e : t.entries)
    entries.push_back({{"stratum", stratum_name(e.stratum)}, {"iterations", e.iterations},
                       {"valid_iterations", e.valid_iterations}, {"no_crossover", e.no_crossover},
                       {"tau_mean", e.tau_mean}, {"tau_ci", {e.tau_lo, e.tau_hi}},
                       {"ks_mean", e.ks_mean}, {"ks_ci", {e.ks_lo, e.ks_hi}}});
  return {{"iterations", t.iterations}, {"seed", t.seed}, {"entries", entries}};
}

int run_calibrate(const CalibrateArgs& a) {
  const Dataset d = load_dataset(a.dataset);
  if (a.out.empty()) throw UsageError("--out is required");
  SamplingOptions s;
  if (auto m = parse_pairing_mode(a.pairing)) s.mode = *m;
  else throw UsageError("unknown pairing mode '" + a.pairing + "'");
  if (a.stratify != "none" && a.stratify != "size") throw UsageError("--stratify must be none or size");
  if (a.images_per_anchor < 1) throw UsageError("--images-per-anchor must be positive");
  if (a.bootstrap < 0) throw UsageError("--bootstrap must be >= 0");
  if (a.grid < 3) throw UsageError("--grid must be at least 3");
  s.images_per_anchor = a.images_per_anchor;
  s.seed = a.seed;

  std::vector<DistanceMetric> metrics;
  for (const auto& m : split(a.metrics)) metrics.push_back(metric_of(m));
  if (metrics.empty()) throw UsageError("--metrics needs at least one metric");

  json per_metric = json::object();
  std::vector<MetricRank> ranks;
  const fs::path out(a.out);
  for (DistanceMetric m : metrics) {
    const auto samples = sample_disagreement(d, m, s);
    const auto cr = estimate_tau_star(samples, static_cast<std::size_t>(a.grid));
    ranks.push_back({m, cr.ks, cr.tau_star, cr.no_crossover});
    json entry = {{"tau_star", cr.tau_star}, {"ks", cr.ks}, {"ks_argmax", cr.ks_argmax},
                  {"no_crossover", cr.no_crossover}, {"crossover_candidates", cr.crossover_candidates},
                  {"bandwidth_do", cr.bandwidth_do}, {"bandwidth_de", cr.bandwidth_de},
                  {"n_observed", cr.n_observed}, {"n_expected", cr.n_expected},
                  {"density_grid", {{"grid_point", cr.grid}, {"f_do", cr.f_do}, {"f_de", cr.f_de}}}};
    if (a.bootstrap > 0) {
      BootstrapOptions b;
      b.iterations = static_cast<std::size_t>(a.bootstrap);
      b.seed = a.seed;
      b.stratify_by_size = a.stratify == "size";
      b.grid_size = static_cast<std::size_t>(a.grid);
      entry["bootstrap"] = bootstrap_json(bootstrap_calibration(d, m, s, b));
    }
    per_metric[std::string(metric_name(m))] = entry;
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < cr.grid.size(); ++i)
      rows.push_back({format_number(cr.grid[i]), format_number(cr.f_do[i]), format_number(cr.f_de[i])});
    write_csv(out.parent_path() / (out.stem().string() + "." + std::string(metric_name(m)) + ".density.csv"),
              {"grid_point", "f_do", "f_de"}, rows);
  }
  std::stable_sort(ranks.begin(), ranks.end(), [](const MetricRank& x, const MetricRank& y) {
    if (x.ks != y.ks) return x.ks > y.ks;
    return metric_name(x.metric) < metric_name(y.metric);
  });
  json ranking = json::array();
  for (const auto& r : ranks)
    ranking.push_back({{"metric", metric_name(r.metric)}, {"ks", r.ks}, {"tau_star", r.tau_star},
                       {"no_crossover", r.no_crossover}});

  json rep = envelope("calibrate", {{"dataset", input_entry(a.dataset)}}, a.seed);
  rep["config"] = {{"metrics", a.metrics}, {"pairing", pairing_mode_name(s.mode)},
                   {"images_per_anchor", a.images_per_anchor}, {"bootstrap", a.bootstrap},
                   {"stratify", a.stratify}, {"grid", a.grid}, {"seed", a.seed}};
  rep["metrics"] = per_metric;
  rep["ranking"] = ranking;
  rep["recommended"] = {{"metric", metric_name(ranks.front().metric)}, {"tau_star", ranks.front().tau_star}};
  write_json(out, rep);
  return 0;
}

// ---------------------------------------------------------------------------
// score

int run_score(const std::string& dataset, const MatchFlags& f, const std::string& out_dir) {
  const Dataset d = load_dataset(dataset);
  const ResolvedMatch m = resolve(f);
  if (out_dir.empty()) throw UsageError("--out is required");
  const PipelineResult r = run_pipeline(d, m.config);

  json inputs = m.inputs;
  inputs["dataset"] = input_entry(dataset);
  json rep = envelope("score", inputs, m.seed);
  rep["config"] = m.echo;
  if (m.aggregation != "global") {
    rep["mean_alpha"] = optional_json(r.mean.mean);
    rep["mean_band"] = band_json(r.mean.mean);
  }
  if (m.aggregation != "mean") {
    rep["global_alpha"] = optional_json(r.global.value);
    rep["global_band"] = band_json(r.global.value);
    rep["global_n_pairable"] = r.global.n_pairable;
  }
  rep["n_images"] = r.mean.images.size();
  rep["undefined_count"] = r.mean.undefined_count;
  rep["empty_count"] = r.mean.empty_count;
  std::size_t units = 0;
  for (const auto& u : r.units) units += u.units.size();
  rep["n_units"] = units;
  json per_image = json::array();
  std::vector<std::vector<std::string>> rows;
  for (const auto& im : r.mean.images) {
    per_image.push_back({{"image_id", im.image_id}, {"alpha", optional_json(im.alpha.value)},
                         {"band", band_json(im.alpha.value)}, {"empty", im.empty},
                         {"n_pairable", im.alpha.n_pairable}});
    rows.push_back({im.image_id, csv_cell(im.alpha.value), im.empty ? "1" : "0"});
  }
  rep["per_image"] = per_image;
  write_json(fs::path(out_dir) / "score.json", rep);
  write_csv(fs::path(out_dir) / "per_image.csv", {"image_id", "alpha", "empty"}, rows);
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseArgs {
  std::string dataset, analyses = "lsa,class,vitality,collab,dist", out;
  std::string thresholds = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  std::optional<double> anchor;
  std::string vitality_mode = "rerun";
  std::string session2, intra_rater;
  int bins = 20;
};

int run_diagnose(const DiagnoseArgs& a, const MatchFlags& f) {
  const Dataset d = load_dataset(a.dataset);
  const ResolvedMatch m = resolve(f);
  if (a.out.empty()) throw UsageError("--out is required");
  const auto wanted = split(a.analyses);
  static const std::vector<std::string> known{"lsa", "class", "vitality", "collab", "dist", "intra"};
  for (const auto& w : wanted)
    if (std::find(known.begin(), known.end(), w) == known.end()) throw UsageError("unknown analysis '" + w + "'");
  auto want = [&](const char* n) { return std::find(wanted.begin(), wanted.end(), n) != wanted.end(); };
  if (a.vitality_mode != "rerun" && a.vitality_mode != "mask") throw UsageError("--vitality-mode must be rerun or mask");
  if (a.bins < 1) throw UsageError("--bins must be positive");
  const std::vector<double> ts = parse_doubles(a.thresholds, "--thresholds");

  json inputs = m.inputs;
  inputs["dataset"] = input_entry(a.dataset);
  if (!a.session2.empty()) inputs["session2"] = input_entry(a.session2);
  auto base = [&](const char* analysis) {
    json j = envelope("diagnose", inputs, m.seed);
    j["config"] = m.echo;
    j["analysis"] = analysis;
    return j;
  };
  const fs::path dir(a.out);
  const PipelineResult full = run_pipeline(d, m.config);

  if (want("lsa")) {
    const auto c = localization_sensitivity(d, m.config, ts, a.anchor);
    json j = base("lsa"), pts = json::array();
    std::vector<std::vector<std::string>> rows;
    std::size_t undefined = 0;
    for (const auto& p : c.points) {
      pts.push_back({{"tau_s", p.tau_s}, {"mean_alpha", optional_json(p.mean_alpha)},
                     {"global_alpha", optional_json(p.global_alpha)}});
      rows.push_back({format_number(p.tau_s), csv_cell(p.mean_alpha), csv_cell(p.global_alpha)});
      undefined += !p.mean_alpha;
    }
    j["points"] = pts;
    j["anchor_tau_s"] = c.anchor_tau_s;
    j["delta"] = optional_json(c.delta);
    j["undefined_count"] = undefined;
    write_json(dir / "lsa.json", j);
    write_csv(dir / "lsa.csv", {"tau_s", "mean_alpha", "global_alpha"}, rows);
  }
  if (want("class")) {
    std::vector<std::string> cats;
    for (const auto& c : d.categories) cats.push_back(c.id);
    json j = base("class"), table = json::array();
    std::vector<std::vector<std::string>> rows;
    std::size_t undefined = 0;
    for (const auto& s : class_table(full.matrices, cats)) {
      table.push_back({{"category", s.category}, {"alpha", optional_json(s.alpha.value)},
                       {"band", band_json(s.alpha.value)}, {"support", s.support}});
      rows.push_back({s.category, csv_cell(s.alpha.value), std::to_string(s.support)});
      undefined += !s.alpha.value;
    }
    j["classes"] = table;
    j["undefined_count"] = undefined;
    write_json(dir / "class.json", j);
    write_csv(dir / "class.csv", {"category", "alpha", "support"}, rows);
  }
  if (want("vitality")) {
    const auto mode = a.vitality_mode == "mask" ? VitalityMode::RowMask : VitalityMode::Rerun;
    json j = base("vitality"), table = json::array();
    std::vector<std::vector<std::string>> rows;
    std::size_t undefined = 0;
    for (const auto& v : vitality_table(d, m.config, mode)) {
      table.push_back({{"rater", v.rater}, {"alpha_full", optional_json(v.alpha_full)},
                       {"alpha_without", optional_json(v.alpha_without)}, {"v", optional_json(v.v)}});
      rows.push_back({v.rater, csv_cell(v.alpha_full), csv_cell(v.alpha_without), csv_cell(v.v)});
      undefined += !v.v;
    }
    j["mode"] = a.vitality_mode;
    j["raters"] = table;
    j["undefined_count"] = undefined;
    write_json(dir / "vitality.json", j);
    write_csv(dir / "vitality.csv", {"rater", "alpha_full", "alpha_without", "v"}, rows);
  }
  if (want("collab")) {
    const auto cm = collaboration_matrix(d, m.config);
    json j = base("collab"), entries = json::array();
    std::vector<std::vector<std::string>> rows;
    std::size_t absent = 0;
    for (std::size_t i = 0; i < cm.raters.size(); ++i) {
      std::vector<std::string> row{cm.raters[i]};
      for (std::size_t k = 0; k < cm.raters.size(); ++k) {
        row.push_back(csv_cell(cm.entries[i][k]));
        if (k > i) {
          entries.push_back({{"a", cm.raters[i]}, {"b", cm.raters[k]}, {"alpha", optional_json(cm.entries[i][k])}});
          absent += !cm.entries[i][k];
        }
      }
      rows.push_back(row);
    }
    std::vector<std::string> header{"rater"};
    header.insert(header.end(), cm.raters.begin(), cm.raters.end());
    j["raters"] = cm.raters;
    j["pairs"] = entries;
    j["undefined_count"] = absent;
    write_json(dir / "collab.json", j);
    write_csv(dir / "collab.csv", header, rows);
  }
  if (want("dist")) {
    const auto dist = per_image_distribution(full.mean);
    json j = base("dist");
    j["sorted"] = dist.sorted;
    j["mean"] = optional_json(dist.mean);
    j["median"] = optional_json(dist.median);
    j["q1"] = optional_json(dist.q1);
    j["q3"] = optional_json(dist.q3);
    j["undefined_count"] = dist.undefined_count;
    // Histogram over [lo, 1] where lo covers negative scores when present.
    const double lo = dist.sorted.empty() ? 0.0 : std::min(0.0, std::floor(dist.sorted.front() * 10) / 10);
    const double width = (1.0 - lo) / a.bins;
    std::vector<std::size_t> counts(static_cast<std::size_t>(a.bins), 0);
    for (double v : dist.sorted) {
      auto b = static_cast<std::size_t>(std::floor((v - lo) / width));
      counts[std::min(b, counts.size() - 1)]++;
    }
    std::vector<std::vector<std::string>> rows;
    for (std::size_t b = 0; b < counts.size(); ++b)
      rows.push_back({format_number(lo + width * static_cast<double>(b)),
                      format_number(lo + width * static_cast<double>(b + 1)), std::to_string(counts[b])});
    write_json(dir / "dist.json", j);
    write_csv(dir / "dist_hist.csv", {"bin_lo", "bin_hi", "count"}, rows);
  }
  if (want("intra") || !a.session2.empty()) {
    if (a.session2.empty()) throw UsageError("intra analysis needs --session2");
    const Dataset d1 = load_dataset(a.session2, "--session2");
    std::vector<std::string> raters;
    if (!a.intra_rater.empty()) raters.push_back(a.intra_rater);
    else
      for (const auto& r : d.raters)
        if (std::any_of(d1.raters.begin(), d1.raters.end(), [&](const RaterRecord& x) { return x.id == r.id; }))
          raters.push_back(r.id);
    json j = base("intra"), table = json::array();
    std::size_t undefined = 0;
    for (const auto& r : raters) {
      json e = {{"rater", r}};
      try {
        const MeanAlpha ma = intra_annotator(d, d1, r, m.config);
        e["alpha"] = optional_json(ma.mean);
        undefined += !ma.mean;
      } catch (const DiagnosticsError& err) {
        e["alpha"] = nullptr;
        e["error"] = err.what();
        ++undefined;
      }
      table.push_back(e);
    }
    j["raters"] = table;
    j["undefined_count"] = undefined;
    write_json(dir / "intra.json", j);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// fit-noise / generate

struct FitArgs {
  std::string dataset, similarity, proposals, out;
  double iou = 0.5;
  std::uint64_t seed = 0;
  bool sweep = false;
};

int run_fit(const FitArgs& a) {
  const Dataset d = load_dataset(a.dataset);
  if (a.out.empty()) throw UsageError("--out is required");
  if (!(a.iou > 0.0 && a.iou <= 1.0)) throw UsageError("--iou-threshold must lie in (0, 1]");
  json inputs = {{"dataset", input_entry(a.dataset)}};
  FitOptions opt;
  opt.seed = a.seed;
  if (!a.similarity.empty()) {
    require_file(a.similarity, "--similarity");
    opt.similarity_file = a.similarity;
    inputs["similarity"] = input_entry(a.similarity);
  }
  if (!a.proposals.empty()) {
    require_file(a.proposals, "--proposals");
    opt.proposal_file = a.proposals;
    inputs["proposals"] = input_entry(a.proposals);
  }
  const ErrorCorpus corpus = extract_errors(d, a.iou);
  json model = noise_model_to_json(fit_noise_model(corpus, opt));
  json prov = envelope("fit-noise", inputs, a.seed);
  prov["config"] = {{"iou_threshold", a.iou}, {"seed", a.seed}};
  prov["corpus"] = {{"matched", corpus.matched.size()}, {"unmatched", corpus.unmatched.size()},
                    {"topology", corpus.topology.size()}};
  model["provenance"] = prov;
  const fs::path out(a.out);
  write_json(out, model);
  if (a.sweep) {
    std::vector<double> ts;
    for (int i = 1; i <= 9; ++i) ts.push_back(i / 10.0);
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : threshold_sweep(d, ts))
      rows.push_back({format_number(r.iou_threshold), std::to_string(r.matched_same), std::to_string(r.matched_confused),
                      std::to_string(r.unmatched), std::to_string(r.topology)});
    write_csv(out.parent_path() / (out.stem().string() + ".sweep.csv"),
              {"iou_threshold", "matched_same", "matched_confused", "unmatched", "topology"}, rows);
  }
  return 0;
}

NoiseModel load_model(const std::string& p, json& inputs) {
  if (p.empty()) return default_noise_model();
  require_file(p, "--model");
  std::ifstream in(p);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError("model file is not valid JSON: " + p);
  inputs["model"] = input_entry(p);
  try {
    return noise_model_from_json(j);
  } catch (const NoiseError& e) {
    throw UsageError(e.what());
  }
}

json counts_json(const StageCounts& c) {
  return {{"false_negatives", c.false_negatives}, {"false_positives", c.false_positives},
          {"fp_skipped", c.fp_skipped},           {"fragmentations", c.fragmentations},
          {"merges", c.merges},                   {"flips", c.flips},
          {"theoretical", c.theoretical},         {"cannibalized", c.cannibalized}};
}

struct GenerateArgs {
  std::string reference, model, out, prefix = "syn", style_b, groups;
  double lambda = 1.0;
  int raters = 1;
  std::uint64_t seed = 0;
  bool include_reference = false;
};

int run_generate(const GenerateArgs& a) {
  const Dataset ref = load_dataset(a.reference, "--reference");
  if (a.out.empty()) throw UsageError("--out is required");
  if (!(a.lambda >= 0.0)) throw UsageError("--lambda must be >= 0");
  json inputs = {{"reference", input_entry(a.reference)}};
  const NoiseModel model = load_model(a.model, inputs);
  SynthesisResult r;
  json config = {{"lambda", a.lambda}, {"seed", a.seed}, {"model_default", a.model.empty()}};
  if (!a.style_b.empty()) {
    const Dataset b = load_dataset(a.style_b, "--style-b");
    inputs["style_b"] = input_entry(a.style_b);
    const auto g = parse_int_range(a.groups.empty() ? "1,1" : a.groups, "--groups");
    if (g.size() != 2 || g[0] < 0 || g[1] < 0 || g[0] + g[1] < 1) throw UsageError("--groups needs two counts, e.g. 3,3");
    r = generate_collaboration(ref, b, g[0], g[1], model, a.lambda, a.seed);
    config["groups"] = g;
  } else {
    if (a.raters < 1) throw UsageError("--raters must be positive");
    GenerateOptions g;
    g.lambda = a.lambda;
    g.raters = a.raters;
    g.seed = a.seed;
    g.rater_prefix = a.prefix;
    r = generate(ref, model, g);
    config["raters"] = a.raters;
    config["prefix"] = a.prefix;
  }
  config["include_reference"] = a.include_reference;
  const Dataset out_ds = a.include_reference ? combine_raters(ref, r.dataset) : r.dataset;
  const fs::path out(a.out);
  write_json(out, dataset_to_json(out_ds));

  json side = envelope("generate", inputs, a.seed);
  side["config"] = config;
  side["sources"] = sources_to_json(r);
  json fates = json::object();
  for (const auto& [key, fate] : r.fate) fates[key.first][key.second] = fate_name(fate);
  side["fates"] = fates;
  side["totals"] = counts_json(r.totals);
  side["signal_loss"] = r.signal_loss;
  write_json(out.parent_path() / (out.stem().string() + ".sources.json"), side);
  return 0;
}

// ---------------------------------------------------------------------------
// validate / stability

struct ValidateArgs {
  std::string reference, model, out;
  std::string lambdas = "0.25,0.5,1,2,5", raters = "3", solvers = "greedy", costs = "soft", collab;
  std::string metric = "box_iou";
  double tau = 0.5, collab_lambda = 1.0, style_lambda = 2.0;
  int seeds = 1;
  std::uint64_t seed = 0;
};

int run_validate(const ValidateArgs& a) {
  const Dataset ref = load_dataset(a.reference, "--reference");
  if (a.out.empty()) throw UsageError("--out is required");
  json inputs = {{"reference", input_entry(a.reference)}};
  const NoiseModel model = load_model(a.model, inputs);
  SuiteOptions o;
  o.lambdas = parse_doubles(a.lambdas, "--lambdas");
  o.rater_counts = parse_int_range(a.raters, "--raters");
  o.solvers.clear();
  for (const auto& s : split(a.solvers)) o.solvers.push_back(solver_of(s));
  o.costs.clear();
  for (const auto& c : split(a.costs)) o.costs.push_back(cost_of(c));
  if (o.solvers.empty() || o.costs.empty()) throw UsageError("--solvers and --costs need at least one value");
  for (const auto& c : split(a.collab)) {
    const auto parts = split(c, ':');
    if (parts.size() != 2) throw UsageError("--collab entries look like 5:1");
    o.collaboration.push_back({to_int(parts[0], "--collab"), to_int(parts[1], "--collab")});
  }
  if (a.seeds < 1) throw UsageError("--seeds must be positive");
  if (!(a.tau > 0.0 && a.tau <= 1.0)) throw UsageError("--tau must lie in (0, 1]");
  o.seeds = a.seeds;
  o.seed = a.seed;
  o.metric = metric_of(a.metric);
  o.tau = a.tau;
  o.collaboration_lambda = a.collab_lambda;
  o.style_lambda = a.style_lambda;
  const ExperimentReport r = run_suite(ref, model, o);

  json rep = envelope("validate", inputs, a.seed);
  rep["config"] = {{"lambdas", o.lambdas}, {"raters", o.rater_counts}, {"solvers", split(a.solvers)},
                   {"costs", split(a.costs)}, {"seeds", a.seeds}, {"seed", a.seed}, {"metric", a.metric},
                   {"tau", a.tau}, {"collab", a.collab}, {"collab_lambda", a.collab_lambda},
                   {"style_lambda", a.style_lambda}};
  json rows = json::array();
  std::vector<std::vector<std::string>> ri, f1, outcomes, roi, clusters;
  std::size_t undefined = 0, failed = 0;
  for (const auto& row : r.rows) {
    const std::vector<std::string> key{format_number(row.lambda), std::to_string(row.raters),
                                       std::string(solver_name(row.solver)), std::string(cost_function_name(row.cost)),
                                       std::to_string(row.seed_index)};
    json j = {{"lambda", row.lambda}, {"raters", row.raters}, {"solver", solver_name(row.solver)},
              {"cost", cost_function_name(row.cost)}, {"seed_index", row.seed_index},
              {"rand_index", optional_json(row.rand_index)}, {"precision", optional_json(row.metrics.precision)},
              {"recall", optional_json(row.metrics.recall)}, {"f1", optional_json(row.metrics.f1)},
              {"tp", row.metrics.tp}, {"fp", row.metrics.fp}, {"missed_opportunity", row.metrics.missed},
              {"cuckoo_egg", row.metrics.cuckoo}, {"mean_alpha", optional_json(row.mean_alpha)},
              {"global_alpha", optional_json(row.global_alpha)}};
    if (row.error) {
      j["error"] = *row.error;
      ++failed;
    }
    undefined += !row.mean_alpha;
    rows.push_back(j);
    auto with = [&](std::vector<std::string> extra) {
      std::vector<std::string> v = key;
      v.insert(v.end(), extra.begin(), extra.end());
      return v;
    };
    ri.push_back(with({csv_cell(row.rand_index)}));
    f1.push_back(with({csv_cell(row.metrics.precision), csv_cell(row.metrics.recall), csv_cell(row.metrics.f1)}));
    outcomes.push_back(with({std::to_string(row.metrics.tp), std::to_string(row.metrics.fp),
                             std::to_string(row.metrics.missed), std::to_string(row.metrics.cuckoo)}));
    roi.push_back(with({csv_cell(row.mean_alpha), csv_cell(row.global_alpha)}));
  }
  json collab = json::array();
  for (const auto& c : r.collaboration) {
    json j = {{"group_a", c.group_a}, {"group_b", c.group_b}, {"seed_index", c.seed_index},
              {"mean_alpha", optional_json(c.mean_alpha)}};
    if (c.error) {
      j["error"] = *c.error;
      ++failed;
    }
    collab.push_back(j);
    clusters.push_back({std::to_string(c.group_a), std::to_string(c.group_b), std::to_string(c.seed_index),
                        csv_cell(c.mean_alpha)});
  }
  rep["rows"] = rows;
  rep["collaboration"] = collab;
  rep["undefined_count"] = undefined;
  rep["failed_cells"] = failed;
  const fs::path dir(a.out);
  write_json(dir / "report.json", rep);
  const std::vector<std::string> key{"lambda", "raters", "solver", "cost", "seed_index"};
  auto hdr = [&](std::vector<std::string> extra) {
    std::vector<std::string> v = key;
    v.insert(v.end(), extra.begin(), extra.end());
    return v;
  };
  write_csv(dir / "fig3_ri.csv", hdr({"rand_index"}), ri);
  write_csv(dir / "fig4_f1.csv", hdr({"precision", "recall", "f1"}), f1);
  write_csv(dir / "fig5_outcomes.csv", hdr({"tp", "fp", "missed_opportunity", "cuckoo_egg"}), outcomes);
  write_csv(dir / "fig6_roi.csv", hdr({"mean_alpha", "global_alpha"}), roi);
  write_csv(dir / "fig7_clusters.csv", {"group_a", "group_b", "seed_index", "mean_alpha"}, clusters);
  return 0;
}

int run_stability(const std::string& dataset, const MatchFlags& f, int perms, const std::string& out) {
  const Dataset d = load_dataset(dataset);
  const ResolvedMatch m = resolve(f);
  if (out.empty()) throw UsageError("--out is required");
  if (perms < 2) throw UsageError("--perms must be at least 2");
  const auto r = permutation_stability(d, m.config, perms, m.seed);
  json inputs = m.inputs;
  inputs["dataset"] = input_entry(dataset);
  json rep = envelope("stability", inputs, m.seed);
  rep["config"] = m.echo;
  rep["perms"] = perms;
  rep["ari"] = r.ari;
  rep["ari_mean"] = r.mean;
  rep["ari_min"] = r.min;
  write_json(out, rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kalos: inter-annotator agreement for spatial annotations"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  unsigned jobs = 1;
  app.add_option("--jobs,-j", jobs, "worker threads (0 = all cores)")->envname("KALOS_JOBS");

  CalibrateArgs cal;
  auto* c_cal = app.add_subcommand("calibrate", "estimate the matching threshold from disagreement densities");
  c_cal->add_option("--dataset", cal.dataset)->required();
  c_cal->add_option("--metrics", cal.metrics, "comma-separated metric names");
  c_cal->add_option("--pairing", cal.pairing, "all_pairs | best_match");
  c_cal->add_option("--images-per-anchor", cal.images_per_anchor);
  c_cal->add_option("--bootstrap", cal.bootstrap, "bootstrap iterations (0 = none)");
  c_cal->add_option("--stratify", cal.stratify, "none | size");
  c_cal->add_option("--grid", cal.grid, "density grid points");
  c_cal->add_option("--seed", cal.seed);
  c_cal->add_option("--out", cal.out, "report path; density CSVs go next to it")->required();

  std::string score_ds, score_out;
  MatchFlags score_flags;
  auto* c_score = app.add_subcommand("score", "compute agreement for a dataset");
  c_score->add_option("--dataset", score_ds)->required();
  score_flags.add(c_score);
  c_score->add_option("--out", score_out, "output directory")->required();

  DiagnoseArgs diag;
  MatchFlags diag_flags;
  auto* c_diag = app.add_subcommand("diagnose", "agreement diagnostics");
  c_diag->add_option("--dataset", diag.dataset)->required();
  diag_flags.add(c_diag);
  c_diag->add_option("--analyses", diag.analyses, "lsa,class,vitality,collab,dist,intra");
  c_diag->add_option("--thresholds", diag.thresholds, "similarity thresholds for lsa");
  c_diag->add_option("--anchor", diag.anchor, "lsa anchor similarity threshold");
  c_diag->add_option("--vitality-mode", diag.vitality_mode, "rerun | mask");
  c_diag->add_option("--session2", diag.session2, "second session for intra-annotator agreement");
  c_diag->add_option("--intra-rater", diag.intra_rater);
  c_diag->add_option("--bins", diag.bins, "histogram bins for dist");
  c_diag->add_option("--out", diag.out, "output directory")->required();

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit-noise", "fit a noise model from multi-rater annotations");
  c_fit->add_option("--dataset", fit.dataset)->required();
  c_fit->add_option("--similarity", fit.similarity, "category similarity matrix (JSON or CSV)");
  c_fit->add_option("--proposals", fit.proposals, "false-positive proposal pool (JSON)");
  c_fit->add_option("--iou-threshold", fit.iou);
  c_fit->add_option("--seed", fit.seed);
  c_fit->add_flag("--sweep", fit.sweep, "also write a matching-threshold sweep CSV");
  c_fit->add_option("--out", fit.out, "model path")->required();

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "synthesize noisy raters from a reference");
  c_gen->add_option("--reference", gen.reference)->required();
  c_gen->add_option("--model", gen.model, "noise model (default parameters when omitted)");
  c_gen->add_option("--lambda", gen.lambda);
  c_gen->add_option("--raters", gen.raters);
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--prefix", gen.prefix, "synthetic rater name prefix");
  c_gen->add_option("--style-b", gen.style_b, "second reference style for collaboration groups");
  c_gen->add_option("--groups", gen.groups, "group sizes a,b with --style-b");
  c_gen->add_flag("--include-reference", gen.include_reference);
  c_gen->add_option("--out", gen.out, "dataset path; the sources sidecar goes next to it")->required();

  ValidateArgs val;
  auto* c_val = app.add_subcommand("validate", "solver validation sweep on synthetic raters");
  c_val->add_option("--reference", val.reference)->required();
  c_val->add_option("--model", val.model);
  c_val->add_option("--lambdas", val.lambdas);
  c_val->add_option("--raters", val.raters, "e.g. 2..8 or 3,5");
  c_val->add_option("--solvers", val.solvers);
  c_val->add_option("--costs", val.costs);
  c_val->add_option("--collab", val.collab, "group splits, e.g. 5:1,3:3");
  c_val->add_option("--collab-lambda", val.collab_lambda);
  c_val->add_option("--style-lambda", val.style_lambda);
  c_val->add_option("--metric", val.metric);
  c_val->add_option("--tau", val.tau);
  c_val->add_option("--seeds", val.seeds, "seeds per cell");
  c_val->add_option("--seed", val.seed);
  c_val->add_option("--out", val.out, "output directory")->required();

  std::string stab_ds, stab_out;
  int perms = 20;
  MatchFlags stab_flags;
  auto* c_stab = app.add_subcommand("stability", "permutation stability of the solver");
  c_stab->add_option("--dataset", stab_ds)->required();
  stab_flags.add(c_stab);
  c_stab->add_option("--perms", perms);
  c_stab->add_option("--out", stab_out, "report path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  set_default_jobs(jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : jobs);

  try {
    if (c_cal->parsed()) return run_calibrate(cal);
    if (c_score->parsed()) return run_score(score_ds, score_flags, score_out);
    if (c_diag->parsed()) return run_diagnose(diag, diag_flags);
    if (c_fit->parsed()) return run_fit(fit);
    if (c_gen->parsed()) return run_generate(gen);
    if (c_val->parsed()) return run_validate(val);
    if (c_stab->parsed()) return run_stability(stab_ds, stab_flags, perms, stab_out);
  } catch (const UsageError& e) {
    std::cerr << "kalos: " << e.what() << "\n";
    return 1;
  } catch (const DatasetError& e) {
    std::cerr << "kalos: invalid dataset: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "kalos: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kalos: error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
