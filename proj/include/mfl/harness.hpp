// harness.hpp -- experiment orchestration: config parsing, N-sweeps,
// content-addressed trajectory caching, CSV/SVG/manifest emission.
//
// Every stage writes its artifacts first and a stage manifest (with the stage
// key and per-file hashes) last, atomically. A rerun with the same config
// finds matching stage keys and skips recomputation; the final manifest is
// rebuilt deterministically from the stage manifests, so rerunning an
// experiment is bit-identical on the same platform.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "diagnostics.hpp"
#include "field.hpp"
#include "freeenergy.hpp"
#include "io.hpp"
#include "kernels.hpp"
#include "particles.hpp"
#include "pde.hpp"

namespace mfl::harness {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct ExperimentConfig {
  std::string kind;  // chaos_rate | blowup | repulsive_lower_bound | partition_bound | ld_zero
  io::fs::path spec_path;
  json spec_json;
  kernels::PotentialSpec spec;

  double sigma = 1.0;
  double dt = 1e-3;
  double T = 1.0;
  std::vector<double> save_times;
  std::vector<std::size_t> N_list;
  int M = 1;
  std::uint64_t master_seed = 0;

  int grid = 128;
  double pde_dt = 2e-4;
  std::string init = "uniform";
  double kde_bandwidth = 0.0;  // 0: 0.9 (M N)^(-1/(d+4))

  int samples = 1000;       // draws per N (lower bound), or MC samples (partition)
  double f_scale = 0.462;   // separable test-function amplitude (partition)
  double eta = 0.1;         // truncation radius (ld_zero)
  double ld_c = 1.0;
  double ld_weight = 1.0;
  int ld_grid = 64;
  int max_iter = 500;
  double tol = 1e-9;

  io::fs::path out_dir;

  void validate() const {
    require(kind == "chaos_rate" || kind == "blowup" || kind == "repulsive_lower_bound" ||
                kind == "partition_bound" || kind == "ld_zero",
            "experiment: unknown kind '" + kind + "'");
    spec.validate();
    require(sigma >= 0.0, "experiment: sigma must be >= 0");
    require(dt > 0.0 && pde_dt > 0.0, "experiment: time steps must be > 0");
    require(T > 0.0, "experiment: T must be > 0");
    const long steps = std::lround(T / dt);
    require(std::abs(steps * dt - T) <= 1e-9, "experiment: T must be a multiple of dt");
    for (std::size_t i = 1; i < N_list.size(); ++i)
      require(N_list[i] > N_list[i - 1], "experiment: N list must be strictly increasing");
    require(M >= 1, "experiment: M must be >= 1");
    for (double t : save_times)
      require(t > 0.0 && t <= T + 1e-12, "experiment: save times must lie in (0, T]");
  }

  // the canonical identity of the experiment (path-independent)
  json canonical() const {
    json j{{"kind", kind},          {"spec", spec_json},     {"sigma", sigma},
           {"dt", dt},              {"T", T},                {"save_times", save_times},
           {"N_list", N_list},      {"M", M},                {"master_seed", master_seed},
           {"grid", grid},          {"pde_dt", pde_dt},      {"init", init},
           {"kde_bandwidth", kde_bandwidth},                 {"samples", samples},
           {"f_scale", f_scale},    {"eta", eta},            {"ld_c", ld_c},
           {"ld_weight", ld_weight},{"ld_grid", ld_grid},    {"max_iter", max_iter},
           {"tol", tol},            {"schema", kSchemaVersion}};
    return j;
  }
};

inline ExperimentConfig load_experiment(const io::fs::path& path,
                                        const io::fs::path& out_override = {}) {
  const json j = json::parse(io::read_file(path));
  ExperimentConfig cfg;
  cfg.kind = j.at("kind").get<std::string>();
  cfg.spec_path = j.at("spec").get<std::string>();
  if (cfg.spec_path.is_relative()) cfg.spec_path = path.parent_path() / cfg.spec_path;
  require(io::fs::exists(cfg.spec_path), "experiment: spec file not found: " + cfg.spec_path.string());
  cfg.spec_json = json::parse(io::read_file(cfg.spec_path));
  cfg.spec = kernels::spec_from_json(cfg.spec_json);

  cfg.sigma = j.value("sigma", cfg.sigma);
  cfg.dt = j.value("dt", cfg.dt);
  cfg.T = j.value("T", cfg.T);
  cfg.M = j.value("M", cfg.M);
  cfg.master_seed = j.value("master_seed", cfg.master_seed);
  cfg.grid = j.value("grid", cfg.grid);
  cfg.pde_dt = j.value("pde_dt", cfg.pde_dt);
  cfg.init = j.value("init", cfg.init);
  cfg.kde_bandwidth = j.value("kde_bandwidth", cfg.kde_bandwidth);
  cfg.samples = j.value("samples", cfg.samples);
  cfg.f_scale = j.value("f_scale", cfg.f_scale);
  cfg.eta = j.value("eta", cfg.eta);
  cfg.ld_c = j.value("ld_c", cfg.ld_c);
  cfg.ld_weight = j.value("ld_weight", cfg.ld_weight);
  cfg.ld_grid = j.value("ld_grid", cfg.ld_grid);
  cfg.max_iter = j.value("max_iter", cfg.max_iter);
  cfg.tol = j.value("tol", cfg.tol);
  if (j.contains("N_list")) cfg.N_list = j["N_list"].get<std::vector<std::size_t>>();
  if (j.contains("save_times")) {
    cfg.save_times = j["save_times"].get<std::vector<double>>();
  } else if (j.contains("save_every")) {
    const double every = j["save_every"].get<double>();
    require(every > 0.0, "experiment: save_every must be > 0");
    for (double t = every; t <= cfg.T + 1e-12; t += every) cfg.save_times.push_back(std::min(t, cfg.T));
  } else {
    cfg.save_times = {cfg.T};
  }
  cfg.out_dir = out_override.empty() ? io::fs::path(j.value("out", std::string("out"))) : out_override;
  cfg.validate();
  return cfg;
}

inline DensityField make_initial(const std::string& init, int dim, int n) {
  if (init == "uniform") return DensityField::uniform(dim, n);
  if (init.rfind("gaussian:", 0) == 0) {
    const double stddev = std::stod(init.substr(9));
    return DensityField::wrapped_gaussian(dim, n, stddev);
  }
  if (init.rfind("file:", 0) == 0) {
    const io::fs::path bin = init.substr(5);
    const auto side = json::parse(io::read_file(io::fs::path(bin).replace_extension(".json")));
    auto values = io::read_doubles_le(bin);
    const GridShape shape{side.at("d").get<int>(), side.at("n").get<int>()};
    return DensityField::from_values(shape, std::move(values), side.value("t", 0.0));
  }
  throw Error("unknown initial condition '" + init + "'");
}

inline void save_field(const io::fs::path& bin_path, const DensityField& field) {
  io::write_doubles_le(bin_path, field.values());
  json side{{"n", field.n()}, {"d", field.dim()}, {"t", field.time()}};
  io::write_file_atomic(io::fs::path(bin_path).replace_extension(".json"), side.dump(2) + "\n");
}

inline DensityField load_field(const io::fs::path& bin_path) {
  const auto side = json::parse(io::read_file(io::fs::path(bin_path).replace_extension(".json")));
  auto values = io::read_doubles_le(bin_path);
  const GridShape shape{side.at("d").get<int>(), side.at("n").get<int>()};
  return DensityField::from_values(shape, std::move(values), side.value("t", 0.0));
}

struct StageStatus {
  bool cached = false;
  json manifest;
};

struct ExperimentResult {
  io::fs::path out_dir;
  json manifest;
  std::string manifest_sha;
  int cache_hits = 0;
  int cache_misses = 0;
};

namespace detail {

inline std::string key_of(const json& j) { return io::sha256_hex(j.dump()); }

// Look up a stage manifest; valid when its key matches and artifacts exist.
inline std::optional<json> load_stage(const io::fs::path& manifest_path, const std::string& key) {
  if (!io::fs::exists(manifest_path)) return std::nullopt;
  json m;
  try {
    m = json::parse(io::read_file(manifest_path));
  } catch (...) {
    return std::nullopt;
  }
  if (m.value("key", std::string()) != key) return std::nullopt;
  const json artifacts = m.value("artifacts", json::object());
  for (const auto& [file, sha] : artifacts.items()) {
    (void)sha;
    if (!io::fs::exists(manifest_path.parent_path() / file)) return std::nullopt;
  }
  return m;
}

// PDE stage: fields at the save times plus the concentration report.
inline StageStatus pde_stage(const ExperimentConfig& cfg, const io::fs::path& dir) {
  const json key_src{{"stage", "pde"},     {"spec", cfg.spec_json}, {"sigma", cfg.sigma},
                     {"pde_dt", cfg.pde_dt},{"grid", cfg.grid},     {"init", cfg.init},
                     {"save_times", cfg.save_times}};
  const std::string key = key_of(key_src);
  const auto manifest_path = dir / "series.json";
  if (auto cached = load_stage(manifest_path, key)) return {true, *cached};

  const auto rho0 = make_initial(cfg.init, cfg.spec.dimension, cfg.grid);
  const auto result = pde::run_pde(rho0, cfg.spec, cfg.sigma, cfg.pde_dt, cfg.save_times);

  json artifacts = json::object();
  json times = json::array();
  for (std::size_t i = 0; i < result.saved.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "t_%04zu.bin", i);
    save_field(dir / name, result.saved[i]);
    artifacts[name] = io::sha256_file(dir / name);
    times.push_back(result.saved[i].time());
  }
  json m{{"key", key},
         {"artifacts", artifacts},
         {"times", times},
         {"free_energies", result.free_energies},
         {"clipped_mass", result.clipped_mass},
         {"completed", result.completed},
         {"blowup",
          {{"flagged", result.blowup.flagged},
           {"time", result.blowup.time},
           {"reason", result.blowup.reason},
           {"max_ratio", result.blowup.max_ratio},
           {"octave_fraction", result.blowup.octave_fraction},
           {"analytic_supercritical", result.blowup.analytic_supercritical}}}};
  io::write_file_atomic(manifest_path, m.dump(2) + "\n");
  return {false, m};
}

// Ensemble stage for one N: member snapshots at the save times.
inline StageStatus ensemble_stage(const ExperimentConfig& cfg, std::size_t N,
                                  const io::fs::path& dir) {
  const json key_src{{"stage", "ensemble"}, {"spec", cfg.spec_json}, {"sigma", cfg.sigma},
                     {"dt", cfg.dt},        {"T", cfg.T},            {"save_times", cfg.save_times},
                     {"N", N},              {"M", cfg.M},            {"seed", cfg.master_seed},
                     {"init", cfg.init},    {"grid", cfg.grid}};
  const std::string key = key_of(key_src);
  const auto manifest_path = dir / "ensemble.json";
  if (auto cached = load_stage(manifest_path, key)) return {true, *cached};

  particles::EnsembleParams params;
  params.spec = cfg.spec;
  params.sigma = cfg.sigma;
  params.dt = cfg.dt;
  params.save_times = cfg.save_times;
  params.N = N;
  params.M = cfg.M;
  params.master_seed = cfg.master_seed;
  const auto rho0 = make_initial(cfg.init, cfg.spec.dimension, cfg.grid);
  const auto run = particles::run_ensemble(params, rho0);

  json artifacts = json::object();
  json failed = json::array();
  for (int m = 0; m < cfg.M; ++m) {
    if (run.members[m].failed) {
      failed.push_back({{"member", m}, {"error", run.members[m].error}});
      continue;
    }
    for (std::size_t s = 0; s < cfg.save_times.size(); ++s) {
      char name[64];
      std::snprintf(name, sizeof(name), "member_%04d/snap_%04zu.bin", m, s);
      particles::save_snapshot(dir / name, run.members[m].snapshots[s]);
      artifacts[name] = io::sha256_file(dir / name);
    }
  }
  json man{{"key", key}, {"artifacts", artifacts}, {"failed_members", failed},
           {"N", N},     {"M", cfg.M},             {"save_times", cfg.save_times}};
  io::write_file_atomic(manifest_path, man.dump(2) + "\n");
  return {false, man};
}

inline particles::EnsembleRun load_ensemble(const ExperimentConfig& cfg, std::size_t N,
                                            const io::fs::path& dir, const json& stage) {
  particles::EnsembleRun run;
  run.params.spec = cfg.spec;
  run.params.sigma = cfg.sigma;
  run.params.dt = cfg.dt;
  run.params.save_times = cfg.save_times;
  run.params.N = N;
  run.params.M = cfg.M;
  run.params.master_seed = cfg.master_seed;
  run.members.resize(cfg.M);
  std::vector<bool> failed(cfg.M, false);
  for (const auto& f : stage.value("failed_members", json::array()))
    failed[f.at("member").get<int>()] = true;
  for (int m = 0; m < cfg.M; ++m) {
    if (failed[m]) {
      run.members[m].failed = true;
      continue;
    }
    for (std::size_t s = 0; s < cfg.save_times.size(); ++s) {
      char name[64];
      std::snprintf(name, sizeof(name), "member_%04d/snap_%04zu.bin", m, s);
      run.members[m].snapshots.push_back(particles::load_snapshot(dir / name));
    }
  }
  return run;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// chaos_rate: ensembles over the N list, the limit PDE on the grid, KDE
// marginals against the PDE solution, modulated-energy statistics, and the
// N^(-theta) fit over the final-time L1 errors.
// ---------------------------------------------------------------------------
inline ExperimentResult run_chaos_rate(const ExperimentConfig& cfg, ExperimentResult& result) {
  const auto pde_status = detail::pde_stage(cfg, cfg.out_dir / "pde");
  (pde_status.cached ? result.cache_hits : result.cache_misses)++;

  require(pde_status.manifest.value("completed", false),
          "chaos_rate: the PDE run flagged a concentration event");
  std::vector<DensityField> pde_fields;
  for (std::size_t i = 0; i < cfg.save_times.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "t_%04zu.bin", i);
    pde_fields.push_back(load_field(cfg.out_dir / "pde" / name));
  }

  io::CsvTable csv;
  csv.header = {"N", "t", "kl", "l1", "D_mean", "D_stderr", "theta_fit"};
  json stages = json::object();
  stages["pde"] = pde_status.manifest;

  struct Row {
    std::size_t N;
    double t, kl, l1, d_mean, d_stderr;
  };
  std::vector<Row> rows;
  std::vector<std::pair<double, double>> final_errs;
  std::vector<double> final_se;

  for (std::size_t N : cfg.N_list) {
    char nd[32];
    std::snprintf(nd, sizeof(nd), "N_%05zu", N);
    const auto dir = cfg.out_dir / "runs" / nd;
    const auto status = detail::ensemble_stage(cfg, N, dir);
    (status.cached ? result.cache_hits : result.cache_misses)++;
    stages[std::string("ensemble_") + nd] = status.manifest;
    const auto run = detail::load_ensemble(cfg, N, dir, status.manifest);
    const int survivors = run.survivors();
    require(survivors > 0, "chaos_rate: all members failed at N=" + std::to_string(N));

    const double bw = (cfg.kde_bandwidth > 0.0)
                          ? cfg.kde_bandwidth
                          : diagnostics::default_bandwidth(std::size_t(survivors) * N,
                                                           cfg.spec.dimension);
    for (std::size_t s = 0; s < cfg.save_times.size(); ++s) {
      const double t = cfg.save_times[s];
      const auto kde = diagnostics::kde_marginal(run, t, 1, bw, cfg.grid);
      const double kl = diagnostics::kl_divergence(kde.field, pde_fields[s]);
      const double l1 = diagnostics::l1_distance(kde.field, pde_fields[s]);

      const freeenergy::ModulatedEvaluator evaluator(cfg.spec, pde_fields[s]);
      double sum = 0.0, sum2 = 0.0;
      int used = 0;
      for (int m = 0; m < cfg.M; ++m) {
        if (run.members[m].failed) continue;
        const double D = evaluator.evaluate(run.members[m].snapshots[s]);
        sum += D;
        sum2 += D * D;
        ++used;
      }
      const double mean = sum / used;
      const double var = (used > 1) ? (sum2 / used - mean * mean) * used / (used - 1.0) : 0.0;
      rows.push_back({N, t, kl, l1, mean, std::sqrt(std::max(var, 0.0) / used)});

      if (s + 1 == cfg.save_times.size()) {
        final_errs.push_back({double(N), l1});
        // jackknife over members for the error bar on the final-time L1
        std::vector<double> jk;
        for (int m = 0; m < cfg.M; ++m) {
          if (run.members[m].failed) continue;
          particles::EnsembleRun drop = run;
          drop.members[m].failed = true;
          if (drop.survivors() == 0) continue;
          const auto kde_m = diagnostics::kde_marginal(drop, t, 1, bw, cfg.grid);
          jk.push_back(diagnostics::l1_distance(kde_m.field, pde_fields[s]));
        }
        if (jk.size() < 2) {
          final_se.push_back(0.0);
        } else {
          double jm = 0.0;
          for (double v : jk) jm += v;
          jm /= double(jk.size());
          double jv = 0.0;
          for (double v : jk) jv += (v - jm) * (v - jm);
          final_se.push_back(std::sqrt(jv * (jk.size() - 1.0) / jk.size()));
        }
      }
    }
  }

  diagnostics::RateFit fit;
  if (final_errs.size() >= 3) fit = diagnostics::fit_rate(final_errs);
  for (const auto& r : rows) {
    csv.rows.push_back({std::to_string(r.N), io::format_double(r.t), io::format_double(r.kl),
                        io::format_double(r.l1), io::format_double(r.d_mean),
                        io::format_double(r.d_stderr), io::format_double(fit.theta)});
  }
  io::write_file_atomic(cfg.out_dir / "report" / "report.csv", csv.to_string());

  const json schema{{"columns",
                     {{"N", "particle count"},
                      {"t", "save time"},
                      {"kl", "KL(single-particle KDE | PDE solution)"},
                      {"l1", "L1 distance between the KDE and the PDE solution"},
                      {"D_mean", "ensemble mean of the modulated interaction D"},
                      {"D_stderr", "standard error of D over members"},
                      {"theta_fit", "fitted exponent of l1 ~ C N^-theta at the final time"}}}};
  io::write_file_atomic(cfg.out_dir / "report" / "schema.json", schema.dump(2) + "\n");

  std::vector<std::array<double, 2>> pts;
  for (const auto& [n, e] : final_errs) pts.push_back({n, e});
  io::write_file_atomic(cfg.out_dir / "report" / "rate.svg",
                        io::svg_loglog_plot(pts, fit.C, -fit.theta,
                                            "single-particle marginal vs PDE", "N", "L1 error"));

  // monotonicity with error bars: count upward steps; each must sit within
  // the combined jackknife bars, and at most one is allowed
  int inversions = 0;
  bool within_bars = true;
  for (std::size_t i = 0; i + 1 < final_errs.size(); ++i) {
    if (final_errs[i + 1].second > final_errs[i].second) {
      ++inversions;
      if (final_errs[i + 1].second - final_errs[i].second >
          2.0 * (final_se[i] + final_se[i + 1]))
        within_bars = false;
    }
  }

  json results{{"theta", fit.theta},
               {"C", fit.C},
               {"r2", fit.r2},
               {"final_l1", json::array()},
               {"inversions", inversions},
               {"inversions_within_error_bars", within_bars}};
  for (std::size_t i = 0; i < final_errs.size(); ++i)
    results["final_l1"].push_back({{"N", final_errs[i].first},
                                   {"l1", final_errs[i].second},
                                   {"stderr", final_se[i]}});
  result.manifest["stages"] = stages;
  result.manifest["results"] = results;
  result.manifest["artifacts"] = {{"report/report.csv", io::sha256_file(cfg.out_dir / "report" / "report.csv")},
                                  {"report/rate.svg", io::sha256_file(cfg.out_dir / "report" / "rate.svg")}};
  return result;
}

// blowup: run the PDE with the concentration monitor and record the flag.
inline ExperimentResult run_blowup(const ExperimentConfig& cfg, ExperimentResult& result) {
  const auto pde_status = detail::pde_stage(cfg, cfg.out_dir / "pde");
  (pde_status.cached ? result.cache_hits : result.cache_misses)++;
  result.manifest["stages"] = {{"pde", pde_status.manifest}};
  json results = pde_status.manifest.value("blowup", json::object());
  // maximum density trace over the saved fields
  json trace = json::array();
  const json artifacts = pde_status.manifest.value("artifacts", json::object());
  for (const auto& [file, sha] : artifacts.items()) {
    (void)sha;
    const auto field = load_field(cfg.out_dir / "pde" / file);
    trace.push_back({{"t", field.time()}, {"max", field.max_value()}});
  }
  results["max_trace"] = trace;
  result.manifest["results"] = results;
  return result;
}

// repulsive_lower_bound: min of D over i.i.d. draws from rho, fitted in N.
inline ExperimentResult run_repulsive_lower_bound(const ExperimentConfig& cfg,
                                                  ExperimentResult& result) {
  const auto rho = make_initial(cfg.init, cfg.spec.dimension, cfg.grid);
  const freeenergy::ModulatedEvaluator evaluator(cfg.spec, rho);

  json per_n = json::array();
  std::vector<std::pair<double, double>> fit_pts;
  io::CsvTable csv;
  csv.header = {"N", "D_min", "D_mean", "D_stderr", "theta_fit"};

  json stages = json::object();
  for (std::size_t N : cfg.N_list) {
    char nd[32];
    std::snprintf(nd, sizeof(nd), "N_%05zu", N);
    const json key_src{{"stage", "lower_bound"}, {"spec", cfg.spec_json}, {"N", N},
                       {"samples", cfg.samples}, {"seed", cfg.master_seed}, {"init", cfg.init},
                       {"grid", cfg.grid}};
    const std::string key = detail::key_of(key_src);
    const auto mpath = cfg.out_dir / "samples" / nd / "stage.json";
    json stage;
    if (auto cached = detail::load_stage(mpath, key)) {
      stage = *cached;
      result.cache_hits++;
    } else {
      result.cache_misses++;
      double dmin = 1e300, sum = 0.0, sum2 = 0.0;
      std::vector<double> values;
      values.reserve(cfg.samples);
      for (int s = 0; s < cfg.samples; ++s) {
        const auto config = particles::sample_initial(rho, N, cfg.master_seed, std::uint32_t(s));
        const double D = evaluator.evaluate(config);
        values.push_back(D);
        dmin = std::min(dmin, D);
        sum += D;
        sum2 += D * D;
      }
      const double mean = sum / cfg.samples;
      const double var = (sum2 / cfg.samples - mean * mean) * cfg.samples / (cfg.samples - 1.0);
      io::write_doubles_le(mpath.parent_path() / "D.bin", values);
      stage = json{{"key", key},
                   {"artifacts", {{"D.bin", io::sha256_file(mpath.parent_path() / "D.bin")}}},
                   {"N", N},
                   {"min", dmin},
                   {"mean", mean},
                   {"stderr", std::sqrt(std::max(var, 0.0) / cfg.samples)}};
      io::write_file_atomic(mpath, stage.dump(2) + "\n");
    }
    stages[std::string("samples_") + nd] = stage;
    per_n.push_back({{"N", N}, {"min", stage["min"]}, {"mean", stage["mean"]}});
    const double dmin = stage["min"].get<double>();
    require(dmin < 0.0, "lower_bound: min of D is nonnegative; nothing to fit");
    fit_pts.push_back({double(N), -dmin});
  }
  const auto fit = diagnostics::fit_rate(fit_pts);
  for (std::size_t i = 0; i < cfg.N_list.size(); ++i) {
    char nd[32];
    std::snprintf(nd, sizeof(nd), "N_%05zu", cfg.N_list[i]);
    const auto& stage = stages[std::string("samples_") + nd];
    csv.rows.push_back({std::to_string(cfg.N_list[i]), io::format_double(stage["min"].get<double>()),
                        io::format_double(stage["mean"].get<double>()),
                        io::format_double(stage["stderr"].get<double>()),
                        io::format_double(fit.theta)});
  }
  io::write_file_atomic(cfg.out_dir / "report" / "report.csv", csv.to_string());
  std::vector<std::array<double, 2>> pts;
  for (const auto& [n, e] : fit_pts) pts.push_back({n, e});
  io::write_file_atomic(cfg.out_dir / "report" / "rate.svg",
                        io::svg_loglog_plot(pts, fit.C, -fit.theta, "-min D over samples", "N",
                                            "-min D"));
  result.manifest["stages"] = stages;
  result.manifest["results"] = {{"theta", fit.theta}, {"C", fit.C}, {"r2", fit.r2},
                                {"per_N", per_n}};
  result.manifest["artifacts"] = {{"report/report.csv",
                                   io::sha256_file(cfg.out_dir / "report" / "report.csv")}};
  return result;
}

// partition_bound: uniform-in-N exponential moment against 2/(1-gamma).
inline ExperimentResult run_partition_bound(const ExperimentConfig& cfg,
                                            ExperimentResult& result) {
  const auto rho = make_initial(cfg.init, cfg.spec.dimension, cfg.grid);
  const auto f = freeenergy::cosine_separable({1, 0, 0}, cfg.f_scale, rho);
  // norm condition with the dimensional constant set to 1:
  //   gamma = (sup_p ||sup_y |f(.,y)|||_p / p)^2 + (||rho||_inf ||f||_inf)^2;
  // for f = s cos(2 pi x1) cos(2 pi y1) the sup over p sits at p = 1 with
  // ||cos||_1 = 2/pi, so gamma = (2 s / pi)^2 + (||rho||_inf s)^2.
  const double gamma = std::pow(cfg.f_scale * 2.0 / kPi, 2) +
                       std::pow(rho.max_value() * cfg.f_scale, 2);
  require(gamma < 1.0, "partition_bound: gamma must be < 1");
  const double bound = 2.0 / (1.0 - gamma);

  io::CsvTable csv;
  csv.header = {"N", "estimate", "stderr", "ess", "bound"};
  json per_n = json::array();
  bool all_within = true;
  for (std::size_t N : cfg.N_list) {
    const auto est = freeenergy::partition_mc(f, rho, N, std::size_t(cfg.samples),
                                              cfg.master_seed + N);
    csv.rows.push_back({std::to_string(N), io::format_double(est.estimate),
                        io::format_double(est.stderr_), io::format_double(est.ess),
                        io::format_double(bound)});
    per_n.push_back({{"N", N},
                     {"estimate", est.estimate},
                     {"stderr", est.stderr_},
                     {"ess", est.ess},
                     {"unreliable", est.unreliable}});
    if (est.estimate > bound + 3.0 * est.stderr_) all_within = false;
  }
  io::write_file_atomic(cfg.out_dir / "report" / "report.csv", csv.to_string());
  result.manifest["results"] = {{"gamma", gamma},
                                {"bound", bound},
                                {"per_N", per_n},
                                {"all_within_bound", all_within}};
  result.manifest["artifacts"] = {{"report/report.csv",
                                   io::sha256_file(cfg.out_dir / "report" / "report.csv")}};
  return result;
}

// ld_zero: the truncated-log large-deviation value at the uniform state.
inline ExperimentResult run_ld_zero(const ExperimentConfig& cfg, ExperimentResult& result) {
  const auto rho = DensityField::uniform(cfg.spec.dimension, cfg.ld_grid);
  const auto F = freeenergy::truncated_log_functional(cfg.spec.dimension, cfg.ld_grid, cfg.ld_c,
                                                      cfg.eta);
  const auto res = freeenergy::ld_functional(F, rho, cfg.ld_weight, cfg.max_iter, cfg.tol);
  const double l1 = l1_raw(res.argmax.values(), rho.values(), rho.shape().cell_volume());
  result.manifest["results"] = {{"value", res.value},
                                {"l1_argmax_to_rho", l1},
                                {"iterations", res.iterations},
                                {"converged", res.converged},
                                {"residual", res.residual}};
  return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  io::fs::create_directories(cfg.out_dir);
  ExperimentResult result;
  result.out_dir = cfg.out_dir;
  result.manifest = json{{"schema", kSchemaVersion},
                         {"kind", cfg.kind},
                         {"config", cfg.canonical()},
                         {"config_sha", detail::key_of(cfg.canonical())},
                         {"spec_sha", detail::key_of(cfg.spec_json)}};

  if (cfg.kind == "chaos_rate") {
    run_chaos_rate(cfg, result);
  } else if (cfg.kind == "blowup") {
    run_blowup(cfg, result);
  } else if (cfg.kind == "repulsive_lower_bound") {
    run_repulsive_lower_bound(cfg, result);
  } else if (cfg.kind == "partition_bound") {
    run_partition_bound(cfg, result);
  } else if (cfg.kind == "ld_zero") {
    run_ld_zero(cfg, result);
  }

  const std::string bytes = result.manifest.dump(2) + "\n";
  io::write_file_atomic(cfg.out_dir / "manifest.json", bytes);
  result.manifest_sha = io::sha256_hex(bytes);
  return result;
}

}  // namespace mfl::harness
