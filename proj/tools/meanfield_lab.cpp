// meanfield-lab -- command-line front end: kernel certification, particle
// ensembles, the limit PDE, functional evaluations, reports, and experiment
// sweeps.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <string>

#include "mfl/diagnostics.hpp"
#include "mfl/freeenergy.hpp"
#include "mfl/harness.hpp"
#include "mfl/io.hpp"
#include "mfl/kernels.hpp"
#include "mfl/particles.hpp"
#include "mfl/pde.hpp"

using namespace mfl;
using nlohmann::json;
namespace fs = io::fs;

namespace {

kernels::PotentialSpec load_spec(const std::string& path) {
  return kernels::spec_from_json(json::parse(io::read_file(path)));
}

std::vector<double> schedule(double every, double T) {
  require(every > 0.0 && T > 0.0, "save schedule: positive times required");
  std::vector<double> times;
  for (double t = every; t <= T + 1e-12; t += every) times.push_back(std::min(t, T));
  return times;
}

void emit(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    io::write_file_atomic(out, text);
    std::cout << out << "\n";
  }
}

int cmd_certify(const std::string& spec_path, double sigma, int budget, const std::string& out) {
  const auto spec = load_spec(spec_path);
  const auto report = kernels::certify_kernel(spec, sigma, budget);
  json j = kernels::to_json(report);
  j["all_passed"] = report.all_passed();
  j["sigma"] = sigma;
  emit(j, out);
  return report.all_passed() ? 0 : 1;
}

int cmd_simulate(const std::string& spec_path, std::size_t N, int M, double sigma, double dt,
                 double T, std::uint64_t seed, double save_every, const std::string& init,
                 int grid, int threads, const std::string& out) {
  particles::EnsembleParams params;
  params.spec = load_spec(spec_path);
  params.sigma = sigma;
  params.dt = dt;
  params.save_times = schedule(save_every, T);
  params.N = N;
  params.M = M;
  params.master_seed = seed;
  const auto rho0 = harness::make_initial(init, params.spec.dimension, grid);
  const auto run = particles::run_ensemble(params, rho0, threads);

  const fs::path dir = out;
  json failed = json::array();
  for (int m = 0; m < M; ++m) {
    if (run.members[m].failed) {
      failed.push_back({{"member", m}, {"error", run.members[m].error}});
      continue;
    }
    for (std::size_t s = 0; s < params.save_times.size(); ++s) {
      char name[64];
      std::snprintf(name, sizeof(name), "member_%04d/snap_%04zu.bin", m, s);
      particles::save_snapshot(dir / name, run.members[m].snapshots[s]);
    }
  }
  json manifest{{"spec", kernels::to_json(params.spec)},
                {"sigma", sigma},
                {"dt", dt},
                {"T", T},
                {"save_times", params.save_times},
                {"N", N},
                {"M", M},
                {"master_seed", seed},
                {"init", init},
                {"grid", grid},
                {"failed_members", failed},
                {"layout", "float64-le-particle-major"}};
  io::write_file_atomic(dir / "run.json", manifest.dump(2) + "\n");
  std::cout << (dir / "run.json").string() << "\n";
  return 0;
}

int cmd_pde(const std::string& spec_path, double sigma, int grid, double dt, double T,
            const std::string& init, double save_every, const std::string& out) {
  const auto spec = load_spec(spec_path);
  const auto rho0 = harness::make_initial(init, spec.dimension, grid);
  const auto times = schedule(save_every, T);
  const auto result = pde::run_pde(rho0, spec, sigma, dt, times);
  const fs::path dir = out;
  json jt = json::array();
  for (std::size_t i = 0; i < result.saved.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "t_%04zu.bin", i);
    harness::save_field(dir / name, result.saved[i]);
    jt.push_back(result.saved[i].time());
  }
  json manifest{{"spec", kernels::to_json(spec)},
                {"sigma", sigma},
                {"grid", grid},
                {"dt", dt},
                {"T", T},
                {"init", init},
                {"times", jt},
                {"free_energies", result.free_energies},
                {"completed", result.completed},
                {"blowup",
                 {{"flagged", result.blowup.flagged},
                  {"time", result.blowup.time},
                  {"reason", result.blowup.reason},
                  {"max_ratio", result.blowup.max_ratio},
                  {"octave_fraction", result.blowup.octave_fraction},
                  {"analytic_supercritical", result.blowup.analytic_supercritical}}}};
  io::write_file_atomic(dir / "series.json", manifest.dump(2) + "\n");
  std::cout << (dir / "series.json").string() << "\n";
  return result.completed ? 0 : 2;
}

particles::EnsembleRun load_run_dir(const fs::path& dir, json& manifest) {
  manifest = json::parse(io::read_file(dir / "run.json"));
  particles::EnsembleRun run;
  run.params.spec = kernels::spec_from_json(manifest.at("spec"));
  run.params.sigma = manifest.at("sigma").get<double>();
  run.params.dt = manifest.at("dt").get<double>();
  run.params.save_times = manifest.at("save_times").get<std::vector<double>>();
  run.params.N = manifest.at("N").get<std::size_t>();
  run.params.M = manifest.at("M").get<int>();
  run.params.master_seed = manifest.at("master_seed").get<std::uint64_t>();
  run.members.resize(run.params.M);
  std::vector<bool> failed(run.params.M, false);
  const json fm = manifest.value("failed_members", json::array());
  for (const auto& f : fm) failed[f.at("member").get<int>()] = true;
  for (int m = 0; m < run.params.M; ++m) {
    if (failed[m]) {
      run.members[m].failed = true;
      continue;
    }
    for (std::size_t s = 0; s < run.params.save_times.size(); ++s) {
      char name[64];
      std::snprintf(name, sizeof(name), "member_%04d/snap_%04zu.bin", m, s);
      run.members[m].snapshots.push_back(particles::load_snapshot(dir / name));
    }
  }
  return run;
}

int cmd_report(const std::string& runs_dir, const std::string& pde_dir, int k, double bandwidth,
               const std::string& out) {
  // collect ensembles: either a single run directory or a directory of them
  std::vector<fs::path> run_dirs;
  if (fs::exists(fs::path(runs_dir) / "run.json")) {
    run_dirs.push_back(runs_dir);
  } else {
    for (const auto& entry : fs::directory_iterator(runs_dir))
      if (entry.is_directory() && fs::exists(entry.path() / "run.json"))
        run_dirs.push_back(entry.path());
  }
  require(!run_dirs.empty(), "report: no run.json found under " + runs_dir);
  std::sort(run_dirs.begin(), run_dirs.end());

  const json pde_manifest = json::parse(io::read_file(fs::path(pde_dir) / "series.json"));
  const auto pde_times = pde_manifest.at("times").get<std::vector<double>>();
  std::vector<DensityField> pde_fields;
  for (std::size_t i = 0; i < pde_times.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "t_%04zu.bin", i);
    pde_fields.push_back(harness::load_field(fs::path(pde_dir) / name));
  }

  io::CsvTable csv;
  csv.header = {"N", "t", "kl", "l1", "D_mean", "D_stderr", "theta_fit"};
  struct Row {
    std::size_t N;
    double t, kl, l1, dm, ds;
  };
  std::vector<Row> rows;
  std::vector<std::pair<double, double>> final_errs;

  for (const auto& dir : run_dirs) {
    json manifest;
    const auto run = load_run_dir(dir, manifest);
    const int d = run.params.spec.dimension;
    const double bw = (bandwidth > 0.0)
                          ? bandwidth
                          : diagnostics::default_bandwidth(run.survivors() * run.params.N, k * d);
    const int grid = (k == 1) ? pde_fields.front().n()
                              : std::min<int>(pde_fields.front().n(), 32);
    for (std::size_t s = 0; s < run.params.save_times.size(); ++s) {
      const double t = run.params.save_times[s];
      int pde_idx = -1;
      for (std::size_t i = 0; i < pde_times.size(); ++i)
        if (std::abs(pde_times[i] - t) <= 1e-9) pde_idx = int(i);
      if (pde_idx < 0) continue;
      const auto kde = diagnostics::kde_marginal(run, t, k, bw, grid);
      const auto& ref = pde_fields[std::size_t(pde_idx)];
      double kl = 0.0, l1 = 0.0;
      if (k == 1) {
        kl = diagnostics::kl_divergence(kde.field, ref);
        l1 = diagnostics::l1_distance(kde.field, ref);
      } else {
        // tensor square of the PDE state, subsampled onto the marginal grid
        const GridShape pshape{2 * d, grid};
        const int ratio = ref.n() / grid;
        std::vector<double> prod(pshape.size());
        for_each_index(pshape.dim, pshape.n, [&](std::span<const int> idx, std::size_t flat) {
          double v = 1.0;
          for (int half = 0; half < 2; ++half) {
            std::array<int, kMaxDim> fine{};
            for (int a = 0; a < d; ++a) fine[a] = idx[half * d + a] * ratio;
            v *= ref.values()[ref.shape().flat_index(std::span<const int>(fine.data(), d))];
          }
          prod[flat] = v;
        });
        const auto tensor = DensityField::from_values(pshape, std::move(prod), t);
        kl = diagnostics::kl_divergence(kde.field, tensor);
        l1 = diagnostics::l1_distance(kde.field, tensor);
      }

      const freeenergy::ModulatedEvaluator evaluator(run.params.spec, ref);
      double sum = 0.0, sum2 = 0.0;
      int used = 0;
      for (int m = 0; m < run.params.M; ++m) {
        if (run.members[m].failed) continue;
        const double D = evaluator.evaluate(run.members[m].snapshots[s]);
        sum += D;
        sum2 += D * D;
        ++used;
      }
      const double mean = sum / used;
      const double var = (used > 1) ? (sum2 / used - mean * mean) * used / (used - 1.0) : 0.0;
      rows.push_back({run.params.N, t, kl, l1, mean, std::sqrt(std::max(var, 0.0) / used)});
      if (s + 1 == run.params.save_times.size()) final_errs.push_back({double(run.params.N), l1});
    }
  }

  diagnostics::RateFit fit;
  if (final_errs.size() >= 3) fit = diagnostics::fit_rate(final_errs);
  for (const auto& r : rows)
    csv.rows.push_back({std::to_string(r.N), io::format_double(r.t), io::format_double(r.kl),
                        io::format_double(r.l1), io::format_double(r.dm), io::format_double(r.ds),
                        io::format_double(fit.theta)});
  const fs::path dir = out;
  io::write_file_atomic(dir / "report.csv", csv.to_string());
  if (final_errs.size() >= 2) {
    std::vector<std::array<double, 2>> pts;
    for (const auto& [n, e] : final_errs) pts.push_back({n, e});
    io::write_file_atomic(dir / "rate.svg",
                          io::svg_loglog_plot(pts, fit.C, -fit.theta,
                                              "marginal vs PDE", "N", "L1 error"));
  }
  json schema{{"columns",
               {{"N", "particle count"},
                {"t", "save time"},
                {"kl", "KL(KDE marginal | reference)"},
                {"l1", "L1(KDE marginal, reference)"},
                {"D_mean", "ensemble mean of the modulated interaction D"},
                {"D_stderr", "standard error of D over members"},
                {"theta_fit", "fitted exponent of l1 ~ C N^-theta at the final time"}}}};
  io::write_file_atomic(dir / "schema.json", schema.dump(2) + "\n");
  std::cout << (dir / "report.csv").string() << "\n";
  return 0;
}

int cmd_functional(const std::string& op, const std::string& spec_path, int grid,
                   const std::string& init, std::size_t N, std::size_t samples,
                   std::uint64_t seed, double c, double eta, double weight, int max_iter,
                   double tol, double scale, double eps, const std::string& runs,
                   double time_at, const std::string& out) {
  json result{{"op", op}};
  if (op == "modulated") {
    const auto spec = load_spec(spec_path);
    const auto rho = harness::make_initial(init, spec.dimension, grid);
    const freeenergy::ModulatedEvaluator evaluator(spec, rho);
    double sum = 0.0, sum2 = 0.0, dmin = 1e300;
    for (std::size_t s = 0; s < samples; ++s) {
      const auto config = particles::sample_initial(rho, N, seed, std::uint32_t(s));
      const double D = evaluator.evaluate(config);
      sum += D;
      sum2 += D * D;
      dmin = std::min(dmin, D);
    }
    const double mean = sum / samples;
    const double var = (sum2 / samples - mean * mean) * samples / (samples - 1.0);
    result["params"] = {{"N", N}, {"samples", samples}, {"seed", seed}, {"init", init}};
    result["value"] = mean;
    result["stderr"] = std::sqrt(std::max(var, 0.0) / samples);
    result["min"] = dmin;
  } else if (op == "ldfunc") {
    const auto spec = load_spec(spec_path);
    const auto rho = DensityField::uniform(spec.dimension, grid);
    const auto F = freeenergy::truncated_log_functional(spec.dimension, grid, c, eta);
    const auto res = freeenergy::ld_functional(F, rho, weight, max_iter, tol);
    result["params"] = {{"c", c}, {"eta", eta}, {"weight", weight}, {"grid", grid}};
    result["value"] = res.value;
    result["l1_to_rho"] = l1_raw(res.argmax.values(), rho.values(), rho.shape().cell_volume());
    result["iterations"] = res.iterations;
    result["converged"] = res.converged;
  } else if (op == "partition") {
    const auto spec = load_spec(spec_path);
    const auto rho = harness::make_initial(init, spec.dimension, grid);
    const auto f = freeenergy::cosine_separable({1, 0, 0}, scale, rho);
    const auto est = freeenergy::partition_mc(f, rho, N, samples, seed);
    result["params"] = {{"N", N}, {"samples", samples}, {"scale", scale}};
    result["value"] = est.estimate;
    result["stderr"] = est.stderr_;
    result["ess"] = est.ess;
    result["unreliable"] = est.unreliable;
  } else if (op == "gap") {
    json manifest;
    const auto run = load_run_dir(runs, manifest);
    const int d = run.params.spec.dimension;
    const auto rho = harness::make_initial(manifest.value("init", std::string("uniform")), d, grid);
    const auto F = freeenergy::truncated_log_functional(d, grid, c, eta);
    const double g = freeenergy::mollification_gap(F, rho, run, time_at, eps);
    result["params"] = {{"eps", eps}, {"eta", eta}, {"c", c}, {"t", time_at}};
    result["value"] = g;
  } else {
    throw Error("functional: unknown op '" + op + "'");
  }
  emit(result, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meanfield-lab: stochastic interacting particle systems, their "
               "McKean-Vlasov limit, and modulated free-energy diagnostics on the torus"};
  app.require_subcommand(1);

  std::string spec_path, out;
  double sigma = 1.0;
  int budget = 400;
  auto* certify = app.add_subcommand("certify", "check kernel hypotheses and fit constants");
  certify->add_option("--spec", spec_path, "potential spec JSON")->required();
  certify->add_option("--sigma", sigma, "diffusion strength");
  certify->add_option("--budget", budget, "sample budget");
  certify->add_option("--out", out, "output JSON path (stdout if omitted)");

  std::size_t N = 512;
  int M = 64;
  double dt = 1e-3, T = 1.0, save_every = 0.1;
  std::uint64_t seed = 7;
  std::string init = "uniform";
  int grid = 128, threads = 0;
  std::string sim_out = "runs/run";
  auto* simulate = app.add_subcommand("simulate", "run a particle ensemble");
  simulate->add_option("--spec", spec_path, "potential spec JSON")->required();
  simulate->add_option("--N", N, "particles per member");
  simulate->add_option("--M", M, "ensemble members");
  simulate->add_option("--sigma", sigma, "diffusion strength");
  simulate->add_option("--dt", dt, "time step");
  simulate->add_option("--T", T, "final time");
  simulate->add_option("--seed", seed, "master seed");
  simulate->add_option("--save-every", save_every, "snapshot interval");
  simulate->add_option("--init", init, "initial law: uniform | gaussian:STD | file:PATH");
  simulate->add_option("--grid", grid, "grid for the initial law");
  simulate->add_option("--threads", threads, "worker threads (0 = MEANFIELD_THREADS or auto)");
  simulate->add_option("--out", sim_out, "output directory");

  std::string pde_out = "pde";
  auto* pdec = app.add_subcommand("pde", "solve the limit equation on the grid");
  pdec->add_option("--spec", spec_path, "potential spec JSON")->required();
  pdec->add_option("--sigma", sigma, "diffusion strength");
  pdec->add_option("--grid", grid, "grid points per axis");
  pdec->add_option("--dt", dt, "time step");
  pdec->add_option("--T", T, "final time");
  pdec->add_option("--init", init, "initial density");
  pdec->add_option("--save-every", save_every, "snapshot interval");
  pdec->add_option("--out", pde_out, "output directory");

  std::string runs_dir = "runs", pde_dir = "pde", report_out = "report";
  int marginal_k = 1;
  double bandwidth = 0.0;
  auto* report = app.add_subcommand("report", "marginals, distances and rate fits");
  report->add_option("--runs", runs_dir, "runs directory (a run or a directory of runs)");
  report->add_option("--pde", pde_dir, "pde output directory");
  report->add_option("--k", marginal_k, "marginal order (1 or 2)");
  report->add_option("--bandwidth", bandwidth, "KDE bandwidth (0 = default rule)");
  report->add_option("--out", report_out, "output directory");

  std::string op, func_runs;
  std::size_t samples = 10000;
  double c = 1.0, eta = 0.1, weight = 1.0, tol = 1e-9, scale = 0.1, eps = 0.02, time_at = 0.0;
  int max_iter = 500;
  auto* functional = app.add_subcommand("functional", "evaluate modulated/large-deviation functionals");
  functional->add_option("--op", op, "modulated | ldfunc | partition | gap")->required();
  functional->add_option("--spec", spec_path, "potential spec JSON");
  functional->add_option("--grid", grid, "grid points per axis");
  functional->add_option("--init", init, "reference density");
  functional->add_option("--N", N, "particles per draw");
  functional->add_option("--samples", samples, "Monte-Carlo samples");
  functional->add_option("--seed", seed, "seed");
  functional->add_option("--c", c, "quadratic coefficient");
  functional->add_option("--eta", eta, "truncation radius");
  functional->add_option("--weight", weight, "entropy weight");
  functional->add_option("--max-iter", max_iter, "iteration cap");
  functional->add_option("--tol", tol, "fixed-point tolerance");
  functional->add_option("--scale", scale, "separable test-function amplitude");
  functional->add_option("--eps", eps, "mollification width");
  functional->add_option("--runs", func_runs, "run directory (gap)");
  functional->add_option("--time", time_at, "snapshot time (gap)");
  functional->add_option("--out", out, "output JSON path (stdout if omitted)");

  std::string config_path, sweep_out;
  auto* sweep = app.add_subcommand("sweep", "run an experiment config end to end");
  sweep->add_option("--config", config_path, "experiment JSON")->required();
  sweep->add_option("--out", sweep_out, "output directory override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (certify->parsed()) return cmd_certify(spec_path, sigma, budget, out);
    if (simulate->parsed())
      return cmd_simulate(spec_path, N, M, sigma, dt, T, seed, save_every, init, grid, threads,
                          sim_out);
    if (pdec->parsed()) return cmd_pde(spec_path, sigma, grid, dt, T, init, save_every, pde_out);
    if (report->parsed()) return cmd_report(runs_dir, pde_dir, marginal_k, bandwidth, report_out);
    if (functional->parsed())
      return cmd_functional(op, spec_path, grid, init, N, samples, seed, c, eta, weight, max_iter,
                            tol, scale, eps, func_runs, time_at, out);
    if (sweep->parsed()) {
      const auto cfg = harness::load_experiment(config_path, sweep_out);
      const auto result = harness::run_experiment(cfg);
      std::cout << "manifest " << result.manifest_sha << " cache_hits " << result.cache_hits
                << " cache_misses " << result.cache_misses << "\n"
                << (result.out_dir / "manifest.json").string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
