// particles.hpp -- the N-particle gradient-flow SDE on the torus,
//
//   dX_i = (1/N) sum_{j != i} K(X_i - X_j) dt + sqrt(2 sigma) dB_i,
//
// advanced by Euler-Maruyama with counter-based noise, so every trajectory is
// a pure function of (master_seed, member_index). Forces accumulate over pairs
// i < j in fixed order with the equal-and-opposite update, which makes the
// total drift sum to zero up to rounding.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "field.hpp"
#include "io.hpp"
#include "kernels.hpp"
#include "rng.hpp"

namespace mfl::particles {

struct RngLineage {
  std::uint64_t master_seed = 0;
  std::uint32_t member_index = 0;
  std::uint32_t step_counter = 0;
};

class Configuration {
 public:
  Configuration() = default;
  Configuration(int dim, std::vector<double> positions, double time, RngLineage lineage)
      : dim_(dim), x_(std::move(positions)), time_(time), lineage_(lineage) {
    require(dim_ >= 1 && dim_ <= 3, "configuration: dimension must be 1..3");
    require(!x_.empty() && x_.size() % dim_ == 0, "configuration: bad position count");
    for (double& c : x_) c = wrap01(c);
  }

  int dim() const { return dim_; }
  std::size_t size() const { return x_.size() / dim_; }
  double time() const { return time_; }
  const RngLineage& lineage() const { return lineage_; }

  std::span<const double> positions() const { return x_; }
  std::span<const double> particle(std::size_t i) const {
    return std::span<const double>(x_.data() + i * dim_, dim_);
  }

  void set_state(std::vector<double> positions, double time, std::uint32_t step_counter) {
    require(positions.size() == x_.size(), "configuration: size change");
    x_ = std::move(positions);
    time_ = time;
    lineage_.step_counter = step_counter;
  }

 private:
  int dim_ = 1;
  std::vector<double> x_;
  double time_ = 0.0;
  RngLineage lineage_{};
};

// N i.i.d. draws from rho via inverse CDF over grid cells with in-cell jitter.
inline Configuration sample_initial(const DensityField& rho, std::size_t N,
                                    std::uint64_t master_seed, std::uint32_t member) {
  require(N >= 1, "sample_initial: N must be >= 1");
  require(rho.min_value() >= 0.0, "sample_initial: density has negative values");
  const GridSampler sampler(rho);
  const int d = rho.dim();
  CounterRng rng(master_seed, member, RngDomain::kInitial);
  std::vector<double> x(N * d);
  double u[1 + 3];
  for (std::size_t i = 0; i < N; ++i) {
    for (int j = 0; j < 1 + d; ++j) u[j] = rng.uniform(0, std::uint32_t(i), std::uint32_t(j));
    sampler.draw(std::span<const double>(u, std::size_t(1 + d)), x.data() + i * d);
  }
  return Configuration(d, std::move(x), 0.0, RngLineage{master_seed, member, 0});
}

// Direct O(N^2) pair loop; drift[i*d..] accumulates sum_{j != i} K(x_i - x_j).
// Kernels wrap displacements internally, so raw position differences suffice.
template <typename Kernel>
void accumulate_drift(const Configuration& config, const Kernel& kernel,
                      std::span<double> drift) {
  const int d = config.dim();
  const std::size_t N = config.size();
  const auto x = config.positions();
  require(drift.size() == x.size(), "accumulate_drift: bad output size");
  for (double& v : drift) v = 0.0;
  if constexpr (requires { kernel.is_zero(); }) {
    if (kernel.is_zero()) return;
  }
  if constexpr (requires(double* p) { kernel.force_xy(0.0, 0.0, p); }) {
    if (d == 2) {
      double f[2];
      for (std::size_t i = 0; i + 1 < N; ++i) {
        const double xi = x[i * 2], yi = x[i * 2 + 1];
        for (std::size_t j = i + 1; j < N; ++j) {
          kernel.force_xy(xi - x[j * 2], yi - x[j * 2 + 1], f);
          drift[i * 2] += f[0];
          drift[i * 2 + 1] += f[1];
          drift[j * 2] -= f[0];
          drift[j * 2 + 1] -= f[1];
        }
      }
      return;
    }
  }
  double dx[3], f[3];
  for (std::size_t i = 0; i + 1 < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      for (int a = 0; a < d; ++a) dx[a] = x[i * d + a] - x[j * d + a];
      kernel.force(std::span<const double>(dx, std::size_t(d)), f);
      for (int a = 0; a < d; ++a) {
        drift[i * d + a] += f[a];
        drift[j * d + a] -= f[a];
      }
    }
  }
}

// Tiled variant; identical accumulation order per slot, so bitwise equal.
template <typename Kernel>
void accumulate_drift_blocked(const Configuration& config, const Kernel& kernel,
                              std::span<double> drift, std::size_t block = 64) {
  const int d = config.dim();
  const std::size_t N = config.size();
  const auto x = config.positions();
  require(drift.size() == x.size(), "accumulate_drift: bad output size");
  for (double& v : drift) v = 0.0;
  if constexpr (requires { kernel.is_zero(); }) {
    if (kernel.is_zero()) return;
  }
  double dx[3], f[3];
  for (std::size_t ib = 0; ib < N; ib += block) {
    const std::size_t ie = std::min(N, ib + block);
    for (std::size_t jb = ib; jb < N; jb += block) {
      const std::size_t je = std::min(N, jb + block);
      for (std::size_t i = ib; i < ie; ++i) {
        for (std::size_t j = std::max(jb, i + 1); j < je; ++j) {
          for (int a = 0; a < d; ++a) dx[a] = x[i * d + a] - x[j * d + a];
          kernel.force(std::span<const double>(dx, std::size_t(d)), f);
          for (int a = 0; a < d; ++a) {
            drift[i * d + a] += f[a];
            drift[j * d + a] -= f[a];
          }
        }
      }
    }
  }
}

namespace detail {

template <typename Kernel>
[[noreturn]] void report_nonfinite(const Configuration& config, const Kernel& kernel) {
  const int d = config.dim();
  const std::size_t N = config.size();
  const auto x = config.positions();
  double dx[3], f[3];
  for (std::size_t i = 0; i + 1 < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      for (int a = 0; a < d; ++a) dx[a] = wrap_half(x[i * d + a] - x[j * d + a]);
      kernel.force(std::span<const double>(dx, std::size_t(d)), f);
      for (int a = 0; a < d; ++a) {
        if (!std::isfinite(f[a]))
          throw Error("step_em: non-finite force between particles " + std::to_string(i) +
                      " and " + std::to_string(j) + " at t=" + std::to_string(config.time()));
      }
    }
  }
  throw Error("step_em: non-finite drift (no offending pair found)");
}

}  // namespace detail

// One Euler-Maruyama step with injectable noise: noise(i, a) must return the
// standard Gaussian for particle i, axis a.
template <typename Kernel, typename NoiseFn>
Configuration step_em_with_noise(const Configuration& config, const Kernel& kernel, double sigma,
                                 double dt, NoiseFn&& noise) {
  require(dt > 0.0, "step_em: dt must be > 0");
  require(sigma >= 0.0, "step_em: sigma must be >= 0");
  const int d = config.dim();
  const std::size_t N = config.size();
  std::vector<double> drift(N * std::size_t(d));
  accumulate_drift(config, kernel, drift);

  const double drift_scale = dt / double(N);
  const double noise_scale = std::sqrt(2.0 * sigma * dt);
  std::vector<double> x(config.positions().begin(), config.positions().end());
  for (std::size_t i = 0; i < N; ++i) {
    for (int a = 0; a < d; ++a) {
      const double dxa = drift_scale * drift[i * d + a];
      if (!std::isfinite(dxa)) detail::report_nonfinite(config, kernel);
      x[i * d + a] = wrap01(x[i * d + a] + dxa + noise_scale * noise(i, a));
    }
  }
  Configuration next = config;
  next.set_state(std::move(x), config.time() + dt, config.lineage().step_counter + 1);
  return next;
}

// Standard step: noise from the configuration's own counter stream.
template <typename Kernel>
Configuration step_em(const Configuration& config, const Kernel& kernel, double sigma, double dt) {
  const auto& lin = config.lineage();
  CounterRng rng(lin.master_seed, lin.member_index, RngDomain::kDynamics);
  const std::uint32_t step = lin.step_counter;
  return step_em_with_noise(
      config, kernel, sigma, dt, [&](std::size_t i, int a) {
        // axes consume Box-Muller pairs: draw 0 -> axes {0,1}, draw 1 -> axis 2
        double g0, g1;
        rng.gaussian_pair(step, std::uint32_t(i), std::uint32_t(a / 2), g0, g1);
        return (a % 2 == 0) ? g0 : g1;
      });
}

// ---------------------------------------------------------------------------
// Ensembles: M independent members sharing parameters, saved on a fixed
// schedule. The Monte-Carlo stand-in for the joint law of the system.
// ---------------------------------------------------------------------------
struct EnsembleParams {
  kernels::PotentialSpec spec;
  double sigma = 1.0;
  double dt = 1e-3;
  std::vector<double> save_times;  // nondecreasing, multiples of dt
  std::size_t N = 0;
  int M = 1;
  std::uint64_t master_seed = 0;

  void validate() const {
    spec.validate();
    require(sigma >= 0.0, "ensemble: sigma must be >= 0");
    require(dt > 0.0, "ensemble: dt must be > 0");
    require(N >= 1, "ensemble: N must be >= 1");
    require(M >= 1, "ensemble: M must be >= 1");
    require(!save_times.empty(), "ensemble: empty save schedule");
    double prev = 0.0;
    for (double t : save_times) {
      require(t >= prev, "ensemble: save times must be nondecreasing");
      const long steps = std::lround((t - prev) / dt);
      require(std::abs(steps * dt - (t - prev)) <= 1e-9,
              "ensemble: save times must be multiples of dt");
      prev = t;
    }
  }
};

struct MemberTrajectory {
  std::vector<Configuration> snapshots;  // one per save time
  bool failed = false;
  std::string error;
};

struct EnsembleRun {
  EnsembleParams params;
  std::vector<MemberTrajectory> members;

  int survivors() const {
    int s = 0;
    for (const auto& m : members)
      if (!m.failed) ++s;
    return s;
  }
  int save_index(double t) const {
    for (std::size_t i = 0; i < params.save_times.size(); ++i)
      if (std::abs(params.save_times[i] - t) <= 1e-9) return int(i);
    return -1;
  }
};

template <typename Kernel>
MemberTrajectory run_member(const EnsembleParams& params, const Kernel& kernel,
                            const DensityField& rho0, std::uint32_t member) {
  MemberTrajectory out;
  try {
    Configuration config = sample_initial(rho0, params.N, params.master_seed, member);
    double prev_t = 0.0;
    for (double t_save : params.save_times) {
      const long steps = std::lround((t_save - prev_t) / params.dt);
      for (long s = 0; s < steps; ++s)
        config = step_em(config, kernel, params.sigma, params.dt);
      out.snapshots.push_back(config);
      prev_t = t_save;
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = "member " + std::to_string(member) + ": " + e.what();
  }
  return out;
}

// Members run independently (possibly in parallel); results are identical
// regardless of the worker count because every draw is counter-addressed.
inline EnsembleRun run_ensemble(const EnsembleParams& params, const DensityField& rho0,
                                int threads = 0) {
  params.validate();
  require(rho0.dim() == params.spec.dimension, "ensemble: density dimension mismatch");
  const kernels::TabulatedKernel kernel(params.spec);
  EnsembleRun run;
  run.params = params;
  run.members.resize(params.M);
  io::parallel_for(std::size_t(params.M), io::resolve_threads(threads), [&](std::size_t m) {
    run.members[m] = run_member(params, kernel, rho0, std::uint32_t(m));
  });
  return run;
}

// ---------------------------------------------------------------------------
// Snapshot files: flat little-endian doubles, particle-major, JSON sidecar.
// ---------------------------------------------------------------------------
inline void save_snapshot(const io::fs::path& bin_path, const Configuration& config) {
  io::write_doubles_le(bin_path, config.positions());
  nlohmann::json side{{"N", config.size()},
                      {"d", config.dim()},
                      {"t", config.time()},
                      {"master_seed", config.lineage().master_seed},
                      {"member_index", config.lineage().member_index},
                      {"step_counter", config.lineage().step_counter},
                      {"layout", "float64-le-particle-major"}};
  io::write_file_atomic(io::fs::path(bin_path).replace_extension(".json"), side.dump(2) + "\n");
}

inline Configuration load_snapshot(const io::fs::path& bin_path) {
  const auto side = nlohmann::json::parse(
      io::read_file(io::fs::path(bin_path).replace_extension(".json")));
  auto values = io::read_doubles_le(bin_path);
  const std::size_t N = side.at("N").get<std::size_t>();
  const int d = side.at("d").get<int>();
  require(values.size() == N * std::size_t(d), "snapshot: size mismatch with sidecar");
  RngLineage lin{side.at("master_seed").get<std::uint64_t>(),
                 side.at("member_index").get<std::uint32_t>(),
                 side.at("step_counter").get<std::uint32_t>()};
  return Configuration(d, std::move(values), side.at("t").get<double>(), lin);
}

}  // namespace mfl::particles
