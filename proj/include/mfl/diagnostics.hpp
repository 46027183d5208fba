// diagnostics.hpp -- marginal estimation and convergence-rate fitting.
#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "common.hpp"
#include "fft.hpp"
#include "field.hpp"
#include "particles.hpp"

namespace mfl::diagnostics {

// Silverman-style default bandwidth for `samples` points in dimension d.
inline double default_bandwidth(std::size_t samples, int d) {
  return 0.9 * std::pow(double(samples), -1.0 / double(d + 4));
}

struct KdeResult {
  DensityField field;
  bool low_confidence = false;
  std::size_t sample_count = 0;
};

// Histogram deposit followed by spectral Gaussian smoothing: multiplier
// exp(-2 pi^2 bandwidth^2 |k|^2) (wrapped Gaussian of width = bandwidth).
inline KdeResult kde_from_deposit(std::vector<double> deposit, const GridShape& shape,
                                  double bandwidth, double time, std::size_t sample_count) {
  require(bandwidth > shape.h(), "kde: bandwidth must exceed the grid spacing");
  auto modes = grid_to_modes(deposit, shape);
  for_each_index(shape.dim, shape.n, [&](std::span<const int> bins, std::size_t flat) {
    double k2 = 0.0;
    for (int a = 0; a < shape.dim; ++a) {
      const double ka = shape.mode_of(bins[a]);
      k2 += ka * ka;
    }
    modes[flat] *= std::exp(-2.0 * kPi * kPi * bandwidth * bandwidth * k2);
  });
  KdeResult out{DensityField::from_modes(shape, std::move(modes), time), false, sample_count};
  return out;
}

// KDE from raw sample points (dim matches shape.dim).
inline KdeResult kde_from_points(std::span<const double> points, const GridShape& shape,
                                 double bandwidth, double time = 0.0) {
  const int d = shape.dim;
  require(points.size() % d == 0, "kde: point array size mismatch");
  const std::size_t count = points.size() / d;
  require(count > 0, "kde: no samples");
  std::vector<double> deposit(shape.size(), 0.0);
  std::array<int, kMaxDim> idx{};
  for (std::size_t i = 0; i < count; ++i) {
    for (int a = 0; a < d; ++a) {
      int c = int(std::floor(wrap01(points[i * d + a]) * shape.n));
      if (c >= shape.n) c = shape.n - 1;
      idx[a] = c;
    }
    deposit[shape.flat_index(std::span<const int>(idx.data(), d))] += 1.0;
  }
  const double scale = 1.0 / (double(count) * shape.cell_volume());
  for (double& v : deposit) v *= scale;
  return kde_from_deposit(std::move(deposit), shape, bandwidth, time, count);
}

// k-particle marginal (k = 1 or 2) of the ensemble at save time t.
// k = 1 pools all particles of all surviving members; k = 2 uses ordered
// within-member pairs (cross-member pairs are independent by construction and
// would bias toward the product density).
inline KdeResult kde_marginal(const particles::EnsembleRun& ensemble, double t, int k,
                              double bandwidth, int grid_n) {
  require(k == 1 || k == 2, "kde_marginal: k must be 1 or 2");
  const int idx = ensemble.save_index(t);
  require(idx >= 0, "kde_marginal: time not in the save schedule");
  const int d = ensemble.params.spec.dimension;
  const GridShape shape{k * d, grid_n};
  shape.validate();

  std::vector<double> deposit(shape.size(), 0.0);
  std::size_t count = 0;
  std::array<int, kMaxDim> cell{};
  for (const auto& member : ensemble.members) {
    if (member.failed) continue;
    const auto& config = member.snapshots[std::size_t(idx)];
    const std::size_t N = config.size();
    if (k == 1) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto x = config.particle(i);
        for (int a = 0; a < d; ++a) {
          int c = int(std::floor(wrap01(x[a]) * grid_n));
          if (c >= grid_n) c = grid_n - 1;
          cell[a] = c;
        }
        deposit[shape.flat_index(std::span<const int>(cell.data(), d))] += 1.0;
        ++count;
      }
    } else {
      for (std::size_t i = 0; i < N; ++i) {
        const auto xi = config.particle(i);
        for (int a = 0; a < d; ++a) {
          int c = int(std::floor(wrap01(xi[a]) * grid_n));
          if (c >= grid_n) c = grid_n - 1;
          cell[a] = c;
        }
        for (std::size_t j = 0; j < N; ++j) {
          if (j == i) continue;
          const auto xj = config.particle(j);
          for (int a = 0; a < d; ++a) {
            int c = int(std::floor(wrap01(xj[a]) * grid_n));
            if (c >= grid_n) c = grid_n - 1;
            cell[d + a] = c;
          }
          deposit[shape.flat_index(std::span<const int>(cell.data(), 2 * d))] += 1.0;
          ++count;
        }
      }
    }
  }
  require(count > 0, "kde_marginal: no samples (all members failed?)");
  const double scale = 1.0 / (double(count) * shape.cell_volume());
  for (double& v : deposit) v *= scale;
  auto out = kde_from_deposit(std::move(deposit), shape, bandwidth, t, count);
  out.low_confidence = (k == 1) ? (count < 1000) : (count < 10000);
  return out;
}

// KL(p|q) = sum p log(p / max(q, floor)) h^d. floored_mass reports the q-mass
// affected by the floor; with floor = 0 a support violation returns +inf.
inline double kl_divergence(const DensityField& p, const DensityField& q, double floor = 1e-12,
                            double* floored_mass = nullptr) {
  require(p.shape() == q.shape(), "kl_divergence: grid mismatch");
  if (floored_mass) {
    double fm = 0.0;
    for (std::size_t g = 0; g < p.values().size(); ++g)
      if (p.values()[g] > 0.0 && q.values()[g] < floor) fm += floor - q.values()[g];
    *floored_mass = fm * p.shape().cell_volume();
  }
  return kl_raw(p.values(), q.values(), p.shape().cell_volume(), floor);
}

inline double l1_distance(const DensityField& p, const DensityField& q) {
  require(p.shape() == q.shape(), "l1_distance: grid mismatch");
  return l1_raw(p.values(), q.values(), p.shape().cell_volume());
}

// Integrate a 2d-dimensional pair density over its second argument.
inline DensityField marginalize_second(const DensityField& pair_density, int d) {
  const auto& shape = pair_density.shape();
  require(shape.dim == 2 * d, "marginalize_second: dimension mismatch");
  GridShape out_shape{d, shape.n};
  std::vector<double> out(out_shape.size(), 0.0);
  for_each_index(shape.dim, shape.n, [&](std::span<const int> idx, std::size_t flat) {
    out[out_shape.flat_index(idx.subspan(0, d))] += pair_density.values()[flat];
  });
  for (double& v : out) v *= out_shape.cell_volume();  // quadrature over the second argument
  return DensityField::from_values(out_shape, std::move(out), pair_density.time());
}

struct RateFit {
  double theta = 0.0;  // err ~ C N^{-theta}
  double C = 0.0;
  double r2 = 0.0;
  std::vector<double> residuals;  // log-log residuals per point
};

// Least squares of log err on log N.
inline RateFit fit_rate(std::span<const std::pair<double, double>> pairs) {
  require(pairs.size() >= 3, "fit_rate: need at least 3 (N, err) pairs");
  double x0 = std::log(pairs[0].first);
  bool distinct = false;
  for (const auto& [n, err] : pairs) {
    require(n > 0.0 && err > 0.0, "fit_rate: N and err must be positive");
    if (std::abs(std::log(n) - x0) > 1e-12) distinct = true;
  }
  require(distinct, "fit_rate: all N equal");
  const double m = double(pairs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [n, err] : pairs) {
    const double x = std::log(n), y = std::log(err);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / m;
  RateFit fit;
  fit.theta = -slope;
  fit.C = std::exp(intercept);
  double ss_res = 0, ss_tot = 0;
  const double ymean = sy / m;
  for (const auto& [n, err] : pairs) {
    const double y = std::log(err);
    const double resid = y - (intercept + slope * std::log(n));
    fit.residuals.push_back(resid);
    ss_res += resid * resid;
    ss_tot += (y - ymean) * (y - ymean);
  }
  fit.r2 = (ss_tot > 0.0) ? 1.0 - ss_res / ss_tot : 1.0;
  return fit;
}

}  // namespace mfl::diagnostics
