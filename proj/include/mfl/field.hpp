// field.hpp -- nonnegative unit-mass densities on the periodic grid.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "common.hpp"
#include "fft.hpp"
#include "rng.hpp"

namespace mfl {

class DensityField {
 public:
  DensityField() = default;

  static DensityField uniform(int dim, int n) {
    GridShape shape{dim, n};
    shape.validate();
    DensityField f;
    f.shape_ = shape;
    f.v_.assign(shape.size(), 1.0);
    return f;
  }

  // Product of one-dimensional wrapped Gaussians of the given standard
  // deviation, centered at (1/2, ..., 1/2). Built spectrally:
  // rhohat(k) = prod_a exp(-2 pi^2 k_a^2 s^2) (-1)^{k_a}.
  static DensityField wrapped_gaussian(int dim, int n, double stddev, double center = 0.5) {
    GridShape shape{dim, n};
    shape.validate();
    require(stddev > 0.0, "wrapped_gaussian: stddev must be > 0");
    std::vector<Complex> modes(shape.size(), Complex(0.0, 0.0));
    for_each_index(dim, n, [&](std::span<const int> idx, std::size_t flat) {
      double amp = 1.0;
      double phase = 0.0;
      for (int a = 0; a < dim; ++a) {
        const int k = shape.mode_of(idx[a]);
        amp *= std::exp(-2.0 * kPi * kPi * double(k) * double(k) * stddev * stddev);
        phase += -kTwoPi * double(k) * center;
      }
      modes[flat] = amp * Complex(std::cos(phase), std::sin(phase));
    });
    auto values = modes_to_grid(std::move(modes), shape);
    return from_values(shape, std::move(values), 0.0);
  }

  // Clips stray negatives (spectral ringing) and renormalizes to unit mass.
  static DensityField from_values(GridShape shape, std::vector<double> values, double time = 0.0) {
    shape.validate();
    require(values.size() == shape.size(), "density: value count does not match grid");
    DensityField f;
    f.shape_ = shape;
    f.v_ = std::move(values);
    f.time_ = time;
    f.clip_negatives();
    const double m = f.mass();
    require(m > 0.0, "density: mass must be positive");
    f.scale(1.0 / m);
    return f;
  }

  // No clipping or normalization; for tests and deliberate invalid inputs.
  static DensityField from_values_unchecked(GridShape shape, std::vector<double> values,
                                            double time = 0.0) {
    shape.validate();
    require(values.size() == shape.size(), "density: value count does not match grid");
    DensityField f;
    f.shape_ = shape;
    f.v_ = std::move(values);
    f.time_ = time;
    return f;
  }

  const GridShape& shape() const { return shape_; }
  int dim() const { return shape_.dim; }
  int n() const { return shape_.n; }
  double h() const { return shape_.h(); }
  double time() const { return time_; }
  void set_time(double t) { time_ = t; }

  std::span<const double> values() const { return v_; }
  std::vector<double>& mutable_values() { return v_; }

  double mass() const {
    double s = 0.0;
    for (double v : v_) s += v;
    return s * shape_.cell_volume();
  }
  double min_value() const { return *std::min_element(v_.begin(), v_.end()); }
  double max_value() const { return *std::max_element(v_.begin(), v_.end()); }

  double clip_negatives() {
    double clipped = 0.0;
    for (double& v : v_) {
      if (v < 0.0) {
        clipped -= v;
        v = 0.0;
      }
    }
    return clipped * shape_.cell_volume();
  }
  void scale(double s) {
    for (double& v : v_) v *= s;
  }
  void renormalize() {
    const double m = mass();
    require(m > 0.0, "density: mass must be positive");
    scale(1.0 / m);
  }

  std::vector<Complex> modes() const { return grid_to_modes(v_, shape_); }

  static DensityField from_modes(const GridShape& shape, std::vector<Complex> modes,
                                 double time = 0.0) {
    return from_values(shape, modes_to_grid(std::move(modes), shape), time);
  }

 private:
  GridShape shape_{};
  std::vector<double> v_;
  double time_ = 0.0;
};

// Raw grid distances; the diagnostics layer wraps these with reporting.
inline double l1_raw(std::span<const double> p, std::span<const double> q, double cell_volume) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return s * cell_volume;
}

inline double kl_raw(std::span<const double> p, std::span<const double> q, double cell_volume,
                     double floor) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      const double qi = std::max(q[i], floor);
      if (qi == 0.0) return std::numeric_limits<double>::infinity();
      s += p[i] * std::log(p[i] / qi);
    }
  }
  return s * cell_volume;
}

// Inverse-CDF sampler over grid cells with uniform in-cell jitter.
class GridSampler {
 public:
  explicit GridSampler(const DensityField& rho) : shape_(rho.shape()) {
    require(rho.min_value() >= 0.0, "sampler: density has negative values");
    const auto vals = rho.values();
    cdf_.resize(vals.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      acc += vals[i];
      cdf_[i] = acc;
    }
    require(acc > 0.0, "sampler: density has zero mass");
    for (double& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }

  // Draws one point; consumes uniforms u[0..dim] (cell choice + jitter).
  void draw(std::span<const double> u, double* out) const {
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u[0]);
    std::size_t cell = static_cast<std::size_t>(it - cdf_.begin());
    if (cell >= cdf_.size()) cell = cdf_.size() - 1;
    std::array<int, kMaxDim> idx{};
    shape_.unflatten(cell, std::span<int>(idx.data(), shape_.dim));
    for (int a = 0; a < shape_.dim; ++a)
      out[a] = wrap01((idx[a] + u[1 + a]) * shape_.h());
  }

  const GridShape& shape() const { return shape_; }

 private:
  GridShape shape_;
  std::vector<double> cdf_;
};

}  // namespace mfl
