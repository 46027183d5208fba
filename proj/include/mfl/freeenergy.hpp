// freeenergy.hpp -- modulated-energy and large-deviation functionals.
//
// Central object: for a configuration X^N with empirical measure
// mu_N = (1/N) sum_i delta_{X_i} and a reference density rho,
//
//   D = int int_{x != y} V(x-y) (d mu_N - d rho)^{x2}
//     = (1/N^2) sum_{i != j} V(X_i - X_j)
//       - (2/N) sum_i (V * rho)(X_i) + int int V rho rho,
//
// the diagonal removed only in the pair sum. For band-limited V everything
// reduces to exact mode sums: with S(k) = sum_i e^{-2 pi i k.X_i},
//
//   sum_{i != j} V_ij = sum_k Vhat(k) (|S(k)|^2 - N) + ... (V(0) = sum_k Vhat),
//   sum_i (V*rho)(X_i) = sum_k Vhat(k) rhohat(k) conj(S(k)),
//   int int V rho rho  = sum_k Vhat(k) |rhohat(k)|^2.
#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <span>
#include <vector>

#include "common.hpp"
#include "fft.hpp"
#include "field.hpp"
#include "kernels.hpp"
#include "particles.hpp"
#include "pde.hpp"
#include "rng.hpp"

namespace mfl::freeenergy {

using particles::Configuration;

namespace detail {

// e^{i sign 2 pi k x} for k in [-K, K], written to out[k + K].
inline void axis_phases(double x, int K, int sign, std::span<Complex> out) {
  for (int k = 0; k <= K; ++k) {
    const double angle = kTwoPi * double(k) * x;
    const Complex z(std::cos(angle), sign * std::sin(angle));
    out[std::size_t(K + k)] = z;
    out[std::size_t(K - k)] = std::conj(z);
  }
}

}  // namespace detail

// Half-band mode table of a potential against a fixed reference density.
// Reused across many configurations (ensembles, i.i.d. sampling studies).
class ModulatedEvaluator {
 public:
  ModulatedEvaluator(const kernels::PotentialSpec& spec, const DensityField& rho)
      : dim_(spec.dimension), band_(spec.spectral_band) {
    spec.validate();
    require(rho.dim() == dim_, "modulated energy: dimension mismatch");
    require(2 * band_ + 1 <= rho.n(),
            "modulated energy: density grid too coarse for the band");
    const auto rho_hat_grid = rho.modes();
    const auto& shape = rho.shape();

    vhat0_ = kernels::potential_mode(spec, std::span<const int>(kZero.data(), dim_));
    rho_hat0_ = rho_hat_grid[0];
    v_at_zero_ = vhat0_;
    c_term_ = vhat0_ * std::norm(rho_hat0_);
    kernels::detail::for_each_half_band(dim_, band_, [&](std::span<const int> k) {
      const double v = kernels::potential_mode(spec, k);
      std::array<int, 3> bins{0, 0, 0};
      for (int a = 0; a < dim_; ++a) bins[a] = shape.bin_of_mode(k[a]);
      const Complex r = rho_hat_grid[shape.flat_index(std::span<const int>(bins.data(), dim_))];
      std::array<int, 3> kk{0, 0, 0};
      for (int a = 0; a < dim_; ++a) kk[a] = k[a];
      modes_.push_back(kk);
      vhat_.push_back(v);
      rho_hat_.push_back(r);
      v_at_zero_ += 2.0 * v;
      c_term_ += 2.0 * v * std::norm(r);
    });
  }

  int dim() const { return dim_; }
  double interaction_with_self() const { return c_term_; }  // int int V rho rho
  double value_at_zero() const { return v_at_zero_; }       // V(0)

  // D for one configuration.
  double evaluate(const Configuration& config) const {
    double pair_term = 0.0, cross_term = 0.0;
    accumulate(config, pair_term, cross_term);
    return pair_term - 2.0 * cross_term + c_term_;
  }

  // The three decomposition terms (pair, cross, self).
  void terms(const Configuration& config, double& pair_term, double& cross_term,
             double& self_term) const {
    accumulate(config, pair_term, cross_term);
    self_term = c_term_;
  }

 private:
  void accumulate(const Configuration& config, double& pair_term, double& cross_term) const {
    require(config.dim() == dim_, "modulated energy: configuration dimension mismatch");
    const std::size_t N = config.size();
    const std::size_t M = modes_.size();
    std::vector<Complex> S(M, Complex(0.0, 0.0));
    const std::size_t phase_len = 2 * std::size_t(band_) + 1;
    std::vector<Complex> phases(3 * phase_len, Complex(1.0, 0.0));
    for (std::size_t i = 0; i < N; ++i) {
      const auto x = config.particle(i);
      for (int a = 0; a < dim_; ++a)
        detail::axis_phases(x[a], band_, -1,
                            std::span<Complex>(phases.data() + a * phase_len, phase_len));
      const Complex* p0 = phases.data();
      const Complex* p1 = phases.data() + phase_len;
      const Complex* p2 = phases.data() + 2 * phase_len;
      for (std::size_t m = 0; m < M; ++m) {
        Complex z = p0[std::size_t(modes_[m][0] + band_)];
        if (dim_ >= 2) z *= p1[std::size_t(modes_[m][1] + band_)];
        if (dim_ >= 3) z *= p2[std::size_t(modes_[m][2] + band_)];
        S[m] += z;
      }
    }
    // pair sum: vhat0 |S0|^2 + 2 sum_H vhat |S|^2 - N V(0), with S0 = N
    double pair = vhat0_ * double(N) * double(N);
    double cross = vhat0_ * (rho_hat0_ * double(N)).real();
    for (std::size_t m = 0; m < M; ++m) {
      pair += 2.0 * vhat_[m] * std::norm(S[m]);
      cross += 2.0 * (vhat_[m] * rho_hat_[m] * std::conj(S[m])).real();
    }
    pair -= double(N) * v_at_zero_;
    pair_term = pair / (double(N) * double(N));
    cross_term = cross / double(N);
  }

  static constexpr std::array<int, 3> kZero{0, 0, 0};
  int dim_;
  int band_;
  std::vector<std::array<int, 3>> modes_;  // lexicographically positive half band
  std::vector<double> vhat_;
  std::vector<Complex> rho_hat_;
  double vhat0_ = 0.0;
  Complex rho_hat0_{0.0, 0.0};
  double v_at_zero_ = 0.0;
  double c_term_ = 0.0;
};

inline double modulated_energy(const Configuration& config, const DensityField& rho,
                               const kernels::PotentialSpec& spec) {
  return ModulatedEvaluator(spec, rho).evaluate(config);
}

// ---------------------------------------------------------------------------
// Gibbs log-weights. Computed through independent arithmetic paths (physical
// pair sum, per-particle convolution series), so the algebraic identity
//   -(1/N) (log G_N - log G_rhoN) = D / (2 sigma)
// is a meaningful cross-check against the mode-space D above.
// ---------------------------------------------------------------------------
struct GibbsWeights {
  double log_GN = 0.0;
  double log_G_rhoN = 0.0;
};

// (V * rho)(x) by the band-limited series at an exact point.
inline double convolution_at(const kernels::PotentialSpec& spec, const DensityField& rho,
                             std::span<const double> x) {
  require(2 * spec.spectral_band + 1 <= rho.n(), "convolution_at: grid too coarse for band");
  const auto rho_hat = rho.modes();
  const auto& shape = rho.shape();
  const std::array<int, 3> zero{0, 0, 0};
  double total = kernels::potential_mode(spec, std::span<const int>(zero.data(), spec.dimension)) *
                 rho_hat[0].real();
  kernels::detail::for_each_half_band(spec.dimension, spec.spectral_band, [&](std::span<const int> k) {
    const double v = kernels::potential_mode(spec, k);
    if (v == 0.0) return;
    std::array<int, 3> bins{0, 0, 0};
    double phase = 0.0;
    for (int a = 0; a < spec.dimension; ++a) {
      bins[a] = shape.bin_of_mode(k[a]);
      phase += double(k[a]) * x[a];
    }
    const Complex r = rho_hat[shape.flat_index(std::span<const int>(bins.data(), spec.dimension))];
    const Complex e(std::cos(kTwoPi * phase), std::sin(kTwoPi * phase));
    total += 2.0 * v * (r * e).real();
  });
  return total;
}

inline GibbsWeights gibbs_log_weights(const Configuration& config, const DensityField& rho,
                                      const kernels::PotentialSpec& spec, double sigma) {
  require(sigma > 0.0, "gibbs_log_weights: sigma must be > 0");
  const std::size_t N = config.size();
  const int d = config.dim();
  double pair_sum = 0.0;  // sum over unordered pairs
  double dx[3];
  for (std::size_t i = 0; i + 1 < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      for (int a = 0; a < d; ++a) dx[a] = config.positions()[i * d + a] - config.positions()[j * d + a];
      pair_sum += kernels::eval_potential(spec, std::span<const double>(dx, std::size_t(d)));
    }
  }
  double conv_sum = 0.0;
  for (std::size_t i = 0; i < N; ++i) conv_sum += convolution_at(spec, rho, config.particle(i));

  // int int V rho rho via mode sum
  const auto rho_hat = rho.modes();
  const auto& shape = rho.shape();
  const std::array<int, 3> zero{0, 0, 0};
  double self = kernels::potential_mode(spec, std::span<const int>(zero.data(), d)) *
                std::norm(rho_hat[0]);
  kernels::detail::for_each_half_band(d, spec.spectral_band, [&](std::span<const int> k) {
    const double v = kernels::potential_mode(spec, k);
    if (v == 0.0) return;
    std::array<int, 3> bins{0, 0, 0};
    for (int a = 0; a < d; ++a) bins[a] = shape.bin_of_mode(k[a]);
    self += 2.0 * v * std::norm(rho_hat[shape.flat_index(std::span<const int>(bins.data(), d))]);
  });

  GibbsWeights w;
  w.log_GN = -pair_sum / (double(N) * sigma);  // -(1/(2 N sigma)) sum_{i != j}
  w.log_G_rhoN = -conv_sum / sigma + double(N) * self / (2.0 * sigma);
  return w;
}

// ---------------------------------------------------------------------------
// Near-singular correction: D evaluated with the truncated potential
// V chi_eta (support |x| <= 2 eta). Convolution coefficients of the truncated
// potential come from quadrature on a fine auxiliary grid. The zero mode of
// V chi_eta is assigned to the far (smooth) side of the split: the pair sum
// uses the pointwise product, the cross and self terms drop k = 0. With this
// convention the near value vanishes exactly when all pair distances exceed
// 2 eta and rho is uniform, and near + far still reconstructs D exactly.
// ---------------------------------------------------------------------------
inline int default_correction_grid(int dim, int band) {
  std::size_t want = std::max<std::size_t>(4 * std::size_t(band) + 2, 512);
  const std::size_t cap = (dim == 1) ? 8192 : (dim == 2) ? 2048 : 128;
  std::size_t n = 1;
  while (n < want) n <<= 1;
  n = std::min(n, cap);
  n = std::max<std::size_t>(n, 2 * std::size_t(band) + 2);
  return int(n);
}

inline double modulated_correction(const Configuration& config, const DensityField& rho,
                                   const kernels::PotentialSpec& spec, double eta, double /*sigma*/,
                                   int quad_n = 0) {
  require(eta > 0.0 && eta < 0.25, "modulated_correction: eta must lie in (0, 1/4)");
  const int d = spec.dimension;
  const std::size_t N = config.size();

  // pair term with V(x) chi_eta(|x|), exact series inside the support
  double pair = 0.0;
  double dx[3];
  for (std::size_t i = 0; i + 1 < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        dx[a] = wrap_half(config.positions()[i * d + a] - config.positions()[j * d + a]);
        r2 += dx[a] * dx[a];
      }
      const double r = std::sqrt(r2);
      if (r >= 2.0 * eta) continue;
      pair += kernels::eval_potential(spec, std::span<const double>(dx, std::size_t(d))) *
              kernels::chi_eta(r, eta);
    }
  }
  pair *= 2.0 / (double(N) * double(N));

  // truncated-potential coefficients: exact band-limited V at the nodes of a
  // fine grid, multiplied by chi_eta, then transformed
  const int nq = (quad_n > 0) ? quad_n : default_correction_grid(d, spec.spectral_band);
  require(nq >= rho.n(), "modulated_correction: quadrature grid coarser than density grid");
  GridShape qshape{d, nq};
  std::vector<Complex> vmodes(qshape.size(), Complex(0.0, 0.0));
  std::array<int, kMaxDim> k{};
  for_each_index(d, nq, [&](std::span<const int> idx, std::size_t flat) {
    for (int a = 0; a < d; ++a) k[a] = qshape.mode_of(idx[a]);
    vmodes[flat] = kernels::potential_mode(spec, std::span<const int>(k.data(), d));
  });
  auto vvals = modes_to_grid(std::move(vmodes), qshape);
  for_each_index(d, nq, [&](std::span<const int> idx, std::size_t flat) {
    double r2 = 0.0;
    for (int a = 0; a < d; ++a) {
      const double c = wrap_half(double(idx[a]) / nq);
      r2 += c * c;
    }
    vvals[flat] *= kernels::chi_eta(std::sqrt(r2), eta);
  });
  const auto what = grid_to_modes(vvals, qshape);

  // fold onto the density grid band (strictly inside Nyquist), zero mode dropped
  const auto rho_hat = rho.modes();
  const auto& rshape = rho.shape();
  const int rband = (rshape.n - 1) / 2;
  double self = 0.0;

  std::vector<std::array<int, 3>> modes;
  std::vector<Complex> wr;  // What(k) * rhohat(k) per half mode
  kernels::detail::for_each_half_band(d, rband, [&](std::span<const int> kk) {
    std::array<int, 3> rbins{0, 0, 0}, qbins{0, 0, 0};
    for (int a = 0; a < d; ++a) {
      rbins[a] = rshape.bin_of_mode(kk[a]);
      qbins[a] = qshape.bin_of_mode(kk[a]);
    }
    const Complex w = what[qshape.flat_index(std::span<const int>(qbins.data(), d))];
    const Complex r = rho_hat[rshape.flat_index(std::span<const int>(rbins.data(), d))];
    self += 2.0 * (w * std::conj(r) * r).real();
    std::array<int, 3> kc{0, 0, 0};
    for (int a = 0; a < d; ++a) kc[a] = kk[a];
    modes.push_back(kc);
    wr.push_back(w * r);
  });

  double cross = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const auto x = config.particle(i);
    double ci = 0.0;
    for (std::size_t m = 0; m < modes.size(); ++m) {
      double phase = 0.0;
      for (int a = 0; a < d; ++a) phase += double(modes[m][a]) * x[a];
      ci += 2.0 * (wr[m] * Complex(std::cos(kTwoPi * phase), std::sin(kTwoPi * phase))).real();
    }
    cross += ci;
  }
  cross *= 2.0 / double(N);

  return pair - cross + self;
}

// ---------------------------------------------------------------------------
// Dissipation right-hand side (the explicit double-integral term):
//   -1/2 int int_{x != y} grad V(x-y) . (psi(x) - psi(y)) (d mu_N - d rho)^{x2},
// with psi = grad log rho + (1/sigma) grad V * rho.
// ---------------------------------------------------------------------------

// grad V by the exact band-limited series (no distance floor).
inline Vec potential_gradient(const kernels::PotentialSpec& spec, std::span<const double> x) {
  std::array<double, 3> w{0, 0, 0};
  kernels::detail::wrap_displacement(x, spec.dimension, w.data());
  std::array<double, 3> grad{0, 0, 0};
  kernels::detail::series_gradient(
      spec.dimension, spec.spectral_band,
      [&](std::span<const int> k) { return kernels::potential_mode(spec, k); },
      std::span<const double>(w.data(), spec.dimension), grad.data());
  Vec out{0, 0, 0, 0};
  for (int a = 0; a < spec.dimension; ++a) out[a] = grad[a];
  return out;
}

// Grid function evaluated at an exact point through its Fourier series
// (Nyquist bins dropped).
inline double grid_series_at(const std::vector<Complex>& modes, const GridShape& shape,
                             std::span<const double> x) {
  const int K = (shape.n - 1) / 2;
  double total = modes[0].real();
  std::array<int, 3> bins{0, 0, 0};
  kernels::detail::for_each_half_band(shape.dim, K, [&](std::span<const int> k) {
    double phase = 0.0;
    for (int a = 0; a < shape.dim; ++a) {
      bins[a] = shape.bin_of_mode(k[a]);
      phase += double(k[a]) * x[a];
    }
    const Complex m = modes[shape.flat_index(std::span<const int>(bins.data(), shape.dim))];
    total += 2.0 * (m * Complex(std::cos(kTwoPi * phase), std::sin(kTwoPi * phase))).real();
  });
  return total;
}

inline double dissipation_rhs(const Configuration& config, const DensityField& rho,
                              const kernels::PotentialSpec& spec, double sigma) {
  require(sigma > 0.0, "dissipation_rhs: sigma must be > 0");
  require(rho.min_value() >= 1e-8, "dissipation_rhs: density must be bounded below (min >= 1e-8)");
  const int d = spec.dimension;
  const std::size_t N = config.size();
  const auto& shape = rho.shape();
  const std::size_t size = shape.size();

  const pde::SpectralKernel kernel(spec, shape);

  // psi_a = d_a log rho + (1/sigma) (grad V * rho)_a on the grid
  const auto minus_gradconv = pde::convolve_force(rho, kernel);  // K*rho = -(grad V)*rho
  std::vector<double> logrho(size);
  for (std::size_t g = 0; g < size; ++g) logrho[g] = std::log(rho.values()[g]);
  const auto logrho_hat = grid_to_modes(logrho, shape);

  std::vector<std::vector<double>> psi(d), gradconv(d);
  for (int a = 0; a < d; ++a) {
    std::vector<Complex> m(size);
    for_each_index(d, shape.n, [&](std::span<const int> idx, std::size_t flat) {
      const double ka = shape.mode_of(idx[a]);
      m[flat] = Complex(0.0, kTwoPi * ka) * logrho_hat[flat];
    });
    auto dlog = modes_to_grid(std::move(m), shape);
    gradconv[a].resize(size);
    psi[a].resize(size);
    for (std::size_t g = 0; g < size; ++g) {
      gradconv[a][g] = -minus_gradconv[a][g];
      psi[a][g] = dlog[g] + gradconv[a][g] / sigma;
    }
  }

  // W2 = sum_a (d_a V) * (psi_a rho)
  std::vector<double> w2(size, 0.0);
  {
    std::vector<Complex> acc(size, Complex(0.0, 0.0));
    std::vector<double> prod(size);
    for (int a = 0; a < d; ++a) {
      for (std::size_t g = 0; g < size; ++g) prod[g] = psi[a][g] * rho.values()[g];
      auto phat = grid_to_modes(prod, shape);
      for_each_index(d, shape.n, [&](std::span<const int> idx, std::size_t flat) {
        const double ka = shape.mode_of(idx[a]);
        acc[flat] += Complex(0.0, kTwoPi * ka) * kernel.vhat()[flat] * phat[flat];
      });
    }
    w2 = modes_to_grid(std::move(acc), shape);
  }

  // spectral representations for evaluation at exact particle positions
  std::vector<std::vector<Complex>> psi_hat(d), gradconv_hat(d);
  for (int a = 0; a < d; ++a) {
    psi_hat[a] = grid_to_modes(psi[a], shape);
    gradconv_hat[a] = grid_to_modes(gradconv[a], shape);
  }
  const auto w2_hat = grid_to_modes(w2, shape);

  std::vector<double> psi_at(N * std::size_t(d)), gradconv_at(N * std::size_t(d)), w2_at(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto x = config.particle(i);
    for (int a = 0; a < d; ++a) {
      psi_at[i * d + a] = grid_series_at(psi_hat[a], shape, x);
      gradconv_at[i * d + a] = grid_series_at(gradconv_hat[a], shape, x);
    }
    w2_at[i] = grid_series_at(w2_hat, shape, x);
  }

  // pair term (1/N^2) sum_{i != j} grad V(x_i - x_j) . (psi(x_i) - psi(x_j))
  double pair = 0.0;
  double dx[3];
  for (std::size_t i = 0; i + 1 < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      for (int a = 0; a < d; ++a)
        dx[a] = config.positions()[i * d + a] - config.positions()[j * d + a];
      const Vec g = potential_gradient(spec, std::span<const double>(dx, std::size_t(d)));
      double dot = 0.0;
      for (int a = 0; a < d; ++a) dot += g[a] * (psi_at[i * d + a] - psi_at[j * d + a]);
      pair += dot;
    }
  }
  pair *= 2.0 / (double(N) * double(N));

  // cross term: f integrated against rho in one argument
  double cross = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double ci = -w2_at[i];
    for (int a = 0; a < d; ++a) ci += psi_at[i * d + a] * gradconv_at[i * d + a];
    cross += ci;
  }
  cross *= 2.0 / double(N);

  // both arguments integrated against rho
  double self = 0.0;
  for (std::size_t g = 0; g < size; ++g) {
    double sg = -w2[g];
    for (int a = 0; a < d; ++a) sg += psi[a][g] * gradconv[a][g];
    self += rho.values()[g] * sg;
  }
  self *= shape.cell_volume();

  return -0.5 * (pair - cross + self);
}

// Per-configuration record of the modulated quantities.
struct ModulatedSample {
  double D = 0.0;           // full modulated energy
  double D_W = 0.0;         // with the far (smooth) potential W = V (1 - chi_eta)
  double rhs_prop21 = 0.0;  // explicit dissipation term
  int member = -1;
  double time = 0.0;
};

inline ModulatedSample evaluate_sample(const Configuration& config, const DensityField& rho,
                                       const kernels::PotentialSpec& spec, double eta, double sigma,
                                       int member = -1) {
  ModulatedSample s;
  s.D = modulated_energy(config, rho, spec);
  s.D_W = s.D - modulated_correction(config, rho, spec, eta, sigma);
  s.rhs_prop21 = dissipation_rhs(config, rho, spec, sigma);
  s.member = member;
  s.time = config.time();
  return s;
}

// ---------------------------------------------------------------------------
// Grid functionals F : P(torus) -> R and the large-deviation value
//   I(F) = max_mu F(mu) - weight * KL(mu | rho),
// computed by damped multiplicative fixed-point iteration (mirror ascent with
// entropy regularizer): log mu <- (1-tau) log mu + tau (log rho + DF(mu)/weight).
// ---------------------------------------------------------------------------
struct GridFunctional {
  enum class Kind { Zero, Linear, Quadratic };
  Kind kind = Kind::Zero;
  GridShape shape{};
  std::vector<double> values;   // phi (linear) or kernel U (quadratic)
  std::vector<Complex> modes;   // coefficients of `values`
  double c = 1.0;               // quadratic prefactor
  std::function<double(std::span<const double>)> point_eval;  // optional closed form of U

  static GridFunctional zero() { return GridFunctional{}; }

  static GridFunctional linear(const GridShape& shape, std::vector<double> phi) {
    GridFunctional f;
    f.kind = Kind::Linear;
    f.shape = shape;
    f.modes = grid_to_modes(phi, shape);
    f.values = std::move(phi);
    return f;
  }

  // F(mu) = -c int int U(x-y) (d mu - d rho)^{x2}
  static GridFunctional quadratic(const GridShape& shape, std::vector<double> u, double c) {
    GridFunctional f;
    f.kind = Kind::Quadratic;
    f.shape = shape;
    f.c = c;
    f.modes = grid_to_modes(u, shape);
    f.values = std::move(u);
    return f;
  }
};

// U(x) = log(1/|x|) chi_eta(|x|) sampled at grid nodes; the origin node takes
// the cell average of the log singularity.
inline GridFunctional truncated_log_functional(int dim, int n, double c, double eta) {
  GridShape shape{dim, n};
  shape.validate();
  std::vector<double> u(shape.size(), 0.0);
  for_each_index(dim, n, [&](std::span<const int> idx, std::size_t flat) {
    double r2 = 0.0;
    for (int a = 0; a < dim; ++a) {
      const double x = wrap_half(double(idx[a]) / n);
      r2 += x * x;
    }
    const double r = std::sqrt(r2);
    if (r == 0.0) return;  // origin filled below
    u[flat] = std::log(1.0 / r) * kernels::chi_eta(r, eta);
  });
  {  // cell average of log(1/|x|) over the origin cell, midpoint rule
    const double h = shape.h();
    const int sub = 16;
    double acc = 0.0;
    std::size_t count = 0;
    for_each_index(dim, sub, [&](std::span<const int> idx, std::size_t) {
      double r2 = 0.0;
      for (int a = 0; a < dim; ++a) {
        const double x = (idx[a] + 0.5) / sub * h - 0.5 * h;
        r2 += x * x;
      }
      acc += std::log(1.0 / std::sqrt(r2));
      ++count;
    });
    u[0] = acc / double(count);
  }
  auto f = GridFunctional::quadratic(shape, std::move(u), c);
  f.point_eval = [eta](std::span<const double> x) {
    double r2 = 0.0;
    for (double v : x) {
      const double w = wrap_half(v);
      r2 += w * w;
    }
    const double r = std::sqrt(r2);
    if (r == 0.0) return 0.0;
    return std::log(1.0 / r) * kernels::chi_eta(r, eta);
  };
  return f;
}

inline double functional_value(const GridFunctional& f, std::span<const double> mu,
                               const DensityField& rho) {
  switch (f.kind) {
    case GridFunctional::Kind::Zero:
      return 0.0;
    case GridFunctional::Kind::Linear: {
      double s = 0.0;
      for (std::size_t g = 0; g < mu.size(); ++g) s += f.values[g] * (mu[g] - rho.values()[g]);
      return s * f.shape.cell_volume();
    }
    case GridFunctional::Kind::Quadratic: {
      std::vector<double> diff(mu.size());
      for (std::size_t g = 0; g < mu.size(); ++g) diff[g] = mu[g] - rho.values()[g];
      const auto dhat = grid_to_modes(diff, f.shape);
      double s = 0.0;
      for (std::size_t g = 0; g < dhat.size(); ++g) s += f.modes[g].real() * std::norm(dhat[g]);
      return -f.c * s;
    }
  }
  return 0.0;
}

// DF(mu): phi for linear, -2c U*(mu - rho) for quadratic.
inline std::vector<double> functional_gradient(const GridFunctional& f, std::span<const double> mu,
                                               const DensityField& rho) {
  switch (f.kind) {
    case GridFunctional::Kind::Zero:
      return std::vector<double>(mu.size(), 0.0);
    case GridFunctional::Kind::Linear:
      return f.values;
    case GridFunctional::Kind::Quadratic: {
      std::vector<double> diff(mu.size());
      for (std::size_t g = 0; g < mu.size(); ++g) diff[g] = mu[g] - rho.values()[g];
      auto dhat = grid_to_modes(diff, f.shape);
      for (std::size_t g = 0; g < dhat.size(); ++g) dhat[g] *= f.modes[g].real();
      auto conv = modes_to_grid(std::move(dhat), f.shape);
      for (double& v : conv) v *= -2.0 * f.c;
      return conv;
    }
  }
  return {};
}

struct LdResult {
  double value = 0.0;  // I = F(mu*) - weight KL(mu* | rho)
  DensityField argmax;
  int iterations = 0;
  bool converged = false;
  double residual = 0.0;
};

inline constexpr double kLdDamping = 0.5;

inline LdResult ld_functional(const GridFunctional& f, const DensityField& rho, double weight,
                              int max_iter = 500, double tol = 1e-12) {
  require(weight > 0.0, "ld_functional: weight must be > 0");
  const auto& shape = rho.shape();
  if (f.kind != GridFunctional::Kind::Zero)
    require(f.shape == shape, "ld_functional: functional grid mismatch");
  const std::size_t size = shape.size();
  const double hv = shape.cell_volume();

  std::vector<double> logrho(size);
  for (std::size_t g = 0; g < size; ++g) logrho[g] = std::log(std::max(rho.values()[g], 1e-300));

  std::vector<double> mu(rho.values().begin(), rho.values().end());
  LdResult result;
  for (int it = 1; it <= max_iter; ++it) {
    const auto df = functional_gradient(f, mu, rho);
    std::vector<double> lognew(size);
    double lmax = -1e300;
    for (std::size_t g = 0; g < size; ++g) {
      const double lmu = std::log(std::max(mu[g], 1e-300));
      lognew[g] = (1.0 - kLdDamping) * lmu + kLdDamping * (logrho[g] + df[g] / weight);
      lmax = std::max(lmax, lognew[g]);
    }
    double mass = 0.0;
    std::vector<double> next(size);
    for (std::size_t g = 0; g < size; ++g) {
      next[g] = std::exp(lognew[g] - lmax);
      mass += next[g];
    }
    mass *= hv;
    for (double& v : next) v /= mass;
    result.residual = l1_raw(next, mu, hv);
    mu = std::move(next);
    result.iterations = it;
    if (result.residual < tol) {
      result.converged = true;
      break;
    }
  }
  double kl = 0.0;
  for (std::size_t g = 0; g < size; ++g)
    if (mu[g] > 0.0) kl += mu[g] * (std::log(mu[g]) - logrho[g]);
  kl *= hv;
  result.value = functional_value(f, mu, rho) - weight * kl;
  result.argmax = DensityField::from_values_unchecked(shape, std::move(mu), rho.time());
  return result;
}

// ---------------------------------------------------------------------------
// Partition-function Monte Carlo:
//   E_{X ~ rho^{xN}} exp( N int int f(x,y) (d mu_N - d rho)^{x2} )
// for separable symmetric f(x,y) = sum_r s_r phi_r(x) phi_r(y), where the
// double integral collapses to sum_r s_r ( (1/N) sum_i phi_r(X_i) - m_r )^2.
// Log-sum-exp stabilized; standard error by 16 batch means.
// ---------------------------------------------------------------------------
struct SeparableTerm {
  double scale = 1.0;
  std::function<double(std::span<const double>)> phi;
  double rho_mean = 0.0;  // int phi d rho
};

struct SeparableF {
  std::vector<SeparableTerm> terms;
};

// f(x,y) = scale cos(2 pi k.x) cos(2 pi k.y) with the mean under rho filled in.
inline SeparableF cosine_separable(std::array<int, 3> k, double scale, const DensityField& rho) {
  SeparableTerm term;
  term.scale = scale;
  const int d = rho.dim();
  std::array<int, 3> kk = k;
  term.phi = [kk, d](std::span<const double> x) {
    double phase = 0.0;
    for (int a = 0; a < d; ++a) phase += double(kk[a]) * x[a];
    return std::cos(kTwoPi * phase);
  };
  double mean = 0.0;
  const auto& shape = rho.shape();
  for_each_index(d, shape.n, [&](std::span<const int> idx, std::size_t flat) {
    double phase = 0.0;
    for (int a = 0; a < d; ++a) phase += double(kk[a]) * idx[a] / double(shape.n);
    mean += rho.values()[flat] * std::cos(kTwoPi * phase);
  });
  term.rho_mean = mean * shape.cell_volume();
  SeparableF f;
  f.terms.push_back(std::move(term));
  return f;
}

struct PartitionEstimate {
  double estimate = 0.0;
  double stderr_ = 0.0;
  double ess = 0.0;
  bool unreliable = false;
};

inline PartitionEstimate partition_mc(const SeparableF& f, const DensityField& rho, std::size_t N,
                                      std::size_t M_samples, std::uint64_t seed) {
  require(N >= 1, "partition_mc: N must be >= 1");
  require(M_samples >= 1000, "partition_mc: need at least 10^3 samples");
  const GridSampler sampler(rho);
  const int d = rho.dim();
  CounterRng rng(seed, 0, RngDomain::kSampling);

  std::vector<double> exponents(M_samples);
  std::vector<double> means(f.terms.size());
  double u[1 + 3], x[3];
  for (std::size_t s = 0; s < M_samples; ++s) {
    std::fill(means.begin(), means.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      for (int j = 0; j < 1 + d; ++j)
        u[j] = rng.uniform(std::uint32_t(s), std::uint32_t(i), std::uint32_t(j));
      sampler.draw(std::span<const double>(u, std::size_t(1 + d)), x);
      for (std::size_t r = 0; r < f.terms.size(); ++r)
        means[r] += f.terms[r].phi(std::span<const double>(x, std::size_t(d)));
    }
    double F = 0.0;
    for (std::size_t r = 0; r < f.terms.size(); ++r) {
      const double dev = means[r] / double(N) - f.terms[r].rho_mean;
      F += f.terms[r].scale * dev * dev;
    }
    exponents[s] = double(N) * F;
  }

  double m = exponents[0];
  for (double e : exponents) m = std::max(m, e);
  double wsum = 0.0, w2sum = 0.0;
  for (double e : exponents) {
    const double w = std::exp(e - m);
    wsum += w;
    w2sum += w * w;
  }
  PartitionEstimate out;
  out.estimate = std::exp(m) * (wsum / double(M_samples));
  out.ess = (w2sum > 0.0) ? wsum * wsum / w2sum : double(M_samples);
  out.unreliable = out.ess < 10.0;

  const std::size_t B = 16;
  const std::size_t per = M_samples / B;
  std::vector<double> batch(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t s = b * per; s < (b + 1) * per; ++s) acc += std::exp(exponents[s] - m);
    batch[b] = std::exp(m) * acc / double(per);
  }
  double bm = 0.0;
  for (double v : batch) bm += v;
  bm /= double(B);
  double var = 0.0;
  for (double v : batch) var += (v - bm) * (v - bm);
  var /= double(B - 1);
  out.stderr_ = std::sqrt(var / double(B));
  return out;
}

// ---------------------------------------------------------------------------
// Mollification gap: ensemble average of |F(mu_N) - F(L_eps * mu_N)|, where
// the unmollified side uses pair sums and the mollified side the gridded
// deposit smoothed by the heat multiplier exp(-2 pi^2 eps^2 |k|^2). The
// gridded quadratic value subtracts the atom self-interaction, mirroring the
// diagonal-removed pair sum. At eps = 0 both sides are the grid deposit, so
// the gap is identically zero.
// ---------------------------------------------------------------------------
inline std::vector<double> deposit_histogram(const Configuration& config, const GridShape& shape) {
  std::vector<double> vals(shape.size(), 0.0);
  const int d = shape.dim;
  const std::size_t N = config.size();
  std::array<int, kMaxDim> idx{};
  for (std::size_t i = 0; i < N; ++i) {
    const auto x = config.particle(i);
    for (int a = 0; a < d; ++a) {
      int c = int(std::floor(wrap01(x[a]) * shape.n));
      if (c >= shape.n) c = shape.n - 1;
      idx[a] = c;
    }
    vals[shape.flat_index(std::span<const int>(idx.data(), d))] += 1.0;
  }
  const double scale = 1.0 / (double(N) * shape.cell_volume());
  for (double& v : vals) v *= scale;
  return vals;
}

inline double mollification_gap(const GridFunctional& f, const DensityField& rho,
                                const particles::EnsembleRun& ensemble, double t, double eps) {
  if (f.kind == GridFunctional::Kind::Zero) return 0.0;
  if (eps == 0.0) return 0.0;
  const int idx = ensemble.save_index(t);
  require(idx >= 0, "mollification_gap: time not in the save schedule");
  const auto& shape = rho.shape();
  require(f.shape == shape, "mollification_gap: functional grid mismatch");
  const int d = shape.dim;

  // diagonal correction for the mollified atoms: (1/N) sum_k Uhat e^{-4 pi^2 eps^2 |k|^2}
  double diag = 0.0;
  const auto rho_hat = rho.modes();
  std::vector<double> mult(shape.size());
  for_each_index(d, shape.n, [&](std::span<const int> bins, std::size_t flat) {
    double k2 = 0.0;
    for (int a = 0; a < d; ++a) {
      const double ka = shape.mode_of(bins[a]);
      k2 += ka * ka;
    }
    mult[flat] = std::exp(-2.0 * kPi * kPi * eps * eps * k2);
    diag += f.modes[flat].real() * mult[flat] * mult[flat];
  });

  double acc = 0.0;
  int used = 0;
  for (const auto& member : ensemble.members) {
    if (member.failed) continue;
    const Configuration& config = member.snapshots[std::size_t(idx)];
    const std::size_t N = config.size();

    double f_pair = 0.0;
    if (f.kind == GridFunctional::Kind::Linear) {
      double mean = 0.0, rho_mean = 0.0;
      for (std::size_t i = 0; i < N; ++i)
        mean += grid_series_at(f.modes, shape, config.particle(i));
      mean /= double(N);
      for (std::size_t g = 0; g < shape.size(); ++g) rho_mean += f.values[g] * rho.values()[g];
      rho_mean *= shape.cell_volume();
      f_pair = mean - rho_mean;
    } else {
      double pair = 0.0;
      double dx[3];
      for (std::size_t i = 0; i + 1 < N; ++i) {
        for (std::size_t j = i + 1; j < N; ++j) {
          for (int a = 0; a < d; ++a)
            dx[a] = config.positions()[i * d + a] - config.positions()[j * d + a];
          const std::span<const double> dxs(dx, std::size_t(d));
          pair += f.point_eval ? f.point_eval(dxs) : grid_series_at(f.modes, shape, dxs);
        }
      }
      pair *= 2.0 / (double(N) * double(N));
      double cross = 0.0;
      std::vector<Complex> umodes_rho(shape.size());
      for (std::size_t g = 0; g < shape.size(); ++g)
        umodes_rho[g] = f.modes[g].real() * rho_hat[g];
      for (std::size_t i = 0; i < N; ++i)
        cross += grid_series_at(umodes_rho, shape, config.particle(i));
      cross *= 2.0 / double(N);
      double self = 0.0;
      for (std::size_t g = 0; g < shape.size(); ++g)
        self += f.modes[g].real() * std::norm(rho_hat[g]);
      f_pair = -f.c * (pair - cross + self);
    }

    const auto deposit = deposit_histogram(config, shape);
    auto dep_hat = grid_to_modes(deposit, shape);
    for (std::size_t g = 0; g < shape.size(); ++g) dep_hat[g] *= mult[g];
    double f_grid = 0.0;
    if (f.kind == GridFunctional::Kind::Linear) {
      // Parseval: int phi d(mu - rho) = sum_k phihat(k) conj(muhat - rhohat)(k)
      double s = 0.0;
      for (std::size_t g = 0; g < shape.size(); ++g)
        s += (f.modes[g] * std::conj(dep_hat[g] - rho_hat[g])).real();
      f_grid = s;
    } else {
      double s = 0.0;
      for (std::size_t g = 0; g < shape.size(); ++g)
        s += f.modes[g].real() * std::norm(dep_hat[g] - rho_hat[g]);
      f_grid = -f.c * (s - diag / double(N));
    }
    acc += std::abs(f_pair - f_grid);
    ++used;
  }
  require(used > 0, "mollification_gap: no surviving members");
  return acc / double(used);
}

// ---------------------------------------------------------------------------
// Exponential change-of-measure inequality on a finite state space:
//   int psi dp <= (1/(alpha N)) [ KL(p|q) + log int e^{alpha N psi} dq ].
// ---------------------------------------------------------------------------
struct ChangeOfMeasureResult {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
  bool kl_infinite = false;
};

inline ChangeOfMeasureResult change_of_measure_check(std::span<const double> p,
                                                     std::span<const double> q,
                                                     std::span<const double> psi, double alpha,
                                                     double N = 1.0) {
  require(alpha > 0.0 && N > 0.0, "change_of_measure: alpha and N must be > 0");
  require(p.size() == q.size() && p.size() == psi.size(), "change_of_measure: size mismatch");
  ChangeOfMeasureResult res;
  for (std::size_t s = 0; s < p.size(); ++s) res.lhs += psi[s] * p[s];

  double kl = 0.0;
  for (std::size_t s = 0; s < p.size(); ++s) {
    if (p[s] > 0.0) {
      if (q[s] <= 0.0) {
        res.kl_infinite = true;
        break;
      }
      kl += p[s] * std::log(p[s] / q[s]);
    }
  }
  if (res.kl_infinite) {
    res.rhs = std::numeric_limits<double>::infinity();
    res.holds = true;
    return res;
  }
  double m = -1e300;
  for (std::size_t s = 0; s < q.size(); ++s)
    if (q[s] > 0.0) m = std::max(m, alpha * N * psi[s]);
  double lse = 0.0;
  for (std::size_t s = 0; s < q.size(); ++s)
    if (q[s] > 0.0) lse += q[s] * std::exp(alpha * N * psi[s] - m);
  const double log_mgf = m + std::log(lse);
  res.rhs = (kl + log_mgf) / (alpha * N);
  res.holds = res.lhs <= res.rhs + 1e-12;
  return res;
}

}  // namespace mfl::freeenergy
