#include <doctest.h>

#include <cmath>

#include "mfl/freeenergy.hpp"
#include "oracles.hpp"

using namespace mfl;
using particles::Configuration;
namespace fe = freeenergy;

namespace {

kernels::PotentialSpec pks(double lambda, int band, int dim = 2) {
  kernels::PotentialSpec spec;
  spec.dimension = dim;
  spec.attractive_log_coefficient = lambda;
  spec.spectral_band = band;
  spec.force_regularization = 1e-3;
  return spec;
}

kernels::PotentialSpec riesz2d(double alpha, double c, int band) {
  kernels::PotentialSpec spec;
  spec.dimension = 2;
  spec.riesz_exponent = alpha;
  spec.riesz_coefficient = c;
  spec.spectral_band = band;
  spec.force_regularization = 1e-3;
  return spec;
}

Configuration random_config(int dim, std::size_t N, const DensityField& rho, std::uint64_t seed,
                            std::uint32_t member = 0) {
  (void)dim;
  return particles::sample_initial(rho, N, seed, member);
}

// Independent three-term evaluation: exact series for the pair sum, grid
// quadrature for the convolution and double-integral terms.
double direct_modulated(const Configuration& config, const DensityField& rho,
                        const kernels::PotentialSpec& spec) {
  const int d = spec.dimension;
  const std::size_t N = config.size();
  const auto& shape = rho.shape();
  const double hv = shape.cell_volume();
  double pair = 0.0;
  double dx[3];
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      for (int a = 0; a < d; ++a)
        dx[a] = config.positions()[i * d + a] - config.positions()[j * d + a];
      pair += kernels::eval_potential(spec, std::span<const double>(dx, std::size_t(d)));
    }
  pair /= double(N) * double(N);

  double cross = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double conv = 0.0;
    for_each_index(d, shape.n, [&](std::span<const int> idx, std::size_t flat) {
      double delta[3];
      for (int a = 0; a < d; ++a) delta[a] = config.positions()[i * d + a] - double(idx[a]) / shape.n;
      conv += kernels::eval_potential(spec, std::span<const double>(delta, std::size_t(d))) *
              rho.values()[flat] * hv;
    });
    cross += conv;
  }
  cross *= 2.0 / double(N);

  double self = 0.0;
  for_each_index(d, shape.n, [&](std::span<const int> ia, std::size_t fa) {
    for_each_index(d, shape.n, [&](std::span<const int> ib, std::size_t fb) {
      double delta[3];
      for (int a = 0; a < d; ++a) delta[a] = double(ia[a] - ib[a]) / shape.n;
      self += kernels::eval_potential(spec, std::span<const double>(delta, std::size_t(d))) *
              rho.values()[fa] * rho.values()[fb] * hv * hv;
    });
  });
  return pair - cross + self;
}

}  // namespace

TEST_CASE("modulated energy: N = 2 matches hand quadrature on a 16^2 grid") {
  const auto spec = pks(0.9, 7);
  const auto rho = DensityField::wrapped_gaussian(2, 16, 0.18);
  Configuration config(2, {0.21, 0.37, 0.68, 0.77}, 0.0, {1, 0, 0});
  const double ours = fe::modulated_energy(config, rho, spec);
  const double ref = direct_modulated(config, rho, spec);
  CHECK(std::abs(ours - ref) < 1e-10);
}

TEST_CASE("modulated energy: decomposition agrees with the direct double loop at N = 64") {
  auto spec = pks(0.6, 7);
  spec.riesz_exponent = 0.5;
  spec.riesz_coefficient = 0.4;
  const auto rho = DensityField::wrapped_gaussian(2, 16, 0.2);
  const auto config = random_config(2, 64, rho, 12345);
  const double ours = fe::modulated_energy(config, rho, spec);
  const double ref = direct_modulated(config, rho, spec);
  CHECK(std::abs(ours - ref) < 1e-10);
}

TEST_CASE("modulated energy: uniform reference with zero-mean potential is the bare pair sum") {
  const auto spec = riesz2d(0.5, 1.0, 8);
  const auto rho = DensityField::uniform(2, 32);
  const auto config = random_config(2, 12, rho, 5);
  const double ours = fe::modulated_energy(config, rho, spec);
  double pair = 0.0;
  double dx[2];
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j) {
      if (i == j) continue;
      for (int a = 0; a < 2; ++a)
        dx[a] = config.positions()[i * 2 + a] - config.positions()[j * 2 + a];
      pair += kernels::eval_potential(spec, std::span<const double>(dx, 2));
    }
  pair /= 144.0;
  CHECK(ours == doctest::Approx(pair).epsilon(1e-10));
}

TEST_CASE("modulated energy: i.i.d. mean is -(1/N) int int V rho rho") {
  const auto spec = pks(1.0, 10);
  const auto rho = DensityField::wrapped_gaussian(2, 32, 0.2);
  const fe::ModulatedEvaluator evaluator(spec, rho);
  const oracle::DensitySampler sampler(rho);  // draws from the trig interpolant itself
  SequentialRng rng(900, 0, RngDomain::kGeneric);
  const std::size_t N = 16;
  const int draws = 10000;
  double sum = 0.0, sum2 = 0.0;
  std::vector<double> pos(N * 2);
  for (int s = 0; s < draws; ++s) {
    for (std::size_t i = 0; i < N; ++i) sampler.draw(rng, pos.data() + 2 * i);
    const Configuration config(2, pos, 0.0, {900, 0, 0});
    const double D = evaluator.evaluate(config);
    sum += D;
    sum2 += D * D;
  }
  const double mean = sum / draws;
  const double var = (sum2 / draws - mean * mean) * draws / (draws - 1.0);
  const double se = std::sqrt(var / draws);
  const double target = -evaluator.interaction_with_self() / double(N);
  CHECK(std::abs(mean - target) <= 4.0 * se);
}

TEST_CASE("gibbs log-weights: closed forms and the exact identity") {
  const auto rho = DensityField::wrapped_gaussian(2, 32, 0.2);
  SUBCASE("zero potential gives zero logs") {
    kernels::PotentialSpec spec;
    spec.dimension = 2;
    spec.spectral_band = 8;
    spec.force_regularization = 1e-3;
    const auto config = random_config(2, 8, rho, 3);
    const auto w = fe::gibbs_log_weights(config, rho, spec, 0.7);
    CHECK(w.log_GN == 0.0);
    CHECK(std::abs(w.log_G_rhoN) < 1e-13);
  }
  SUBCASE("N = 2 closed form") {
    const auto spec = pks(0.8, 10);
    const double sigma = 0.6;
    Configuration config(2, {0.2, 0.3, 0.7, 0.8}, 0.0, {1, 0, 0});
    const double dx[2] = {0.2 - 0.7, 0.3 - 0.8};
    const double v = kernels::eval_potential(spec, std::span<const double>(dx, 2));
    const auto w = fe::gibbs_log_weights(config, rho, spec, sigma);
    CHECK(w.log_GN == doctest::Approx(-v / (2.0 * sigma)).epsilon(1e-12));
  }
  SUBCASE("identity -(1/N)(log G_N - log G_rhoN) = D/(2 sigma) across 100 configs") {
    const auto spec = pks(0.8, 10);
    const double sigma = 0.45;
    const fe::ModulatedEvaluator evaluator(spec, rho);
    for (int t = 0; t < 100; ++t) {
      const auto config = random_config(2, 32, rho, 1000, std::uint32_t(t));
      const auto w = fe::gibbs_log_weights(config, rho, spec, sigma);
      const double lhs = -(w.log_GN - w.log_G_rhoN) / 32.0;
      const double rhs = evaluator.evaluate(config) / (2.0 * sigma);
      CHECK(std::abs(lhs - rhs) < 1e-12);
    }
  }
}

TEST_CASE("modulated correction: support, split consistency, hand case") {
  auto spec = pks(0.7, 10);
  SUBCASE("distant pairs and uniform reference give exactly zero") {
    const auto rho = DensityField::uniform(2, 32);
    const double eta = 0.05;
    Configuration config(2, {0.1, 0.1, 0.5, 0.5, 0.9, 0.2}, 0.0, {1, 0, 0});
    // all pairwise wrapped distances exceed 2 eta = 0.1
    CHECK(fe::modulated_correction(config, rho, spec, eta, 1.0) == 0.0);
  }
  SUBCASE("near + far reconstructs D") {
    const auto rho = DensityField::wrapped_gaussian(2, 32, 0.2);
    const auto config = random_config(2, 24, rho, 321);
    const double eta = 0.24;
    const double D = fe::modulated_energy(config, rho, spec);
    const double near = fe::modulated_correction(config, rho, spec, eta, 1.0, 512);

    // far side, same mixed convention: pointwise pair sum of V (1 - chi),
    // spectral terms carry the whole zero mode
    const int d = 2;
    const std::size_t N = config.size();
    double pair_far = 0.0;
    double dx[2];
    for (std::size_t i = 0; i + 1 < N; ++i)
      for (std::size_t j = i + 1; j < N; ++j) {
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
          dx[a] = wrap_half(config.positions()[i * d + a] - config.positions()[j * d + a]);
          r2 += dx[a] * dx[a];
        }
        pair_far += kernels::eval_potential(spec, std::span<const double>(dx, 2)) *
                    (1.0 - kernels::chi_eta(std::sqrt(r2), eta));
      }
    pair_far *= 2.0 / (double(N) * double(N));

    // spectral far coefficients on a 512 grid: What_far = Vhat_grid - What_near
    const GridShape qshape{2, 512};
    std::vector<Complex> vmodes(qshape.size(), Complex(0, 0));
    std::array<int, 2> k{};
    for_each_index(2, 512, [&](std::span<const int> idx, std::size_t flat) {
      for (int a = 0; a < 2; ++a) k[a] = qshape.mode_of(idx[a]);
      vmodes[flat] = kernels::potential_mode(spec, std::span<const int>(k.data(), 2));
    });
    auto vvals = modes_to_grid(std::move(vmodes), qshape);
    std::vector<double> farvals(vvals.size());
    for_each_index(2, 512, [&](std::span<const int> idx, std::size_t flat) {
      double r2 = 0.0;
      for (int a = 0; a < 2; ++a) {
        const double c = wrap_half(double(idx[a]) / 512.0);
        r2 += c * c;
      }
      farvals[flat] = vvals[flat] * (1.0 - kernels::chi_eta(std::sqrt(r2), eta));
    });
    const auto what_far = grid_to_modes(farvals, qshape);
    const auto rho_hat = rho.modes();
    const auto& rshape = rho.shape();
    // the far side carries the whole zero-mode budget Vhat(0)
    const std::array<int, 2> zero{0, 0};
    const double w0 = kernels::potential_mode(spec, std::span<const int>(zero.data(), 2));
    double cross = 0.0, self = w0 * std::norm(rho_hat[0]);
    for (std::size_t i = 0; i < N; ++i) {
      double ci = w0 * rho_hat[0].real();
      kernels::detail::for_each_half_band(2, (rshape.n - 1) / 2, [&](std::span<const int> kk) {
        std::array<int, 2> rb{rshape.bin_of_mode(kk[0]), rshape.bin_of_mode(kk[1])};
        std::array<int, 2> qb{qshape.bin_of_mode(kk[0]), qshape.bin_of_mode(kk[1])};
        const Complex w = what_far[qshape.flat_index(std::span<const int>(qb.data(), 2))];
        const Complex r = rho_hat[rshape.flat_index(std::span<const int>(rb.data(), 2))];
        double phase = 0.0;
        for (int a = 0; a < 2; ++a) phase += double(kk[a]) * config.positions()[i * 2 + a];
        ci += 2.0 * (w * r * Complex(std::cos(kTwoPi * phase), std::sin(kTwoPi * phase))).real();
        if (i == 0) self += 2.0 * (w * r * std::conj(r)).real();
      });
      cross += ci;
    }
    cross *= 2.0 / double(N);
    const double far = pair_far - cross + self;
    CHECK(std::abs((near + far) - D) < 1e-8);
  }
  SUBCASE("N = 2 hand case against grid quadrature") {
    const auto rho = DensityField::wrapped_gaussian(2, 32, 0.2);
    const double eta = 0.12;
    Configuration config(2, {0.48, 0.5, 0.56, 0.5}, 0.0, {1, 0, 0});  // distance 0.08 < 2 eta
    const double ours = fe::modulated_correction(config, rho, spec, eta, 1.0, 32);

    // oracle on the same 32 grid: sample V chi exactly, subtract its mean,
    // then direct sums (pair term keeps the pointwise product)
    const GridShape qshape{2, 32};
    std::vector<Complex> vmodes(qshape.size(), Complex(0, 0));
    std::array<int, 2> k{};
    for_each_index(2, 32, [&](std::span<const int> idx, std::size_t flat) {
      for (int a = 0; a < 2; ++a) k[a] = qshape.mode_of(idx[a]);
      vmodes[flat] = kernels::potential_mode(spec, std::span<const int>(k.data(), 2));
    });
    auto vvals = modes_to_grid(std::move(vmodes), qshape);
    std::vector<double> wvals(vvals.size());
    for_each_index(2, 32, [&](std::span<const int> idx, std::size_t flat) {
      double r2 = 0.0;
      for (int a = 0; a < 2; ++a) {
        const double c = wrap_half(double(idx[a]) / 32.0);
        r2 += c * c;
      }
      wvals[flat] = vvals[flat] * kernels::chi_eta(std::sqrt(r2), eta);
    });
    const double dx[2] = {wrap_half(0.48 - 0.56), 0.0};
    const double r = std::hypot(dx[0], dx[1]);
    const double pair = 2.0 / 4.0 *
                        kernels::eval_potential(spec, std::span<const double>(dx, 2)) *
                        kernels::chi_eta(r, eta);
    // cross and self terms through the series of the sampled W (zero mode
    // dropped), an independent arithmetic path from the implementation
    const auto what = grid_to_modes(wvals, qshape);
    const auto rho_hat = rho.modes();
    double cross_series = 0.0, self_series = 0.0;
    kernels::detail::for_each_half_band(2, (qshape.n - 1) / 2, [&](std::span<const int> kk) {
      std::array<int, 2> qb{qshape.bin_of_mode(kk[0]), qshape.bin_of_mode(kk[1])};
      const Complex w = what[qshape.flat_index(std::span<const int>(qb.data(), 2))];
      const Complex rh = rho_hat[qshape.flat_index(std::span<const int>(qb.data(), 2))];
      self_series += 2.0 * (w * rh * std::conj(rh)).real();
      for (int i = 0; i < 2; ++i) {
        double phase = 0.0;
        for (int a = 0; a < 2; ++a) phase += double(kk[a]) * config.positions()[i * 2 + a];
        cross_series += (w * rh * Complex(std::cos(kTwoPi * phase), std::sin(kTwoPi * phase))).real();
      }
    });
    cross_series *= 2.0;        // conjugate mode pairs
    cross_series *= 2.0 / 2.0;  // (2/N) with N = 2
    const double ref = pair - cross_series + self_series;
    CHECK(std::abs(ours - ref) < 1e-10);
  }
}

TEST_CASE("sample record assembles D, the far-part value and the dissipation term") {
  const auto spec = pks(0.7, 10);
  const auto rho = DensityField::wrapped_gaussian(2, 32, 0.22);
  const auto config = random_config(2, 12, rho, 55, 3);
  const double eta = 0.1, sigma = 0.5;
  const auto sample = fe::evaluate_sample(config, rho, spec, eta, sigma, 3);
  CHECK(sample.member == 3);
  CHECK(sample.D == fe::modulated_energy(config, rho, spec));
  CHECK(sample.D_W ==
        doctest::Approx(sample.D - fe::modulated_correction(config, rho, spec, eta, sigma))
            .epsilon(1e-12));
  CHECK(sample.rhs_prop21 == fe::dissipation_rhs(config, rho, spec, sigma));
}

TEST_CASE("dissipation term: uniform reference vanishes, swap symmetry holds") {
  const auto spec = pks(0.8, 10);
  SUBCASE("uniform gives zero") {
    const auto rho = DensityField::uniform(2, 32);
    const auto config = random_config(2, 6, rho, 17);
    CHECK(std::abs(fe::dissipation_rhs(config, rho, spec, 0.5)) < 1e-12);
  }
  SUBCASE("swapping the two particles leaves the value unchanged") {
    const auto rho = DensityField::wrapped_gaussian(2, 32, 0.22);
    Configuration a(2, {0.3, 0.41, 0.62, 0.58}, 0.0, {1, 0, 0});
    Configuration b(2, {0.62, 0.58, 0.3, 0.41}, 0.0, {1, 0, 0});
    const double va = fe::dissipation_rhs(a, rho, spec, 0.5);
    const double vb = fe::dissipation_rhs(b, rho, spec, 0.5);
    CHECK(va == vb);
  }
  SUBCASE("rejects densities that are not bounded below") {
    auto rho = DensityField::wrapped_gaussian(2, 32, 0.05);  // far tails underflow
    const auto config = random_config(2, 4, DensityField::uniform(2, 32), 3);
    if (rho.min_value() < 1e-8)
      CHECK_THROWS_AS(fe::dissipation_rhs(config, rho, spec, 0.5), Error);
  }
  SUBCASE("N = 2 matches the direct quadrature oracle") {
    const auto rho = DensityField::wrapped_gaussian(2, 16, 0.22);
    const auto spec16 = pks(0.8, 7);
    Configuration config(2, {0.31, 0.42, 0.67, 0.55}, 0.0, {1, 0, 0});
    const double ours = fe::dissipation_rhs(config, rho, spec16, 0.5);

    // oracle: psi on the grid by the same definition, then the three terms of
    // the double integral with f(x,y) = grad V(x-y).(psi(x)-psi(y)) using
    // direct quadrature sums and series evaluation at the particles
    const auto& shape = rho.shape();
    const std::size_t size = shape.size();
    const double sigma = 0.5;
    const pde::SpectralKernel kernel(spec16, shape);
    const auto minus_gradconv = pde::convolve_force(rho, kernel);
    std::vector<double> logrho(size);
    for (std::size_t g = 0; g < size; ++g) logrho[g] = std::log(rho.values()[g]);
    const auto logrho_hat = grid_to_modes(logrho, shape);
    std::vector<std::vector<double>> psi(2);
    for (int a = 0; a < 2; ++a) {
      std::vector<Complex> m(size);
      for_each_index(2, shape.n, [&](std::span<const int> idx, std::size_t flat) {
        const double ka = shape.mode_of(idx[a]);
        m[flat] = Complex(0.0, kTwoPi * ka) * logrho_hat[flat];
      });
      const auto dlog = modes_to_grid(std::move(m), shape);
      psi[a].resize(size);
      for (std::size_t g = 0; g < size; ++g)
        psi[a][g] = dlog[g] - minus_gradconv[a][g] / sigma;
    }
    std::vector<std::vector<Complex>> psi_hat(2);
    for (int a = 0; a < 2; ++a) psi_hat[a] = grid_to_modes(psi[a], shape);
    const auto psi_at = [&](std::span<const double> x, int a) {
      return fe::grid_series_at(psi_hat[a], shape, x);
    };
    const auto f = [&](std::span<const double> x, std::span<const double> y) {
      double dx[2] = {x[0] - y[0], x[1] - y[1]};
      const Vec g = fe::potential_gradient(spec16, std::span<const double>(dx, 2));
      double dot = 0.0;
      for (int a = 0; a < 2; ++a) dot += g[a] * (psi_at(x, a) - psi_at(y, a));
      return dot;
    };
    const double hv = shape.cell_volume();
    std::vector<std::array<double, 2>> nodes(size);
    for_each_index(2, shape.n, [&](std::span<const int> idx, std::size_t flat) {
      nodes[flat] = {double(idx[0]) / shape.n, double(idx[1]) / shape.n};
    });
    const auto x1 = config.particle(0), x2 = config.particle(1);
    double pair = (f(x1, x2) + f(x2, x1)) / 4.0;
    double cross = 0.0;
    for (int i = 0; i < 2; ++i) {
      const auto xi = config.particle(std::size_t(i));
      for (std::size_t g = 0; g < size; ++g)
        cross += f(xi, std::span<const double>(nodes[g].data(), 2)) * rho.values()[g] * hv;
    }
    cross *= 2.0 / 2.0;
    double self = 0.0;
    for (std::size_t ga = 0; ga < size; ++ga)
      for (std::size_t gb = 0; gb < size; ++gb)
        self += f(std::span<const double>(nodes[ga].data(), 2),
                  std::span<const double>(nodes[gb].data(), 2)) *
                rho.values()[ga] * rho.values()[gb] * hv * hv;
    const double ref = -0.5 * (pair - cross + self);
    CHECK(std::abs(ours - ref) < 1e-8);
  }
}

TEST_CASE("large-deviation functional") {
  SUBCASE("zero functional: I = 0, argmax = rho") {
    const auto rho = DensityField::wrapped_gaussian(2, 32, 0.2);
    const auto res = fe::ld_functional(fe::GridFunctional::zero(), rho, 1.0);
    CHECK(res.converged);
    CHECK(std::abs(res.value) < 1e-12);
    CHECK(l1_raw(res.argmax.values(), rho.values(), rho.shape().cell_volume()) < 1e-10);
  }
  SUBCASE("linear functional reproduces the exponential-tilt closed form") {
    const int n = 128;
    const auto rho = DensityField::uniform(1, n);
    std::vector<double> phi(n);
    for (int i = 0; i < n; ++i) phi[i] = std::cos(kTwoPi * i / double(n));
    const auto F = fe::GridFunctional::linear(GridShape{1, n}, phi);
    const auto res = fe::ld_functional(F, rho, 1.0, 500, 1e-13);
    CHECK(res.converged);
    // grid quadrature of log int rho e^phi - int phi rho
    double z = 0.0, mean = 0.0;
    for (int i = 0; i < n; ++i) {
      z += std::exp(phi[i]) / n;
      mean += phi[i] / n;
    }
    const double ref = std::log(z) - mean;
    CHECK(res.value == doctest::Approx(ref).epsilon(1e-8));
    // the modified-Bessel value I_0(1), for scale
    CHECK(ref == doctest::Approx(std::log(1.2660658777520084)).epsilon(1e-10));
  }
  SUBCASE("truncated-log quadratic functional: fixed point stays at uniform") {
    const int n = 64;
    const auto rho = DensityField::uniform(2, n);
    const auto F = fe::truncated_log_functional(2, n, 1.0, 0.1);
    const auto res = fe::ld_functional(F, rho, 1.0, 500, 1e-12);
    CHECK(res.converged);
    CHECK(res.iterations <= 500);
    CHECK(std::abs(res.value) <= 1e-6);
    CHECK(l1_raw(res.argmax.values(), rho.values(), rho.shape().cell_volume()) <= 1e-6);
  }
}

TEST_CASE("partition-function Monte Carlo") {
  const auto rho = DensityField::uniform(2, 32);
  SUBCASE("f = 0 gives estimate 1 with zero error") {
    fe::SeparableF f;  // no terms
    const auto est = fe::partition_mc(f, rho, 8, 1000, 11);
    CHECK(est.estimate == 1.0);
    CHECK(est.stderr_ == 0.0);
    CHECK_FALSE(est.unreliable);
  }
  SUBCASE("N = 2 agrees with the 4-d grid quadrature oracle") {
    const double scale = 0.1;
    const auto f = fe::cosine_separable({1, 0, 0}, scale, rho);
    const auto est = fe::partition_mc(f, rho, 2, 60000, 5);
    // oracle: E exp(2 scale ((phi(x)+phi(y))/2)^2) over the 4-d torus; phi
    // depends on the first coordinate only, so the quadrature runs over a
    // 24^4 lattice with the trivial directions collapsing
    const int q = 24;
    double ref = 0.0;
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < q; ++b)
        for (int c = 0; c < q; ++c)
          for (int d = 0; d < q; ++d) {
            const double phix = std::cos(kTwoPi * a / double(q));
            const double phiy = std::cos(kTwoPi * c / double(q));
            const double dev = 0.5 * (phix + phiy);
            ref += std::exp(2.0 * scale * dev * dev);
            (void)b;
            (void)d;
          }
    ref /= std::pow(double(q), 4);
    CHECK(std::abs(est.estimate - ref) <= 3.0 * est.stderr_);
  }
  SUBCASE("N = 2 quadrature agreement across 20 random bounded test functions") {
    SequentialRng rng(2024, 0, RngDomain::kGeneric);
    for (int t = 0; t < 20; ++t) {
      const int k1 = 1 + int(rng.uniform() * 3.0);
      const int k2 = int(rng.uniform() * 3.0);
      const double scale = 0.05 + 0.3 * rng.uniform();
      const auto f = fe::cosine_separable({k1, k2, 0}, scale, rho);
      const auto est = fe::partition_mc(f, rho, 2, 20000, 1300 + t);
      // 4-d quadrature; phi = cos(2 pi (k1 x1 + k2 x2)) needs both coordinates
      const int q = 20;
      double ref = 0.0;
      for (int a = 0; a < q; ++a)
        for (int b = 0; b < q; ++b)
          for (int cc = 0; cc < q; ++cc)
            for (int d = 0; d < q; ++d) {
              const double phix = std::cos(kTwoPi * (k1 * a + k2 * b) / double(q));
              const double phiy = std::cos(kTwoPi * (k1 * cc + k2 * d) / double(q));
              const double dev = 0.5 * (phix + phiy);
              ref += std::exp(2.0 * scale * dev * dev);
            }
      ref /= std::pow(double(q), 4);
      CHECK(std::abs(est.estimate - ref) <= 3.0 * est.stderr_);
    }
  }
  SUBCASE("uniform-in-N bound at gamma ~ 0.3") {
    const double scale = 0.462;  // gamma = (2/pi s)^2 + s^2 ~ 0.30
    const double gamma = std::pow(2.0 / kPi * scale, 2) + scale * scale;
    CHECK(gamma == doctest::Approx(0.30).epsilon(0.01));
    const auto f = fe::cosine_separable({1, 0, 0}, scale, rho);
    for (std::size_t N : {8u, 16u, 32u}) {
      const auto est = fe::partition_mc(f, rho, N, 20000, 7);
      CHECK(est.estimate <= 2.0 / (1.0 - gamma) + 3.0 * est.stderr_);
    }
  }
}

TEST_CASE("mollification gap") {
  particles::EnsembleParams params;
  params.spec = pks(0.0, 10, 2);
  params.spec.attractive_log_coefficient = 0.0;
  params.sigma = 0.25;
  params.dt = 0.01;
  params.save_times = {0.05};
  params.N = 256;
  params.M = 8;
  params.master_seed = 9;
  const auto rho = DensityField::uniform(2, 64);
  const auto run = particles::run_ensemble(params, rho, 0);

  SUBCASE("zero functional and zero width give zero gap") {
    CHECK(fe::mollification_gap(fe::GridFunctional::zero(), rho, run, 0.05, 0.04) == 0.0);
    const auto F = fe::truncated_log_functional(2, 64, 1.0, 0.1);
    CHECK(fe::mollification_gap(F, rho, run, 0.05, 0.0) == 0.0);
  }
  SUBCASE("gap grows with the mollification width") {
    const auto F = fe::truncated_log_functional(2, 64, 1.0, 0.1);
    std::vector<std::pair<double, double>> pts;
    for (double eps : {0.02, 0.04, 0.08}) {
      const double g = fe::mollification_gap(F, rho, run, 0.05, eps);
      CHECK(g > 0.0);
      pts.push_back({eps, g});
    }
    // positive fitted slope in log-log
    const double slope = std::log(pts[2].second / pts[0].second) / std::log(pts[2].first / pts[0].first);
    CHECK(slope > 0.0);
  }
}

TEST_CASE("change of measure inequality") {
  SUBCASE("p = q reduces to the exponential-moment bound") {
    const std::vector<double> p{0.2, 0.5, 0.3};
    const std::vector<double> psi{1.0, -0.5, 2.0};
    for (double alpha : {0.5, 1.0, 2.0}) {
      const auto res = fe::change_of_measure_check(p, p, psi, alpha, 1.0);
      CHECK(res.holds);
      CHECK(res.lhs <= res.rhs + 1e-12);
    }
  }
  SUBCASE("random triples on a 3-state space always satisfy the bound") {
    SequentialRng rng(123, 0, RngDomain::kGeneric);
    for (int t = 0; t < 10000; ++t) {
      double p[3], q[3], psi[3];
      double sp = 0, sq = 0;
      for (int s = 0; s < 3; ++s) {
        p[s] = rng.uniform() + 1e-6;
        q[s] = rng.uniform() + 1e-6;
        psi[s] = 4.0 * (rng.uniform() - 0.5);
        sp += p[s];
        sq += q[s];
      }
      for (int s = 0; s < 3; ++s) {
        p[s] /= sp;
        q[s] /= sq;
      }
      const double alpha = (t % 3 == 0) ? 0.5 : (t % 3 == 1) ? 1.0 : 2.0;
      const double N = (t % 2 == 0) ? 1.0 : 4.0;
      const auto res = fe::change_of_measure_check(std::span<const double>(p, 3),
                                                   std::span<const double>(q, 3),
                                                   std::span<const double>(psi, 3), alpha, N);
      CHECK(res.holds);
    }
  }
  SUBCASE("the exponential tilt achieves equality") {
    const std::vector<double> p{0.5, 0.2, 0.3};
    const std::vector<double> q{0.25, 0.35, 0.4};
    const double alpha = 1.3, N = 4.0;
    std::vector<double> psi(3);
    for (int s = 0; s < 3; ++s) psi[s] = std::log(p[s] / q[s]) / (alpha * N);
    const auto res = fe::change_of_measure_check(p, q, psi, alpha, N);
    CHECK(res.lhs == doctest::Approx(res.rhs).epsilon(1e-12));
  }
  SUBCASE("support violation reports an infinite bound that trivially holds") {
    const std::vector<double> p{0.5, 0.5, 0.0};
    const std::vector<double> q{1.0, 0.0, 0.0};
    const std::vector<double> psi{1.0, 1.0, 1.0};
    const auto res = fe::change_of_measure_check(p, q, psi, 1.0, 1.0);
    CHECK(res.kl_infinite);
    CHECK(res.holds);
  }
}
