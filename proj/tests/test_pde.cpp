#include <doctest.h>

#include <cmath>

#include "mfl/pde.hpp"
#include "oracles.hpp"

using namespace mfl;

namespace {

kernels::PotentialSpec pks(double lambda, int band) {
  kernels::PotentialSpec spec;
  spec.dimension = 2;
  spec.attractive_log_coefficient = lambda;
  spec.spectral_band = band;
  spec.force_regularization = 1e-3;
  return spec;
}

}  // namespace

TEST_CASE("pure diffusion: single mode decays by the implicit multiplier") {
  const GridShape shape{2, 32};
  const double eps = 1e-8, sigma = 0.3, dt = 1e-3;
  std::vector<double> values(shape.size());
  for_each_index(2, 32, [&](std::span<const int> idx, std::size_t flat) {
    values[flat] = 1.0 + eps * std::cos(kTwoPi * idx[0] / 32.0);
  });
  auto rho = DensityField::from_values(shape, values);
  kernels::PotentialSpec spec;
  spec.dimension = 2;
  spec.spectral_band = 8;
  spec.force_regularization = 1e-3;
  const pde::SpectralKernel kernel(spec, shape);

  const auto before = rho.modes();
  pde::step_pde(rho, kernel, sigma, dt);
  const auto after = rho.modes();
  const std::size_t bin = shape.flat_index(std::array<int, 2>{1, 0});
  const double mult = 1.0 / (1.0 + 4.0 * kPi * kPi * sigma * dt);
  CHECK(std::abs(after[bin].real() - mult * before[bin].real()) < 1e-12);
}

TEST_CASE("uniform density is a fixed point for every potential") {
  auto rho = DensityField::uniform(2, 32);
  const auto spec = pks(0.7, 10);
  const pde::SpectralKernel kernel(spec, rho.shape());
  for (int s = 0; s < 5; ++s) pde::step_pde(rho, kernel, 0.4, 1e-3);
  for (double v : rho.values()) CHECK(std::abs(v - 1.0) < 1e-13);
}

TEST_CASE("mass is conserved to 1e-12 over 1000 steps") {
  auto rho = DensityField::wrapped_gaussian(2, 64, 0.12);
  const auto spec = pks(0.5, 21);
  const pde::SpectralKernel kernel(spec, rho.shape());
  for (int s = 0; s < 1000; ++s) pde::step_pde(rho, kernel, 0.5, 5e-4);
  CHECK(std::abs(rho.mass() - 1.0) <= 1e-12);
}

TEST_CASE("spectral convolution equals direct quadrature on a 16^2 grid") {
  const GridShape shape{2, 16};
  const auto spec = pks(0.9, 7);
  auto rho = DensityField::wrapped_gaussian(2, 16, 0.18);
  const pde::SpectralKernel kernel(spec, shape);
  const auto conv = pde::convolve(rho, kernel);
  const double h = shape.h();
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      double direct = 0.0;
      for (int p = 0; p < 16; ++p) {
        for (int q = 0; q < 16; ++q) {
          const double dx[2] = {(i - p) * h, (j - q) * h};
          direct += kernels::eval_potential(spec, std::span<const double>(dx, 2)) *
                    rho.values()[p * 16 + q] * h * h;
        }
      }
      CHECK(std::abs(conv[i * 16 + j] - direct) < 1e-10);
    }
  }
}

TEST_CASE("heat-kernel decay: every mode follows the multiplier") {
  const GridShape shape{2, 32};
  auto rho = DensityField::wrapped_gaussian(2, 32, 0.15);
  kernels::PotentialSpec spec;
  spec.dimension = 2;
  spec.spectral_band = 8;
  spec.force_regularization = 1e-3;
  const pde::SpectralKernel kernel(spec, shape);
  const double sigma = 0.4, dt = 2e-3;
  const auto before = rho.modes();
  pde::step_pde(rho, kernel, sigma, dt);
  const auto after = rho.modes();
  for_each_index(2, 32, [&](std::span<const int> idx, std::size_t flat) {
    double k2 = 0.0;
    for (int a = 0; a < 2; ++a) {
      const double ka = shape.mode_of(idx[a]);
      k2 += ka * ka;
    }
    const double mult = 1.0 / (1.0 + 4.0 * kPi * kPi * sigma * k2 * dt);
    CHECK(std::abs(after[flat] - before[flat] * mult) < 1e-12);
  });
}

TEST_CASE("even initial data stays even") {
  const GridShape shape{2, 32};
  std::vector<double> values(shape.size());
  for_each_index(2, 32, [&](std::span<const int> idx, std::size_t flat) {
    const double x = wrap_half(idx[0] / 32.0), y = wrap_half(idx[1] / 32.0);
    values[flat] = 1.0 + 0.4 * std::cos(kTwoPi * x) + 0.2 * std::cos(2.0 * kTwoPi * x) *
                                                          std::cos(kTwoPi * y);
  });
  auto rho = DensityField::from_values(shape, values);
  const auto spec = pks(0.4, 10);
  const pde::SpectralKernel kernel(spec, shape);
  for (int s = 0; s < 20; ++s) pde::step_pde(rho, kernel, 0.3, 1e-3);
  for (int i = 0; i < 32; ++i) {
    const int mi = (32 - i) % 32;
    for (int j = 0; j < 32; ++j)
      CHECK(std::abs(rho.values()[i * 32 + j] - rho.values()[mi * 32 + j]) < 1e-12);
  }
}

TEST_CASE("free energy: uniform density closed forms") {
  const auto uniform = DensityField::uniform(2, 16);
  SUBCASE("zero-mean potential gives zero") {
    kernels::PotentialSpec spec;
    spec.dimension = 2;
    spec.riesz_exponent = 0.5;
    spec.riesz_coefficient = 1.0;
    spec.spectral_band = 7;
    spec.force_regularization = 1e-3;
    const pde::SpectralKernel kernel(spec, uniform.shape());
    CHECK(std::abs(pde::free_energy(uniform, kernel, 0.7)) < 1e-13);
  }
  SUBCASE("screened-log potential gives -pi lambda, cross-checked by quadrature") {
    const double lambda = 0.8;
    const auto spec = pks(lambda, 7);
    const pde::SpectralKernel kernel(spec, uniform.shape());
    const double fe = pde::free_energy(uniform, kernel, 0.7);
    CHECK(fe == doctest::Approx(-kPi * lambda).epsilon(1e-12));
    // quadrature oracle: (1/2) h^4 sum_{g,g'} V(x_g - x_g')
    const double h = 1.0 / 16;
    double direct = 0.0;
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) {
        const double dx[2] = {i * h, j * h};
        direct += kernels::eval_potential(spec, std::span<const double>(dx, 2));
      }
    direct *= 0.5 * h * h;  // one displacement loop times h^2, times h^2 over the other
    CHECK(fe == doctest::Approx(direct).epsilon(1e-10));
  }
}

TEST_CASE("free energy decreases along subcritical dynamics") {
  auto rho = DensityField::wrapped_gaussian(2, 64, 0.12);
  const auto spec = pks(0.5, 21);  // lambda = sigma, well inside lambda < 4 sigma
  const double sigma = 0.5;
  const pde::SpectralKernel kernel(spec, rho.shape());
  double prev = pde::free_energy(rho, kernel, sigma);
  for (int s = 0; s < 100; ++s) {
    pde::step_pde(rho, kernel, sigma, 1e-3);
    const double cur = pde::free_energy(rho, kernel, sigma);
    CHECK(cur <= prev + 1e-8 * std::abs(prev) + 1e-12);
    prev = cur;
  }
}

TEST_CASE("concentration monitor: diffusion never flags, synthetic collapse flags") {
  std::vector<DensityField> diffusing;
  for (double s = 0.05; s <= 0.2; s += 0.05) {
    auto f = DensityField::wrapped_gaussian(2, 64, s);
    f.set_time(s);
    diffusing.push_back(std::move(f));
  }
  const auto calm = pde::blow_up_monitor(diffusing, 0.0, 0.25);
  CHECK_FALSE(calm.flagged);
  CHECK_FALSE(calm.analytic_supercritical);

  std::vector<DensityField> collapsing;
  double t = 0.0;
  for (double s : {0.2, 0.1, 0.05, 0.025, 0.012, 0.008, 0.006}) {
    auto f = DensityField::wrapped_gaussian(2, 64, s);
    f.set_time(t);
    t += 0.01;
    collapsing.push_back(std::move(f));
  }
  const auto alarm = pde::blow_up_monitor(collapsing, 1.5, 0.25);
  CHECK(alarm.flagged);
  CHECK(alarm.analytic_supercritical);
}

TEST_CASE("run_pde saves the schedule and reports clipped mass") {
  auto rho = DensityField::wrapped_gaussian(2, 32, 0.15);
  const auto spec = pks(0.3, 10);
  const std::vector<double> saves{0.01, 0.02};
  const auto result = pde::run_pde(rho, spec, 0.5, 1e-3, saves);
  CHECK(result.completed);
  REQUIRE(result.saved.size() == 2);
  CHECK(result.saved[0].time() == doctest::Approx(0.01));
  CHECK(result.saved[1].time() == doctest::Approx(0.02));
  CHECK(result.free_energies.size() == 2);
  for (double c : result.clipped_mass) CHECK(c < 1e-8);
}
