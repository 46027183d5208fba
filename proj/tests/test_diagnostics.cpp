#include <doctest.h>

#include <cmath>

#include "mfl/diagnostics.hpp"
#include "mfl/rng.hpp"

using namespace mfl;
namespace diag = diagnostics;

namespace {

// synthetic ensemble: one snapshot per member at t = 0, positions supplied
particles::EnsembleRun synthetic_run(int dim, std::vector<std::vector<double>> member_positions) {
  particles::EnsembleRun run;
  run.params.spec.dimension = dim;
  run.params.spec.spectral_band = 4;
  run.params.spec.force_regularization = 1e-3;
  run.params.sigma = 0.0;
  run.params.dt = 1.0;
  run.params.save_times = {0.0};
  run.params.N = member_positions.front().size() / dim;
  run.params.M = int(member_positions.size());
  for (auto& pos : member_positions) {
    particles::MemberTrajectory member;
    member.snapshots.emplace_back(dim, std::move(pos), 0.0, particles::RngLineage{});
    run.members.push_back(std::move(member));
  }
  return run;
}

}  // namespace

TEST_CASE("kde of a point mass is the wrapped gaussian bump") {
  const int n = 64;
  const double bw = 0.05;
  std::vector<double> points(2 * 500, 0.5);  // all samples at (0.5, 0.5)
  const auto kde = diag::kde_from_points(points, GridShape{2, n}, bw);
  const auto bump = DensityField::wrapped_gaussian(2, n, bw, 0.5);
  CHECK(std::abs(kde.field.mass() - 1.0) < 1e-12);
  CHECK(diag::l1_distance(kde.field, bump) < 1e-10);
}

TEST_CASE("kde of uniform samples converges to uniform") {
  const std::size_t count = 1000000;
  SequentialRng rng(8, 0, RngDomain::kGeneric);
  std::vector<double> points(2 * count);
  for (double& v : points) v = rng.uniform();
  const auto kde = diag::kde_from_points(points, GridShape{2, 64}, 0.05);
  CHECK(diag::l1_distance(kde.field, DensityField::uniform(2, 64)) < 0.02);
}

TEST_CASE("kde bandwidth must exceed the grid spacing") {
  std::vector<double> points(20, 0.3);
  CHECK_THROWS_AS(diag::kde_from_points(points, GridShape{1, 64}, 0.01), Error);
}

TEST_CASE("pair marginal of independent uniforms is the product density") {
  SequentialRng rng(3, 0, RngDomain::kGeneric);
  std::vector<std::vector<double>> members;
  for (int m = 0; m < 20; ++m) {
    std::vector<double> pos(100);
    for (double& v : pos) v = rng.uniform();
    members.push_back(std::move(pos));
  }
  const auto run = synthetic_run(1, std::move(members));
  const auto pair = diag::kde_marginal(run, 0.0, 2, 0.06, 32);
  CHECK_FALSE(pair.low_confidence);
  CHECK(std::abs(pair.field.mass() - 1.0) < 1e-12);
  CHECK(pair.field.min_value() >= 0.0);
  const auto product = DensityField::uniform(2, 32);
  CHECK(diag::l1_distance(pair.field, product) < 0.05);

  SUBCASE("integrating the pair marginal recovers the single-particle marginal") {
    const auto single = diag::kde_marginal(run, 0.0, 1, 0.06, 32);
    const auto integrated = diag::marginalize_second(pair.field, 1);
    CHECK(diag::l1_distance(integrated, single.field) < 0.01);
  }
}

TEST_CASE("low-confidence flag on scarce samples") {
  std::vector<std::vector<double>> members{{0.1, 0.4, 0.9}};  // 3 samples
  const auto run = synthetic_run(1, std::move(members));
  const auto kde = diag::kde_marginal(run, 0.0, 1, 0.1, 16);
  CHECK(kde.low_confidence);
}

TEST_CASE("pair marginal in two dimensions lives on a 4-d grid") {
  SequentialRng rng(41, 0, RngDomain::kGeneric);
  std::vector<std::vector<double>> members;
  for (int m = 0; m < 10; ++m) {
    std::vector<double> pos(2 * 40);
    for (double& v : pos) v = rng.uniform();
    members.push_back(std::move(pos));
  }
  const auto run = synthetic_run(2, std::move(members));
  const auto pair = diag::kde_marginal(run, 0.0, 2, 0.1, 16);
  CHECK(pair.field.dim() == 4);
  CHECK(std::abs(pair.field.mass() - 1.0) < 1e-12);
  CHECK(pair.field.min_value() >= 0.0);
}

TEST_CASE("kl and l1 basics") {
  const auto p = DensityField::wrapped_gaussian(1, 256, 0.10);
  const auto q = DensityField::wrapped_gaussian(1, 256, 0.15);
  SUBCASE("identical densities give zero") {
    CHECK(diag::kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(diag::l1_distance(p, p) == 0.0);
  }
  SUBCASE("kl matches an independent quadrature") {
    double ref = 0.0;
    const double floor = 1e-12;
    for (std::size_t g = 0; g < p.values().size(); ++g) {
      if (p.values()[g] > 0.0)
        ref += p.values()[g] * std::log(p.values()[g] / std::max(q.values()[g], floor));
    }
    ref /= 256.0;
    CHECK(diag::kl_divergence(p, q) == doctest::Approx(ref).epsilon(1e-8));
    CHECK(diag::kl_divergence(p, q) >= 0.0);
  }
  SUBCASE("support violation with zero floor reports infinity") {
    auto zero_q = DensityField::from_values_unchecked(GridShape{1, 4}, {1.0, 0.0, 0.0, 0.0});
    auto wide_p = DensityField::from_values_unchecked(GridShape{1, 4}, {0.5, 0.5, 0.5, 0.5});
    CHECK(std::isinf(diag::kl_divergence(wide_p, zero_q, 0.0)));
  }
}

TEST_CASE("csiszar-kullback-pinsker on random density pairs") {
  SequentialRng rng(77, 0, RngDomain::kGeneric);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> pv(64), qv(64);
    for (int g = 0; g < 64; ++g) {
      pv[g] = rng.uniform() + 0.01;
      qv[g] = rng.uniform() + 0.01;
    }
    const auto p = DensityField::from_values(GridShape{1, 64}, pv);
    const auto q = DensityField::from_values(GridShape{1, 64}, qv);
    const double kl = diag::kl_divergence(p, q);
    const double l1 = diag::l1_distance(p, q);
    CHECK(l1 <= std::sqrt(2.0 * kl) + 1e-12);
    CHECK(kl >= l1 * l1 / 2.0 - 1e-12);
  }
}

TEST_CASE("rate fitting") {
  SUBCASE("exact power law") {
    std::vector<std::pair<double, double>> pts;
    for (double n : {64.0, 128.0, 256.0, 512.0}) pts.push_back({n, std::pow(n, -0.5)});
    const auto fit = diag::fit_rate(pts);
    CHECK(std::abs(fit.theta - 0.5) < 1e-12);
    CHECK(std::abs(fit.r2 - 1.0) < 1e-12);
    CHECK(fit.C == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("constant error gives theta = 0") {
    std::vector<std::pair<double, double>> pts{{64, 0.3}, {128, 0.3}, {256, 0.3}};
    const auto fit = diag::fit_rate(pts);
    CHECK(std::abs(fit.theta) < 1e-12);
  }
  SUBCASE("noisy synthetic rate recovered within the band") {
    SequentialRng rng(15, 0, RngDomain::kGeneric);
    int in_band = 0;
    const int trials = 1000;
    for (int t = 0; t < trials; ++t) {
      std::vector<std::pair<double, double>> pts;
      for (double n : {64.0, 128.0, 256.0, 512.0, 1024.0}) {
        const double u = 0.05 * (2.0 * rng.uniform() - 1.0);
        pts.push_back({n, 3.0 * std::pow(n, -0.3) * (1.0 + u)});
      }
      const auto fit = diag::fit_rate(pts);
      if (fit.theta >= 0.25 && fit.theta <= 0.35) ++in_band;
    }
    CHECK(in_band >= int(0.99 * trials));
  }
  SUBCASE("degenerate inputs are rejected") {
    std::vector<std::pair<double, double>> two{{64, 0.1}, {128, 0.2}};
    CHECK_THROWS_AS(diag::fit_rate(two), Error);
    std::vector<std::pair<double, double>> same_n{{64, 0.1}, {64, 0.2}, {64, 0.3}};
    CHECK_THROWS_AS(diag::fit_rate(same_n), Error);
    std::vector<std::pair<double, double>> neg{{64, 0.1}, {128, -0.2}, {256, 0.3}};
    CHECK_THROWS_AS(diag::fit_rate(neg), Error);
  }
}

TEST_CASE("default bandwidth shrinks with the sample count") {
  CHECK(diag::default_bandwidth(4096, 2) > diag::default_bandwidth(65536, 2));
  CHECK(diag::default_bandwidth(65536, 2) == doctest::Approx(0.9 * std::pow(65536.0, -1.0 / 6.0)));
}
