#include <doctest.h>

#include <complex>
#include <vector>

#include "mfl/fft.hpp"
#include "mfl/rng.hpp"
#include "tests_common.hpp"

using namespace mfl;

namespace {

std::vector<Complex> random_signal(std::size_t n, std::uint64_t seed) {
  SequentialRng rng(seed, 0, RngDomain::kGeneric);
  std::vector<Complex> a(n);
  for (auto& z : a) z = Complex(rng.uniform() - 0.5, rng.uniform() - 0.5);
  return a;
}

std::vector<std::complex<double>> naive_dft(std::span<const Complex> in, int sign) {
  const std::size_t n = in.size();
  std::vector<Complex> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc(0.0, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double angle =
          sign * kTwoPi * static_cast<double>(j * k % n) / static_cast<double>(n);
      acc += in[j] * Complex(std::cos(angle), std::sin(angle));
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace

TEST_CASE("1-d fft matches naive dft (pow2 and mixed lengths)") {
  for (std::size_t n : {2u, 4u, 6u, 8u, 16u, 48u, 81u, 128u}) {
    auto a = random_signal(n, 100 + n);
    auto ref = naive_dft(a, -1);
    auto b = a;
    fft(b.data(), n, -1);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(b[i] - ref[i]) < 1e-10 * (1.0 + std::abs(ref[i])));

    auto ref_b = naive_dft(a, +1);
    auto c = a;
    fft(c.data(), n, +1);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(c[i] - ref_b[i]) < 1e-10 * (1.0 + std::abs(ref_b[i])));
  }
}

TEST_CASE("fft round trip and Parseval") {
  for (std::size_t n : {16u, 48u, 128u}) {
    auto a = random_signal(n, 7 * n);
    auto b = a;
    fft(b.data(), n, -1);
    double sum_time = 0, sum_freq = 0;
    for (auto& z : a) sum_time += std::norm(z);
    for (auto& z : b) sum_freq += std::norm(z);
    CHECK(sum_freq == doctest::Approx(n * sum_time).epsilon(1e-12));

    fft(b.data(), n, +1);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(b[i] / double(n) - a[i]) < 1e-12);
  }
}

TEST_CASE("multi-dimensional fft matches per-axis naive dft") {
  for (int dim : {1, 2, 3}) {
    GridShape shape{dim, 6};
    auto a = random_signal(shape.size(), 31 * dim);
    auto ref = a;
    // apply naive dft along each axis
    const std::size_t n = shape.n;
    for (int axis = 0; axis < dim; ++axis) {
      std::size_t stride = 1;
      for (int b = dim - 1; b > axis; --b) stride *= n;
      const std::size_t block = stride * n;
      for (std::size_t base = 0; base < ref.size(); base += block) {
        for (std::size_t off = 0; off < stride; ++off) {
          std::vector<Complex> line(n);
          for (std::size_t j = 0; j < n; ++j) line[j] = ref[base + off + j * stride];
          auto out = naive_dft(line, -1);
          for (std::size_t j = 0; j < n; ++j) ref[base + off + j * stride] = out[j];
        }
      }
    }
    fft_nd(a, shape, -1);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::abs(a[i] - ref[i]) < 1e-10 * (1.0 + std::abs(ref[i])));
  }
}

TEST_CASE("grid_to_modes normalization: single cosine mode") {
  GridShape shape{2, 16};
  std::vector<double> f(shape.size());
  for_each_index(shape.dim, shape.n, [&](std::span<const int> idx, std::size_t flat) {
    f[flat] = 1.0 + 0.5 * std::cos(kTwoPi * idx[0] / double(shape.n));
  });
  auto modes = grid_to_modes(f, shape);
  // mode (0,0) = 1, modes (+-1,0) = 0.25
  CHECK(std::abs(modes[shape.flat_index(std::array<int, 2>{0, 0})] - 1.0) < 1e-12);
  CHECK(std::abs(modes[shape.flat_index(std::array<int, 2>{1, 0})] - 0.25) < 1e-12);
  CHECK(std::abs(modes[shape.flat_index(std::array<int, 2>{15, 0})] - 0.25) < 1e-12);

  auto back = modes_to_grid(modes, shape);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(back[i] == doctest::Approx(f[i]).epsilon(1e-13));
}
