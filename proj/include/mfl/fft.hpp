// fft.hpp -- self-contained complex FFT (iterative radix-2, Bluestein for
// arbitrary lengths) and d-dimensional transforms on isotropic grids.
//
// Conventions, used throughout the project:
//   forward:  F(k) = sum_j f(j) e^{-2 pi i j k / n}        (sign = -1)
//   backward: f(j) = sum_k F(k) e^{+2 pi i j k / n}        (sign = +1, unnormalized)
// Continuum Fourier coefficients on the unit torus are h^d * forward-DFT of the
// grid samples; synthesis at grid points is the unnormalized backward DFT.
#pragma once

#include <complex>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace mfl {

using Complex = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Unit roots e^{-2 pi i j / n}, j < n/2, computed once per length.
inline const std::vector<Complex>& twiddle_table(std::size_t n) {
  static thread_local std::unordered_map<std::size_t, std::vector<Complex>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<Complex> t(n / 2);
  for (std::size_t j = 0; j < n / 2; ++j) {
    const double angle = -kTwoPi * static_cast<double>(j) / static_cast<double>(n);
    t[j] = Complex(std::cos(angle), std::sin(angle));
  }
  return cache.emplace(n, std::move(t)).first->second;
}

inline void fft_pow2(Complex* a, std::size_t n, int sign) {
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& tw = twiddle_table(n);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        Complex w = tw[j * stride];
        if (sign > 0) w = std::conj(w);
        const Complex u = a[i + j];
        const Complex v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
      }
    }
  }
}

struct BluesteinPlan {
  std::size_t n = 0, m = 0;
  std::vector<Complex> chirp;      // e^{-i pi j^2 / n}, forward sign
  std::vector<Complex> kernel_ft;  // FFT of the padded conjugate chirp
};

inline const BluesteinPlan& bluestein_plan(std::size_t n) {
  static thread_local std::unordered_map<std::size_t, BluesteinPlan> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  BluesteinPlan p;
  p.n = n;
  p.m = next_pow2(2 * n - 1);
  p.chirp.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the angle argument small and exact
    const std::size_t q = (j * j) % (2 * n);
    const double angle = -kPi * static_cast<double>(q) / static_cast<double>(n);
    p.chirp[j] = Complex(std::cos(angle), std::sin(angle));
  }
  std::vector<Complex> kernel(p.m, Complex(0.0, 0.0));
  kernel[0] = std::conj(p.chirp[0]);
  for (std::size_t j = 1; j < n; ++j) {
    kernel[j] = std::conj(p.chirp[j]);
    kernel[p.m - j] = std::conj(p.chirp[j]);
  }
  fft_pow2(kernel.data(), p.m, -1);
  p.kernel_ft = std::move(kernel);
  return cache.emplace(n, std::move(p)).first->second;
}

inline void fft_bluestein(Complex* a, std::size_t n, int sign) {
  const auto& p = bluestein_plan(n);
  std::vector<Complex> buf(p.m, Complex(0.0, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    const Complex c = (sign < 0) ? p.chirp[j] : std::conj(p.chirp[j]);
    buf[j] = a[j] * c;
  }
  fft_pow2(buf.data(), p.m, -1);
  if (sign < 0) {
    for (std::size_t j = 0; j < p.m; ++j) buf[j] *= p.kernel_ft[j];
  } else {
    for (std::size_t j = 0; j < p.m; ++j) buf[j] *= std::conj(p.kernel_ft[j]);
  }
  fft_pow2(buf.data(), p.m, +1);
  const double inv_m = 1.0 / static_cast<double>(p.m);
  for (std::size_t j = 0; j < n; ++j) {
    const Complex c = (sign < 0) ? p.chirp[j] : std::conj(p.chirp[j]);
    a[j] = buf[j] * inv_m * c;
  }
}

}  // namespace detail

// In-place 1-d transform, any length. sign = -1 forward, +1 backward (unnormalized).
inline void fft(Complex* a, std::size_t n, int sign) {
  if (n <= 1) return;
  if (detail::is_pow2(n)) {
    detail::fft_pow2(a, n, sign);
  } else {
    detail::fft_bluestein(a, n, sign);
  }
}

// In-place d-dimensional transform on an isotropic n^dim grid, row-major data.
inline void fft_nd(std::vector<Complex>& a, const GridShape& shape, int sign) {
  shape.validate();
  require(a.size() == shape.size(), "fft_nd: data size does not match grid");
  const std::size_t n = static_cast<std::size_t>(shape.n);
  std::vector<Complex> line(n);
  for (int axis = 0; axis < shape.dim; ++axis) {
    std::size_t stride = 1;
    for (int b = shape.dim - 1; b > axis; --b) stride *= n;
    const std::size_t block = stride * n;
    for (std::size_t base = 0; base < a.size(); base += block) {
      for (std::size_t off = 0; off < stride; ++off) {
        Complex* start = a.data() + base + off;
        for (std::size_t j = 0; j < n; ++j) line[j] = start[j * stride];
        fft(line.data(), n, sign);
        for (std::size_t j = 0; j < n; ++j) start[j * stride] = line[j];
      }
    }
  }
}

// Continuum-normalized spectral helpers for real grid functions.
// modes(k) = h^d * sum_j f(x_j) e^{-2 pi i k . x_j}   ~   \int f e^{-2 pi i k x}
inline std::vector<Complex> grid_to_modes(std::span<const double> values, const GridShape& shape) {
  std::vector<Complex> a(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) a[i] = Complex(values[i], 0.0);
  fft_nd(a, shape, -1);
  const double hv = shape.cell_volume();
  for (auto& z : a) z *= hv;
  return a;
}

inline std::vector<double> modes_to_grid(std::vector<Complex> modes, const GridShape& shape) {
  fft_nd(modes, shape, +1);
  std::vector<double> out(modes.size());
  for (std::size_t i = 0; i < modes.size(); ++i) out[i] = modes[i].real();
  return out;
}

}  // namespace mfl
