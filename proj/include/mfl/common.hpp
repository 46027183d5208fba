// common.hpp -- shared basics: torus geometry, grid shapes, error type.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfl {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;
inline constexpr int kMaxDim = 4;  // 3 spatial + room for 2-particle marginals in d=2

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Canonical wrap onto the unit torus [0,1).
inline double wrap01(double x) {
  double y = x - std::floor(x);
  if (y >= 1.0) y = 0.0;  // guard against floor rounding at negative epsilons
  return y;
}

// Minimum-image displacement, wrapped to [-1/2, 1/2).
inline double wrap_half(double x) {
  double y = x - std::round(x);
  if (y < -0.5) y = 0.5;
  if (y >= 0.5) y = -0.5;
  return y;
}

using Vec = std::array<double, kMaxDim>;

inline double norm2(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

// Isotropic periodic grid: `n` points per axis in `dim` dimensions.
struct GridShape {
  int dim = 0;
  int n = 0;

  std::size_t size() const {
    std::size_t s = 1;
    for (int a = 0; a < dim; ++a) s *= static_cast<std::size_t>(n);
    return s;
  }
  double h() const { return 1.0 / n; }
  double cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < dim; ++a) v *= h();
    return v;
  }
  bool operator==(const GridShape&) const = default;

  void validate() const {
    require(dim >= 1 && dim <= kMaxDim, "grid dimension must be in [1," + std::to_string(kMaxDim) + "]");
    require(n >= 2, "grid size must be >= 2");
  }

  // Signed Fourier mode for FFT bin m along one axis: k in [-n/2, n/2).
  int mode_of(int m) const { return (m <= (n - 1) / 2) ? m : m - n; }
  int bin_of_mode(int k) const { return (k >= 0) ? k : k + n; }

  std::size_t flat_index(std::span<const int> idx) const {
    std::size_t f = 0;
    for (int a = 0; a < dim; ++a) f = f * n + static_cast<std::size_t>(idx[a]);
    return f;
  }
  void unflatten(std::size_t f, std::span<int> idx) const {
    for (int a = dim - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(f % n);
      f /= n;
    }
  }
};

// Row-major iteration over all multi-indices of a dim-dimensional cube [0,n)^dim.
template <typename F>
void for_each_index(int dim, int n, F&& body) {
  std::array<int, kMaxDim> idx{};
  std::size_t total = 1;
  for (int a = 0; a < dim; ++a) total *= static_cast<std::size_t>(n);
  for (std::size_t f = 0; f < total; ++f) {
    std::size_t r = f;
    for (int a = dim - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(r % n);
      r /= n;
    }
    body(std::span<const int>(idx.data(), dim), f);
  }
}

}  // namespace mfl
