// rng.hpp -- counter-based random streams (Philox4x32-10).
//
// Every random number is a pure function of
//   (master_seed, member_index, domain, step, particle, draw),
// so trajectories are bitwise reproducible regardless of execution order
// or degree of parallelism.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "common.hpp"

namespace mfl {

// Philox4x32-10 block cipher (Salmon et al., SC'11).
struct Philox4x32 {
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }
};

// Stream domains keep independent uses of the same lineage from colliding.
enum class RngDomain : std::uint32_t {
  kDynamics = 0,   // Brownian increments in the SDE stepper
  kInitial = 1,    // initial-condition sampling
  kSampling = 2,   // i.i.d. configuration draws for Monte-Carlo functionals
  kGeneric = 3,
};

// One logical stream: a (master_seed, member, domain) triple. Draws are
// addressed by (step, particle, draw) counters.
class CounterRng {
 public:
  CounterRng(std::uint64_t master_seed, std::uint32_t member, RngDomain domain)
      : key_{static_cast<std::uint32_t>(master_seed),
             static_cast<std::uint32_t>(master_seed >> 32)},
        high_word_((member << 4) | static_cast<std::uint32_t>(domain)) {}

  std::array<std::uint32_t, 4> raw(std::uint32_t step, std::uint32_t particle,
                                   std::uint32_t draw) const {
    return Philox4x32::block({draw, particle, step, high_word_}, key_);
  }

  // Uniform in [0,1), 53-bit mantissa.
  double uniform(std::uint32_t step, std::uint32_t particle, std::uint32_t draw) const {
    const auto r = raw(step, particle, draw);
    return to_unit(r[0], r[1]);
  }

  // Two standard Gaussians from one block (Box-Muller).
  void gaussian_pair(std::uint32_t step, std::uint32_t particle, std::uint32_t draw,
                     double& g0, double& g1) const {
    const auto r = raw(step, particle, draw);
    const double u1 = to_unit_open(r[0], r[1]);  // in (0,1], log is finite
    const double u2 = to_unit(r[2], r[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    g0 = radius * std::cos(kTwoPi * u2);
    g1 = radius * std::sin(kTwoPi * u2);
  }

 private:
  static double to_unit(std::uint32_t a, std::uint32_t b) {
    const std::uint64_t v = (static_cast<std::uint64_t>(a) << 32) | b;
    return static_cast<double>(v >> 11) * 0x1.0p-53;
  }
  static double to_unit_open(std::uint32_t a, std::uint32_t b) {
    const std::uint64_t v = (static_cast<std::uint64_t>(a) << 32) | b;
    return static_cast<double>((v >> 11) + 1) * 0x1.0p-53;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint32_t high_word_;
};

// Convenience sequential view over a CounterRng: hands out uniforms or
// Gaussians one at a time by advancing the (particle, draw) counters.
class SequentialRng {
 public:
  SequentialRng(std::uint64_t master_seed, std::uint32_t member, RngDomain domain,
                std::uint32_t step = 0)
      : rng_(master_seed, member, domain), step_(step) {}

  double uniform() { return rng_.uniform(step_, counter_++, 0); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double g0, g1;
    rng_.gaussian_pair(step_, counter_++, 0, g0, g1);
    spare_ = g1;
    have_spare_ = true;
    return g0;
  }

 private:
  CounterRng rng_;
  std::uint32_t step_;
  std::uint32_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mfl
