#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace epimvs {

using Rng = std::mt19937_64;

inline void FillUniform(std::span<double> out, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : out) v = dist(rng);
}

inline void FillNormal(std::span<double> out, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : out) v = dist(rng);
}

}  // namespace epimvs
