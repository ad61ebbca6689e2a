#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace branchnet {

using Real = double;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Violated precondition or broken structural invariant.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed, truncated, or inconsistent on-disk artifact.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

using Rng = std::mt19937_64;

inline constexpr Real kPi = 3.14159265358979323846;

// Uniform in [0,1) from the top 53 bits of the engine. Hand-rolled so that
// seeded streams do not depend on the standard library's distribution
// implementation.
inline Real uniform_unit(Rng& rng) {
  return static_cast<Real>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller (cosine branch only).
inline Real normal_unit(Rng& rng) {
  const Real u1 = 1.0 - uniform_unit(rng);  // (0, 1]
  const Real u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

inline Mat gaussian_matrix(int rows, int cols, Rng& rng, Real stddev = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = stddev * normal_unit(rng);
  return m;
}

inline Vec gaussian_vector(int n, Rng& rng, Real stddev = 1.0) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = stddev * normal_unit(rng);
  return v;
}

}  // namespace branchnet
