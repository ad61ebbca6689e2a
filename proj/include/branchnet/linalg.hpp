#pragma once

#include "branchnet/common.hpp"

#include <cstdint>
#include <vector>

namespace branchnet {

// Plain product with the usual dimension contract.
Mat matmul(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b);

struct LeastSquaresFit {
  Mat coefficients;         // targets.rows() x basis.rows()
  Real residual_frobenius;  // |targets - coefficients*basis|_F at the optimum
};

// Minimizes |targets - coefficients*basis|_F over the coefficients, solved by
// column-pivoted Householder QR (never the normal equations). Basis rows that
// are linearly dependent within tolerance 1e-10 drop out of the fit. An empty
// basis yields zero coefficients and residual |targets|_F.
LeastSquaresFit least_squares_fit(const Eigen::Ref<const Mat>& targets,
                                  const Eigen::Ref<const Mat>& basis);

struct SymEig {
  Vec eigenvalues;   // ascending
  Mat eigenvectors;  // column k pairs with eigenvalues[k]; orthonormal
};

// Symmetric eigendecomposition. Input must be symmetric within 1e-9.
SymEig sym_eig(const Eigen::Ref<const Mat>& s);

struct KmeansResult {
  std::vector<int> assignment;
  // Within-cluster sum of squares after each assignment step.
  std::vector<Real> objective_history;
};

// Lloyd's algorithm from k-means++ seeding, run to assignment fixpoint or 100
// iterations. Deterministic for a given seed; empty clusters are reseeded to
// the point farthest from its current center.
KmeansResult kmeans_run(const Eigen::Ref<const Mat>& points, int k,
                        std::uint64_t seed);

std::vector<int> kmeans(const Eigen::Ref<const Mat>& points, int k,
                        std::uint64_t seed);

}  // namespace branchnet
