#include "branchnet/linalg.hpp"

#include <algorithm>
#include <limits>

namespace branchnet {

Mat matmul(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b) {
  require(a.cols() == b.rows(),
          "matmul: inner dimensions differ (" + std::to_string(a.cols()) +
              " vs " + std::to_string(b.rows()) + ")");
  return a * b;
}

LeastSquaresFit least_squares_fit(const Eigen::Ref<const Mat>& targets,
                                  const Eigen::Ref<const Mat>& basis) {
  const auto m = targets.rows();
  if (basis.rows() == 0) {
    return {Mat::Zero(m, 0), targets.norm()};
  }
  require(basis.cols() == targets.cols(),
          "least_squares_fit: basis and targets column counts differ");

  // min_C |T - C B|_F  ==  min_X |B^T X - T^T|_F with C = X^T.
  Eigen::ColPivHouseholderQR<Mat> qr;
  qr.setThreshold(1e-10);
  qr.compute(basis.transpose());
  Mat coefficients = qr.solve(targets.transpose()).transpose();
  const Real residual = (targets - coefficients * basis).norm();
  return {std::move(coefficients), residual};
}

SymEig sym_eig(const Eigen::Ref<const Mat>& s) {
  require(s.rows() == s.cols(), "sym_eig: matrix is not square");
  if (s.rows() > 0) {
    const Real asym = (s - s.transpose()).cwiseAbs().maxCoeff();
    require(asym <= 1e-9, "sym_eig: matrix is not symmetric (max |s - s^T| = " +
                              std::to_string(asym) + ")");
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  require(es.info() == Eigen::Success, "sym_eig: eigensolver failed");
  return {es.eigenvalues(), es.eigenvectors()};
}

namespace {

Real sq_dist(const Eigen::Ref<const Mat>& points, int i, const Vec& center) {
  return (points.row(i).transpose() - center).squaredNorm();
}

}  // namespace

KmeansResult kmeans_run(const Eigen::Ref<const Mat>& points, int k,
                        std::uint64_t seed) {
  const int n = static_cast<int>(points.rows());
  require(k >= 1, "kmeans: k must be at least 1");
  require(k <= n, "kmeans: k exceeds the number of points (" +
                      std::to_string(k) + " > " + std::to_string(n) + ")");

  KmeansResult res;
  res.assignment.assign(n, 0);
  if (k == n) {
    for (int i = 0; i < n; ++i) res.assignment[i] = i;
    res.objective_history.push_back(0.0);
    return res;
  }

  Rng rng(seed);
  std::vector<Vec> centers;
  centers.reserve(k);

  // k-means++ seeding.
  int first = std::min(n - 1, static_cast<int>(uniform_unit(rng) * n));
  centers.push_back(points.row(first).transpose());
  std::vector<Real> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    Real total = 0.0;
    for (int i = 0; i < n; ++i) {
      Real best = std::numeric_limits<Real>::max();
      for (const auto& c : centers) best = std::min(best, sq_dist(points, i, c));
      d2[i] = best;
      total += best;
    }
    int pick = -1;
    if (total <= 0.0) {
      // Every point coincides with an existing center; any choice works and
      // the empty-cluster reseed keeps clusters non-empty later.
      pick = 0;
    } else {
      const Real r = uniform_unit(rng) * total;
      Real acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    }
    centers.push_back(points.row(pick).transpose());
  }

  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < 100; ++iter) {
    // Assignment step; ties break toward the lowest center index.
    std::vector<int> next(n);
    Real objective = 0.0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      Real best_d = sq_dist(points, i, centers[0]);
      for (int c = 1; c < k; ++c) {
        const Real d = sq_dist(points, i, centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      next[i] = best;
      objective += best_d;
    }
    res.objective_history.push_back(objective);
    if (next == assign) break;
    assign = next;

    // Update step.
    Mat sums = Mat::Zero(k, points.cols());
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      counts[assign[i]]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers[c] = (sums.row(c) / counts[c]).transpose();
      } else {
        // Reseed an empty cluster to the point farthest from its own center.
        int far = 0;
        Real far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const Real d = sq_dist(points, i, centers[assign[i]]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centers[c] = points.row(far).transpose();
      }
    }
  }

  res.assignment = assign;
  return res;
}

std::vector<int> kmeans(const Eigen::Ref<const Mat>& points, int k,
                        std::uint64_t seed) {
  return kmeans_run(points, k, seed).assignment;
}

}  // namespace branchnet
