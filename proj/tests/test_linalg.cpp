#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "branchnet/linalg.hpp"

#include <algorithm>
#include <vector>

using namespace branchnet;

namespace {

// Independent triple-loop product oracle.
Mat matmul_oracle(const Mat& a, const Mat& b) {
  Mat out = Mat::Zero(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j)
      for (int k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

Real wcss(const Mat& points, const std::vector<int>& assign, int k) {
  Real total = 0.0;
  for (int c = 0; c < k; ++c) {
    Vec mean = Vec::Zero(points.cols());
    int count = 0;
    for (int i = 0; i < points.rows(); ++i)
      if (assign[i] == c) {
        mean += points.row(i).transpose();
        ++count;
      }
    if (count == 0) continue;
    mean /= count;
    for (int i = 0; i < points.rows(); ++i)
      if (assign[i] == c)
        total += (points.row(i).transpose() - mean).squaredNorm();
  }
  return total;
}

// Best 2-cluster WCSS by enumerating every bipartition.
Real best_two_partition(const Mat& points) {
  const int n = static_cast<int>(points.rows());
  Real best = std::numeric_limits<Real>::max();
  for (unsigned m = 1; m + 1 < (1u << n); ++m) {
    std::vector<int> assign(n);
    for (int i = 0; i < n; ++i) assign[i] = (m >> i) & 1u;
    best = std::min(best, wcss(points, assign, 2));
  }
  return best;
}

}  // namespace

TEST_CASE("matmul identity and annihilation") {
  Mat i2 = Mat::Identity(2, 2);
  Mat m(2, 2);
  m << 1, 2, 3, 4;
  CHECK((matmul(i2, m) - m).cwiseAbs().maxCoeff() == 0.0);

  Mat a(2, 2), b(2, 1);
  a << 1, 0, 0, 0;
  b << 0, 5;
  Mat prod = matmul(a, b);
  CHECK(prod(0, 0) == 0.0);
  CHECK(prod(1, 0) == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(7);
  Mat a = gaussian_matrix(3, 4, rng);
  Mat b = gaussian_matrix(4, 2, rng);
  CHECK((matmul(a, b) - matmul_oracle(a, b)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("matmul rejects mismatched shapes") {
  Mat a = Mat::Zero(2, 3), b = Mat::Zero(2, 2);
  CHECK_THROWS_AS(matmul(a, b), ContractViolation);
}

TEST_CASE("matmul associativity property") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Mat a = gaussian_matrix(4, 3, rng);
    Mat b = gaussian_matrix(3, 5, rng);
    Mat c = gaussian_matrix(5, 2, rng);
    Mat lhs = matmul(matmul(a, b), c);
    Mat rhs = matmul(a, matmul(b, c));
    CHECK((lhs - rhs).norm() <= 1e-9 * std::max(1.0, rhs.norm()));
  }
}

TEST_CASE("least squares: exact square fit recovers the identity") {
  Rng rng(3);
  Mat basis = gaussian_matrix(4, 4, rng);
  auto fit = least_squares_fit(basis, basis);
  CHECK(fit.residual_frobenius < 1e-10);
  CHECK((fit.coefficients - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("least squares: orthogonal remainder") {
  Mat targets(1, 2), basis(1, 2);
  targets << 1, 1;
  basis << 1, 0;
  auto fit = least_squares_fit(targets, basis);
  CHECK(fit.coefficients(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.residual_frobenius == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("least squares matches the explicit projector oracle") {
  Rng rng(19);
  Mat targets = gaussian_matrix(6, 5, rng);
  Mat basis = gaussian_matrix(2, 5, rng);
  auto fit = least_squares_fit(targets, basis);
  // |Y - Y B^T (B B^T)^{-1} B|_F computed directly.
  Mat gram = basis * basis.transpose();
  Mat proj = basis.transpose() * gram.inverse() * basis;
  const Real expected = (targets - targets * proj).norm();
  CHECK(fit.residual_frobenius == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("least squares: empty basis") {
  Rng rng(5);
  Mat targets = gaussian_matrix(3, 4, rng);
  auto fit = least_squares_fit(targets, Mat(0, 4));
  CHECK(fit.coefficients.cols() == 0);
  CHECK(fit.residual_frobenius == doctest::Approx(targets.norm()));
}

TEST_CASE("least squares residual never increases as the basis grows") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    Mat targets = gaussian_matrix(5, 6, rng);
    Mat rows = gaussian_matrix(4, 6, rng);
    Real prev = least_squares_fit(targets, Mat(0, 6)).residual_frobenius;
    for (int k = 1; k <= rows.rows(); ++k) {
      Real cur = least_squares_fit(targets, rows.topRows(k)).residual_frobenius;
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("sym_eig on diagonal and known 2x2") {
  Mat d = Mat::Zero(3, 3);
  d(0, 0) = 3;
  d(1, 1) = 1;
  d(2, 2) = 2;
  auto eig = sym_eig(d);
  CHECK(eig.eigenvalues(0) == doctest::Approx(1.0));
  CHECK(eig.eigenvalues(1) == doctest::Approx(2.0));
  CHECK(eig.eigenvalues(2) == doctest::Approx(3.0));

  Mat flip(2, 2);
  flip << 0, 1, 1, 0;
  auto e2 = sym_eig(flip);
  CHECK(e2.eigenvalues(0) == doctest::Approx(-1.0));
  CHECK(e2.eigenvalues(1) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig reconstruction and orthonormality") {
  Rng rng(31);
  Mat a = gaussian_matrix(6, 6, rng);
  Mat s = (a + a.transpose()) / 2;
  auto eig = sym_eig(s);
  Mat recon =
      eig.eigenvectors * eig.eigenvalues.asDiagonal() * eig.eigenvectors.transpose();
  CHECK((recon - s).cwiseAbs().maxCoeff() < 1e-8);
  Mat gram = eig.eigenvectors.transpose() * eig.eigenvectors;
  CHECK((gram - Mat::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-8);
  // Residual per column.
  for (int k = 0; k < 6; ++k) {
    Vec v = eig.eigenvectors.col(k);
    CHECK((s * v - eig.eigenvalues(k) * v).norm() <= 1e-8 * s.norm());
  }
  // Trace equals the eigenvalue sum.
  CHECK(s.trace() ==
        doctest::Approx(eig.eigenvalues.sum()).epsilon(1e-8));
}

TEST_CASE("sym_eig rejects non-symmetric input") {
  Mat s(2, 2);
  s << 0, 1, 0, 0;
  CHECK_THROWS_AS(sym_eig(s), ContractViolation);
}

TEST_CASE("kmeans: k equals point count") {
  Rng rng(1);
  Mat pts = gaussian_matrix(4, 2, rng);
  auto assign = kmeans(pts, 4, 99);
  for (int i = 0; i < 4; ++i) CHECK(assign[i] == i);
}

TEST_CASE("kmeans separates well-split 1-D pairs") {
  Mat pts(4, 1);
  pts << 0.0, 0.1, 10.0, 10.1;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto assign = kmeans(pts, 2, seed);
    CHECK(assign[0] == assign[1]);
    CHECK(assign[2] == assign[3]);
    CHECK(assign[0] != assign[2]);
  }
}

TEST_CASE("kmeans matches the exhaustive bipartition oracle on 5 points") {
  Rng rng(17);
  Mat pts = gaussian_matrix(5, 2, rng);
  auto res = kmeans_run(pts, 2, 42);
  const Real got = wcss(pts, res.assignment, 2);
  const Real best = best_two_partition(pts);
  CHECK(got == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("kmeans objective is non-increasing and empty clusters recover") {
  Rng rng(29);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Mat pts = gaussian_matrix(12, 3, rng);
    auto res = kmeans_run(pts, 4, seed);
    for (size_t i = 1; i < res.objective_history.size(); ++i)
      CHECK(res.objective_history[i] <= res.objective_history[i - 1] + 1e-12);
    std::vector<int> counts(4, 0);
    for (int a : res.assignment) counts[a]++;
    for (int c = 0; c < 4; ++c) CHECK(counts[c] > 0);
  }
}

TEST_CASE("kmeans rejects k larger than the point count") {
  Mat pts = Mat::Zero(3, 2);
  CHECK_THROWS_AS(kmeans(pts, 4, 0), ContractViolation);
}

TEST_CASE("kmeans is deterministic for a fixed seed") {
  Rng rng(41);
  Mat pts = gaussian_matrix(20, 2, rng);
  auto a = kmeans(pts, 3, 7);
  auto b = kmeans(pts, 3, 7);
  CHECK(a == b);
}
