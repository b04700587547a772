#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cdrsteer/csp.hpp"
#include "cdrsteer/kernels.hpp"
#include "generators.hpp"

using namespace cdrsteer;

namespace {

Matrix gaussian_rows(Rng& rng, std::size_t n, const Vector& stddev, const Vector& mean) {
  Matrix x(n, stddev.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < stddev.size(); ++c) x(r, c) = mean[c] + stddev[c] * rng.normal();
  return x;
}

Vector matvec(const Matrix& a, std::span<const double> v) {
  Vector out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[i] += a(i, j) * v[j];
  return out;
}

double quad(const Matrix& a, std::span<const double> v) { return dot(v, matvec(a, v)); }

}  // namespace

TEST(Csp, DiagonalFixture) {
  const GeneralizedEigen ge = generalized_eigen(Matrix::diagonal(Vector{4.0, 1.0}), Matrix::diagonal(Vector{1.0, 4.0}), 0.0);
  EXPECT_NEAR(ge.values[0], 0.25, 1e-12);
  EXPECT_NEAR(ge.values[1], 4.0, 1e-12);
  EXPECT_NEAR(std::abs(ge.vectors(0, 1)) / norm2(ge.vectors.column(1)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(ge.vectors(1, 0)) / norm2(ge.vectors.column(0)), 1.0, 1e-12);
}

TEST(Csp, PairFromDiagonalCovariances) {
  ClassCovariances cov;
  cov.s_u = Matrix::diagonal(Vector{4.0, 1.0});
  cov.s_d = Matrix::diagonal(Vector{1.0, 4.0});
  cov.mean_u = Vector{1.0, 0.0};
  cov.mean_d = Vector{0.0, 1.0};
  const DirectionPair p = pair_from_covariances(cov, 0.0);
  EXPECT_NEAR(p.u[0], 1.0, 1e-12);
  EXPECT_NEAR(p.d[1], 1.0, 1e-12);
  EXPECT_NEAR(p.lambda_max, 4.0, 1e-12);
  EXPECT_NEAR(p.lambda_min, 0.25, 1e-12);
  EXPECT_FALSE(p.degenerate);
}

TEST(Csp, IdenticalClassesAreDegenerate) {
  Rng rng(21);
  const Matrix x = gen::matrix(rng, 50, 6);
  const DirectionPair p = extract_pair(x, x);
  EXPECT_TRUE(p.degenerate);
  // Only the jitter on S_D separates the eigenvalues.
  EXPECT_LE(p.lambda_max, 1.0);
  EXPECT_GE(p.lambda_min, 1.0 - 1e-4);
}

TEST(Csp, RecoversPlantedAxes) {
  Rng rng(22);
  Vector su(6, 1.0);
  Vector sd(6, 1.0);
  su[2] = 3.0;
  sd[4] = 3.0;
  Vector mu(6, 0.0);
  Vector md(6, 0.0);
  mu[2] = 0.5;
  md[4] = 0.5;
  const Matrix xu = gaussian_rows(rng, 3000, su, mu);
  const Matrix xd = gaussian_rows(rng, 3000, sd, md);
  const DirectionPair p = extract_pair(xu, xd);
  EXPECT_GT(p.u[2], 0.95);
  EXPECT_GT(p.d[4], 0.95);
  EXPECT_NEAR(norm2(p.u), 1.0, 1e-12);
  EXPECT_NEAR(norm2(p.d), 1.0, 1e-12);
  EXPECT_GT(p.lambda_max, 5.0);
  EXPECT_LT(p.lambda_min, 0.2);
}

TEST(Csp, PropertyResidualWhiteningAndRayleigh) {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(10);
    const Matrix su = gen::spd(rng, n);
    const Matrix sd = gen::spd(rng, n);
    const double eps = rng.uniform(0.0, 1e-3);
    const GeneralizedEigen ge = generalized_eigen(su, sd, eps);
    Matrix sde = sd;
    for (std::size_t i = 0; i < n; ++i) sde(i, i) += eps;
    for (std::size_t j = 0; j < n; ++j) {
      const Vector w = ge.vectors.column(j);
      const Vector lhs = matvec(su, w);
      const Vector rhs = scaled(matvec(sde, w), ge.values[j]);
      EXPECT_LE(norm2(subtract(lhs, rhs)), 1e-8 * std::max(1.0, norm2(lhs)));
      for (std::size_t k = 0; k < n; ++k) {
        const Vector wk = ge.vectors.column(k);
        EXPECT_NEAR(dot(w, matvec(sde, wk)), j == k ? 1.0 : 0.0, 1e-8);
      }
    }
    for (std::size_t j = 1; j < n; ++j) EXPECT_LE(ge.values[j - 1], ge.values[j]);
    for (int s = 0; s < 10; ++s) {
      const Vector v = gen::vector(rng, n);
      const double q = quad(su, v) / quad(sde, v);
      EXPECT_LE(q, ge.values.back() * (1.0 + 1e-9));
      EXPECT_GE(q, ge.values.front() * (1.0 - 1e-9));
    }
  }
}

TEST(Csp, PropertyEigenvaluesInvariantUnderLinearMap) {
  Rng rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 3 + rng.below(4);
    const Matrix xu = gen::matrix(rng, 40, d);
    const Matrix xd = gen::matrix(rng, 40, d);
    Matrix m = gen::matrix(rng, d, d);
    for (std::size_t i = 0; i < d; ++i) m(i, i) += 3.0;  // well conditioned
    const CspOptions opts{0.0, 0.0};
    const DirectionPair a = extract_pair(xu, xd, opts);
    const DirectionPair b = extract_pair(kernels::serial::matmul(xu, m), kernels::serial::matmul(xd, m), opts);
    EXPECT_NEAR(a.lambda_max, b.lambda_max, 1e-8 * a.lambda_max);
    EXPECT_NEAR(a.lambda_min, b.lambda_min, 1e-8 * a.lambda_max);
  }
}

TEST(Csp, ShrinkCovExtremesAndTrace) {
  Rng rng(25);
  Matrix x = gen::matrix(rng, 30, 5);
  const Eigen::MatrixXd ex = gen::to_eigen(x);
  const Eigen::MatrixXd centered = ex.rowwise() - ex.colwise().mean();
  for (std::size_t r = 0; r < 30; ++r)
    for (std::size_t c = 0; c < 5; ++c) x(r, c) = centered(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  const Eigen::MatrixXd sample = centered.transpose() * centered / 29.0;
  const Matrix s0 = shrink_cov(x, 0.0);
  const Matrix s1 = shrink_cov(x, 1.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(s0(i, j), sample(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), 1e-12);
      EXPECT_NEAR(s1(i, j), i == j ? sample.trace() / 5.0 : 0.0, 1e-12);
    }
  for (double g : {0.1, 0.5, 0.9}) EXPECT_NEAR(trace(shrink_cov(x, g)), sample.trace(), 1e-10);
  EXPECT_THROW(shrink_cov(Matrix(1, 3), 0.1), std::invalid_argument);
  EXPECT_THROW(shrink_cov(x, 1.5), std::invalid_argument);
}

TEST(Csp, JitterEscalatesOnSingularCovariance) {
  Matrix sd = Matrix::diagonal(Vector{1.0, 0.0, 1.0});
  const GeneralizedEigen ge = generalized_eigen(Matrix::identity(3), sd, 0.0);
  EXPECT_GT(ge.jitter, 0.0);
  EXPECT_THROW(generalized_eigen(Matrix::identity(2), -1.0 * Matrix::identity(2), 0.0), std::runtime_error);
  EXPECT_THROW(generalized_eigen(Matrix::identity(2), Matrix::identity(3), 0.0), std::invalid_argument);
}

TEST(Csp, SignsFaceTheClassMeans) {
  Rng rng(26);
  Vector su(4, 1.0);
  su[0] = 3.0;
  const Matrix xu = gaussian_rows(rng, 500, su, Vector{-2.0, 0.0, 0.0, 0.0});
  const Matrix xd = gaussian_rows(rng, 500, Vector(4, 1.0), Vector(4, 0.0));
  const DirectionPair p = extract_pair(xu, xd);
  EXPECT_LT(p.u[0], 0.0);
}

TEST(Csp, JsonRoundTrip) {
  std::vector<DirectionPair> pairs(2);
  pairs[0].layer = 1;
  pairs[0].u = Vector{0.6, 0.8};
  pairs[0].d = Vector{1.0, 0.0};
  pairs[0].lambda_max = 3.5;
  pairs[0].lambda_min = 0.1234567890123;
  pairs[1].layer = 3;
  pairs[1].u = Vector{0.0, 1.0};
  pairs[1].d = Vector{-1.0, 0.0};
  std::stringstream ss;
  write_direction_pairs_json(ss, pairs);
  const auto back = read_direction_pairs_json(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].layer, pairs[i].layer);
    EXPECT_EQ(back[i].u, pairs[i].u);
    EXPECT_EQ(back[i].d, pairs[i].d);
    EXPECT_EQ(back[i].lambda_min, pairs[i].lambda_min);
  }
}
