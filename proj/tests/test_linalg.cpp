#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>

#include "cdrsteer/kernels.hpp"
#include "cdrsteer/linalg.hpp"
#include "cdrsteer/rng.hpp"
#include "generators.hpp"

using namespace cdrsteer;

TEST(Linalg, CholeskyMatchesEigen) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const Matrix a = gen::spd(rng, n);
    const auto l = cholesky(a);
    ASSERT_TRUE(l.has_value());
    const Eigen::MatrixXd oracle = gen::to_eigen(a).llt().matrixL();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR((*l)(i, j), oracle(i, j), 1e-10);
  }
}

TEST(Linalg, CholeskyRejectsIndefinite) {
  const Matrix a = Matrix::from_rows({{1.0, 2.0}, {2.0, 1.0}});
  EXPECT_FALSE(cholesky(a).has_value());
}

TEST(Linalg, TriangularSolvesInvert) {
  Rng rng(2);
  const Matrix a = gen::spd(rng, 6);
  const Matrix l = *cholesky(a);
  const Vector b = gen::vector(rng, 6);
  const Vector x = solve_lower(l, b);
  const Vector y = solve_lower_transpose(l, b);
  for (std::size_t i = 0; i < 6; ++i) {
    double lx = 0.0;
    double lty = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      lx += l(i, j) * x[j];
      lty += l(j, i) * y[j];
    }
    EXPECT_NEAR(lx, b[i], 1e-10);
    EXPECT_NEAR(lty, b[i], 1e-10);
  }
}

TEST(Linalg, SolveSpdMatchesEigen) {
  Rng rng(3);
  const Matrix a = gen::spd(rng, 7);
  const Vector b = gen::vector(rng, 7);
  const Vector x = solve_spd(a, b);
  const Eigen::VectorXd oracle = gen::to_eigen(a).ldlt().solve(gen::to_eigen(b));
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(x[i], oracle(static_cast<Eigen::Index>(i)), 1e-9);
}

TEST(Linalg, SymmetricEigenMatchesEigen) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(10);
    const Matrix a = gen::spd(rng, n, -0.5);  // may be indefinite
    const SymmetricEigen eig = symmetric_eigen(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(gen::to_eigen(a));
    for (std::size_t i = 0; i < n; ++i)
      EXPECT_NEAR(eig.values[i], oracle.eigenvalues()(static_cast<Eigen::Index>(i)), 1e-9);
    for (std::size_t j = 0; j < n; ++j) {
      const Vector v = eig.vectors.column(j);
      EXPECT_NEAR(norm2(v), 1.0, 1e-12);
      for (std::size_t i = 0; i < n; ++i) {
        double av = 0.0;
        for (std::size_t k = 0; k < n; ++k) av += a(i, k) * v[k];
        EXPECT_NEAR(av, eig.values[j] * v[i], 1e-9);
      }
    }
  }
}

TEST(Linalg, SymmetricEigenRejectsNonSquare) { EXPECT_THROW(symmetric_eigen(Matrix(2, 3)), std::invalid_argument); }

TEST(Linalg, MatrixHelpers) {
  const Matrix a = Matrix::from_rows({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}});
  EXPECT_EQ(a.transpose()(2, 1), 6.0);
  EXPECT_EQ(a.column(1), (Vector{2.0, 5.0}));
  EXPECT_EQ(trace(Matrix::diagonal(Vector{1.0, 2.0, 3.0})), 6.0);
  EXPECT_THROW(Matrix::from_rows({{1.0}, {1.0, 2.0}}), std::invalid_argument);
  EXPECT_THROW(dot(Vector{1.0}, Vector{1.0, 2.0}), std::invalid_argument);
}

TEST(Kernels, SerialMatchesEigen) {
  Rng rng(5);
  const Matrix a = gen::matrix(rng, 13, 7);
  const Matrix b = gen::matrix(rng, 7, 5);
  const Vector x = gen::vector(rng, 13);
  const Eigen::MatrixXd ab = gen::to_eigen(a) * gen::to_eigen(b);
  const Eigen::MatrixXd ata = gen::to_eigen(a).transpose() * gen::to_eigen(a);
  const Eigen::VectorXd xa = gen::to_eigen(a).transpose() * gen::to_eigen(x);
  const Matrix m = kernels::serial::matmul(a, b);
  const Matrix g = kernels::serial::gram(a);
  const Vector y = kernels::serial::vecmat(x, a);
  for (std::size_t i = 0; i < 13; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(m(i, j), ab(i, j), 1e-12);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_NEAR(y[i], xa(static_cast<Eigen::Index>(i)), 1e-12);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(g(i, j), ata(i, j), 1e-12);
  }
}

TEST(Kernels, ParallelIsBitIdenticalToSerial) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const std::size_t k = 1 + rng.below(64);
    const std::size_t m = 1 + rng.below(64);
    const Matrix a = gen::matrix(rng, n, k);
    const Matrix b = gen::matrix(rng, k, m);
    const Vector x = gen::vector(rng, n);
    EXPECT_EQ(kernels::serial::matmul(a, b), kernels::parallel::matmul(a, b));
    EXPECT_EQ(kernels::serial::gram(a), kernels::parallel::gram(a));
    EXPECT_EQ(kernels::serial::vecmat(x, a), kernels::parallel::vecmat(x, a));
  }
}

TEST(Kernels, ShapeMismatchThrows) {
  EXPECT_THROW(kernels::serial::matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
  EXPECT_THROW(kernels::parallel::vecmat(Vector(3), Matrix(2, 2)), std::invalid_argument);
}

TEST(Kernels, ParallelForVisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  kernels::parallel_for(hits.size(), [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(Kernels, ParallelForRethrows) {
  EXPECT_THROW(kernels::parallel_for(100,
                                     [](std::size_t i) {
                                       if (i == 37) throw std::runtime_error("boom");
                                     }),
               std::runtime_error);
}

TEST(Kernels, ThreadCapFromEnvironment) {
  const int before = kernels::max_threads();
  ::setenv("CDR_STEER_THREADS", "1", 1);
  EXPECT_EQ(kernels::configure_threads_from_env(), 1);
  ::unsetenv("CDR_STEER_THREADS");
  kernels::set_max_threads(before);
  EXPECT_EQ(kernels::max_threads(), before);
  EXPECT_THROW(kernels::set_max_threads(0), std::invalid_argument);
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.below(7), 7u);
    b.below(7);
  }
}

TEST(Rng, NormalMoments) {
  Rng rng(9);
  double s = 0.0;
  double ss = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    ss += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(ss / n, 1.0, 0.05);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng rng(10);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}
