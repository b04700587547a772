#pragma once

// Random instance generators for property tests.

#include <Eigen/Dense>

#include "cdrsteer/linalg.hpp"
#include "cdrsteer/rng.hpp"

namespace gen {

inline cdrsteer::Vector vector(cdrsteer::Rng& rng, std::size_t n, double scale = 1.0) {
  cdrsteer::Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline cdrsteer::Vector unit_vector(cdrsteer::Rng& rng, std::size_t n) {
  cdrsteer::Vector v = vector(rng, n);
  return cdrsteer::scaled(v, 1.0 / cdrsteer::norm2(v));
}

inline cdrsteer::Matrix matrix(cdrsteer::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  cdrsteer::Matrix m(rows, cols);
  for (double& x : m.data()) x = scale * rng.normal();
  return m;
}

// B Bᵀ + shift·I.
inline cdrsteer::Matrix spd(cdrsteer::Rng& rng, std::size_t n, double shift = 0.1) {
  const cdrsteer::Matrix b = matrix(rng, n, n);
  cdrsteer::Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += b(i, k) * b(j, k);
      s(i, j) = acc + (i == j ? shift : 0.0);
    }
  return s;
}

inline double interior_alpha(cdrsteer::Rng& rng) { return rng.uniform(1e-3, 1.0 - 1e-3); }

inline Eigen::MatrixXd to_eigen(const cdrsteer::Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

inline Eigen::VectorXd to_eigen(const cdrsteer::Vector& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace gen
