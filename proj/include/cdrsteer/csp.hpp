#pragma once

// Paired-direction extraction: shrinkage covariances and a Cholesky-whitened
// symmetric eigenproblem (common spatial patterns).

#include <iosfwd>
#include <span>
#include <vector>

#include "cdrsteer/linalg.hpp"

namespace cdrsteer {

// (1-γ)·C + γ·(tr C / d)·I with C = X̄ᵀX̄ / (N-1); X̄ must be centered.
Matrix shrink_cov(const Matrix& centered, double gamma);

struct ClassCovariances {
  Matrix s_u, s_d;
  Vector mean_u, mean_d;
  double shrinkage = 0.0;
};

// Centers each class and applies shrink_cov.
ClassCovariances class_covariances(const Matrix& x_u, const Matrix& x_d, double shrinkage);

struct CspOptions {
  double shrinkage = 0.1;
  // Jitter added to S_D, relative to its mean diagonal. Doubled up to 2^10
  // times if the Cholesky factorization fails.
  double relative_jitter = 1e-6;
};

struct DirectionPair {
  int layer = -1;
  Vector u;  // unit, top generalized eigenvector
  Vector d;  // unit, bottom generalized eigenvector
  double lambda_max = 0.0;
  double lambda_min = 0.0;
  double jitter = 0.0;      // absolute ε actually used
  bool degenerate = false;  // all generalized eigenvalues (numerically) equal
  bool u_flipped = false;   // sign flipped to face μ_U - μ_D
  bool d_flipped = false;   // sign flipped to face μ_D - μ_U
};

struct GeneralizedEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j: generalized eigenvector w_j (unnormalized, L⁻ᵀ v_j)
  Matrix chol;     // L with L Lᵀ = S_D + εI
  double jitter = 0.0;
};

// Solves S_U w = λ (S_D + εI) w through A = L⁻¹ S_U L⁻ᵀ. `jitter` is absolute.
// Throws std::runtime_error if S_D + εI stays indefinite after escalation.
GeneralizedEigen generalized_eigen(const Matrix& s_u, const Matrix& s_d, double jitter);

// Pair from prepared covariances; `jitter` absolute.
DirectionPair pair_from_covariances(const ClassCovariances& cov, double jitter);

DirectionPair extract_pair(const Matrix& x_u, const Matrix& x_d, const CspOptions& options = {});

// JSON array of {layer, u[], d[], lambda_max, lambda_min}.
void write_direction_pairs_json(std::ostream& out, std::span<const DirectionPair> pairs);
std::vector<DirectionPair> read_direction_pairs_json(std::istream& in);

}  // namespace cdrsteer
