#include "cdrsteer/csp.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "cdrsteer/kernels.hpp"
#include "serialize.hpp"

namespace cdrsteer {

using nlohmann::json;

namespace {

// Relative eigenvalue spread below which a pair carries no contrast.
constexpr double kDegenerateSpread = 1e-4;
constexpr int kJitterDoublings = 10;

void require_square_same(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || b.rows() != b.cols() || a.rows() != b.rows())
    throw std::invalid_argument("generalized_eigen: covariances must be square and equally sized");
}

Vector column_means(const Matrix& x) {
  Vector mu(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) mu[c] += x(r, c);
  for (double& v : mu) v /= static_cast<double>(x.rows());
  return mu;
}

Matrix centered(const Matrix& x, std::span<const double> mu) {
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) -= mu[c];
  return out;
}

Vector normalized(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > 0.0)) throw std::runtime_error("extract_pair: zero direction");
  return scaled(v, 1.0 / n);
}

}  // namespace

Matrix shrink_cov(const Matrix& centered_x, double gamma) {
  if (centered_x.rows() < 2) throw std::invalid_argument("shrink_cov: needs N >= 2 samples");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("shrink_cov: gamma must lie in [0, 1]");
  const std::size_t d = centered_x.cols();
  Matrix c = kernels::parallel::gram(centered_x);
  const double inv = 1.0 / static_cast<double>(centered_x.rows() - 1);
  for (double& v : c.data()) v *= inv;
  const double target = trace(c) / static_cast<double>(d);
  Matrix s = (1.0 - gamma) * c;
  for (std::size_t i = 0; i < d; ++i) s(i, i) += gamma * target;
  return s;
}

ClassCovariances class_covariances(const Matrix& x_u, const Matrix& x_d, double shrinkage) {
  if (x_u.rows() == 0 || x_d.rows() == 0) throw std::invalid_argument("extract_pair: empty class matrix");
  if (x_u.cols() != x_d.cols()) throw std::invalid_argument("extract_pair: classes differ in dimension");
  ClassCovariances cov;
  cov.shrinkage = shrinkage;
  cov.mean_u = column_means(x_u);
  cov.mean_d = column_means(x_d);
  cov.s_u = shrink_cov(centered(x_u, cov.mean_u), shrinkage);
  cov.s_d = shrink_cov(centered(x_d, cov.mean_d), shrinkage);
  return cov;
}

GeneralizedEigen generalized_eigen(const Matrix& s_u, const Matrix& s_d, double jitter) {
  require_square_same(s_u, s_d);
  if (jitter < 0.0) throw std::invalid_argument("generalized_eigen: negative jitter");
  const std::size_t n = s_d.rows();

  auto jittered = [&](double eps) {
    Matrix m = s_d;
    for (std::size_t i = 0; i < n; ++i) m(i, i) += eps;
    return m;
  };

  double eps = jitter;
  std::optional<Matrix> chol = cholesky(jittered(eps));
  if (!chol) {
    const double scale = std::max(trace(s_d) / static_cast<double>(n), 1.0);
    const double base = jitter > 0.0 ? jitter : 1e-12 * scale;
    for (int i = jitter > 0.0 ? 1 : 0; i <= kJitterDoublings && !chol; ++i) {
      eps = std::ldexp(base, i);
      chol = cholesky(jittered(eps));
    }
    if (!chol) throw std::runtime_error("extract_pair: S_D + εI is not positive definite after jitter escalation");
  }
  const Matrix& l = *chol;

  // A = L⁻¹ S_U L⁻ᵀ. Y = L⁻¹ S_U column by column; A = L⁻¹ Yᵀ.
  Matrix y(n, n);
  for (std::size_t c = 0; c < n; ++c) y.set_column(c, solve_lower(l, s_u.column(c)));
  Matrix a(n, n);
  for (std::size_t c = 0; c < n; ++c) a.set_column(c, solve_lower(l, y.row(c)));

  const SymmetricEigen eig = symmetric_eigen(a);
  GeneralizedEigen out;
  out.values = eig.values;
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) out.vectors.set_column(j, solve_lower_transpose(l, eig.vectors.column(j)));
  out.chol = l;
  out.jitter = eps;
  return out;
}

DirectionPair pair_from_covariances(const ClassCovariances& cov, double jitter) {
  const GeneralizedEigen ge = generalized_eigen(cov.s_u, cov.s_d, jitter);
  const std::size_t n = ge.values.size();

  DirectionPair pair;
  pair.lambda_min = ge.values.front();
  pair.lambda_max = ge.values.back();
  pair.jitter = ge.jitter;
  pair.u = normalized(ge.vectors.column(n - 1));
  pair.d = normalized(ge.vectors.column(0));
  pair.degenerate = !(pair.lambda_max - pair.lambda_min > kDegenerateSpread * std::abs(pair.lambda_max));

  const Vector gap = subtract(cov.mean_u, cov.mean_d);
  if (dot(pair.u, gap) < 0.0) {
    for (double& v : pair.u) v = -v;
    pair.u_flipped = true;
  }
  if (dot(pair.d, gap) > 0.0) {
    for (double& v : pair.d) v = -v;
    pair.d_flipped = true;
  }
  return pair;
}

DirectionPair extract_pair(const Matrix& x_u, const Matrix& x_d, const CspOptions& options) {
  if (options.relative_jitter < 0.0) throw std::invalid_argument("extract_pair: negative jitter");
  const ClassCovariances cov = class_covariances(x_u, x_d, options.shrinkage);
  const double mean_diag = trace(cov.s_d) / static_cast<double>(cov.s_d.rows());
  return pair_from_covariances(cov, options.relative_jitter * mean_diag);
}

namespace serialize {

json direction_pairs(std::span<const DirectionPair> pairs) {
  json arr = json::array();
  for (const DirectionPair& p : pairs)
    arr.push_back({{"layer", p.layer},
                   {"u", p.u},
                   {"d", p.d},
                   {"lambda_max", p.lambda_max},
                   {"lambda_min", p.lambda_min}});
  return arr;
}

std::vector<DirectionPair> direction_pairs(const json& j) {
  std::vector<DirectionPair> out;
  for (const json& e : j) {
    DirectionPair p;
    p.layer = e.at("layer").get<int>();
    p.u = e.at("u").get<Vector>();
    p.d = e.at("d").get<Vector>();
    p.lambda_max = e.at("lambda_max").get<double>();
    p.lambda_min = e.at("lambda_min").get<double>();
    if (p.u.size() != p.d.size() || p.u.empty()) throw std::runtime_error("direction pair: bad vector lengths");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace serialize

void write_direction_pairs_json(std::ostream& out, std::span<const DirectionPair> pairs) {
  out << serialize::direction_pairs(pairs).dump(2) << '\n';
}

std::vector<DirectionPair> read_direction_pairs_json(std::istream& in) {
  return serialize::direction_pairs(json::parse(in));
}

}  // namespace cdrsteer
