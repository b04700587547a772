#include "cdrsteer/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>

#ifdef CDRSTEER_HAS_OPENMP
#include <omp.h>
#endif

namespace cdrsteer::kernels {

namespace {
void check_vecmat(std::span<const double> x, const Matrix& w) {
  if (x.size() != w.rows()) throw std::invalid_argument("vecmat: length mismatch");
}
void check_matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
}
}  // namespace

namespace serial {

Vector vecmat(std::span<const double> x, const Matrix& w) {
  check_vecmat(x, w);
  Vector y(w.cols(), 0.0);
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) s += x[r] * w(r, c);
    y[c] = s;
  }
  return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b);
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Matrix gram(const Matrix& x) {
  const std::size_t d = x.cols();
  Matrix out(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, i) * x(r, j);
      out(i, j) = out(j, i) = s;
    }
  return out;
}

}  // namespace serial

namespace parallel {

Vector vecmat(std::span<const double> x, const Matrix& w) {
  check_vecmat(x, w);
  Vector y(w.cols(), 0.0);
  const auto cols = static_cast<std::ptrdiff_t>(w.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) s += x[r] * w(r, static_cast<std::size_t>(c));
    y[static_cast<std::size_t>(c)] = s;
  }
  return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b);
  Matrix out(a.rows(), b.cols());
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

Matrix gram(const Matrix& x) {
  const std::size_t d = x.cols();
  Matrix out(d, d);
  const auto dd = static_cast<std::ptrdiff_t>(d);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < dd; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = i; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) s += x(r, i) * x(r, j);
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  return out;
}

}  // namespace parallel

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      const std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

int max_threads() {
#ifdef CDRSTEER_HAS_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_max_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be >= 1");
#ifdef CDRSTEER_HAS_OPENMP
  omp_set_num_threads(n);
#endif
}

int configure_threads_from_env() {
  const char* env = std::getenv("CDR_STEER_THREADS");
  if (env != nullptr && *env != '\0') {
    int cap = 0;
    try {
      cap = std::stoi(env);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("CDR_STEER_THREADS is not an integer: ") + env);
    }
    if (cap < 1) throw std::invalid_argument("CDR_STEER_THREADS must be >= 1");
#ifdef CDRSTEER_HAS_OPENMP
    omp_set_num_threads(std::min(cap, omp_get_num_procs()));
#endif
  }
  return max_threads();
}

}  // namespace cdrsteer::kernels
