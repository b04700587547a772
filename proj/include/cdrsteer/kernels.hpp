#pragma once

// Dense kernels in two flavours. `serial` is the reference path and
// `parallel` splits the outer loop across OpenMP threads. Every output
// element is reduced by exactly one thread in the same order as the serial
// loop, so both flavours produce bit-identical results.

#include <cstddef>
#include <functional>
#include <span>

#include "cdrsteer/linalg.hpp"

namespace cdrsteer::kernels {

namespace serial {
// y = x W  (x has W.rows() entries)
Vector vecmat(std::span<const double> x, const Matrix& w);
Matrix matmul(const Matrix& a, const Matrix& b);
// XᵀX
Matrix gram(const Matrix& x);
}  // namespace serial

namespace parallel {
Vector vecmat(std::span<const double> x, const Matrix& w);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix gram(const Matrix& x);
}  // namespace parallel

// Runs body(i) for i in [0, n) across threads. The first exception thrown by
// any iteration is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// Thread count used by parallel regions.
int max_threads();
void set_max_threads(int n);
// Applies the CDR_STEER_THREADS cap if set; returns the resulting count.
int configure_threads_from_env();

}  // namespace cdrsteer::kernels
