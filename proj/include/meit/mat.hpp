// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace meit {

// Row-major dense matrix of doubles. All model math runs in double
// precision; records on disk are float32 (see signal.hpp).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {
    assert(r >= 0 && c >= 0);
  }

  double& operator()(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }

  double* row(int r) { return d.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return d.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return d.size(); }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline bool all_finite(const Mat& m) {
  for (double v : m.d)
    if (!std::isfinite(v)) return false;
  return true;
}

// y[m] += A[m x n] * x[n]
inline void matvec_acc(const Mat& a, const double* x, double* y) {
  for (int i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) s += ar[j] * x[j];
    y[i] += s;
  }
}

// y[n] += A^T[n x m] * x[m]  (A is m x n)
inline void matvec_t_acc(const Mat& a, const double* x, double* y) {
  for (int i = 0; i < a.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* ar = a.row(i);
    for (int j = 0; j < a.cols; ++j) y[j] += ar[j] * xi;
  }
}

// C[m x n] += A[m x k] * B[k x n]
inline void matmul_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = ar[k];
      if (aik == 0.0) continue;
      const double* br = b.row(k);
      for (int j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T (B is n x k)
inline void matmul_bt_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* br = b.row(j);
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
      cr[j] += s;
    }
  }
}

// C[k x n] += A^T * B where A is m x k, B is m x n
inline void matmul_at_acc(const Mat& a, const Mat& b, Mat& c) {
  assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
  for (int m = 0; m < a.rows; ++m) {
    const double* ar = a.row(m);
    const double* br = b.row(m);
    for (int i = 0; i < a.cols; ++i) {
      const double ami = ar[i];
      if (ami == 0.0) continue;
      double* cr = c.row(i);
      for (int j = 0; j < b.cols; ++j) cr[j] += ami * br[j];
    }
  }
}

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  assert(a.same_shape(b));
  double m = 0.0;
  for (size_t i = 0; i < a.d.size(); ++i) m = std::max(m, std::fabs(a.d[i] - b.d[i]));
  return m;
}

}  // namespace meit
