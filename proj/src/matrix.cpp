#include "ocreplay/matrix.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ocreplay {

namespace {
int g_threads = 1;
}

void set_num_threads(int n) { g_threads = n < 1 ? 1 : n; }
int num_threads() { return g_threads; }

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> init) {
  rows = init.size();
  cols = rows ? init.begin()->size() : 0;
  data.reserve(rows * cols);
  for (const auto& r : init) {
    if (r.size() != cols)
      throw std::invalid_argument("Matrix: ragged initializer list");
    data.insert(data.end(), r.begin(), r.end());
  }
}

std::string Matrix::shape_str() const {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() +
                                " * " + b.shape_str());
  Matrix c(a.rows, b.cols, 0.0);
  const std::int64_t m = static_cast<std::int64_t>(a.rows);
  const std::int64_t kk = static_cast<std::int64_t>(a.cols);
  const std::int64_t n = static_cast<std::int64_t>(b.cols);

  // Four output rows per block: each B row read once serves four FMA
  // streams, which keeps the kernel compute-bound at these sizes.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(g_threads)
#endif
  for (std::int64_t i0 = 0; i0 < m; i0 += 4) {
    const std::int64_t ilim = std::min<std::int64_t>(i0 + 4, m);
    if (ilim - i0 == 4) {
      double* c0 = c.row(i0);
      double* c1 = c.row(i0 + 1);
      double* c2 = c.row(i0 + 2);
      double* c3 = c.row(i0 + 3);
      for (std::int64_t k = 0; k < kk; ++k) {
        const double a0 = a(i0, k), a1 = a(i0 + 1, k);
        const double a2 = a(i0 + 2, k), a3 = a(i0 + 3, k);
        const double* bk = b.row(k);
        for (std::int64_t j = 0; j < n; ++j) {
          const double bv = bk[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (std::int64_t i = i0; i < ilim; ++i) {
        double* ci = c.row(i);
        for (std::int64_t k = 0; k < kk; ++k) {
          const double av = a(i, k);
          const double* bk = b.row(k);
          for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
      }
    }
  }
  return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows)
    throw std::invalid_argument("matmul_at_b: shape mismatch " + a.shape_str() +
                                "^T * " + b.shape_str());
  Matrix c(a.cols, b.cols, 0.0);
  const std::int64_t m = static_cast<std::int64_t>(a.cols);
  const std::int64_t kk = static_cast<std::int64_t>(a.rows);
  const std::int64_t n = static_cast<std::int64_t>(b.cols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(g_threads)
#endif
  for (std::int64_t i0 = 0; i0 < m; i0 += 4) {
    const std::int64_t ilim = std::min<std::int64_t>(i0 + 4, m);
    if (ilim - i0 == 4) {
      double* c0 = c.row(i0);
      double* c1 = c.row(i0 + 1);
      double* c2 = c.row(i0 + 2);
      double* c3 = c.row(i0 + 3);
      for (std::int64_t k = 0; k < kk; ++k) {
        const double* ak = a.row(k) + i0;
        const double* bk = b.row(k);
        const double a0 = ak[0], a1 = ak[1], a2 = ak[2], a3 = ak[3];
        for (std::int64_t j = 0; j < n; ++j) {
          const double bv = bk[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (std::int64_t i = i0; i < ilim; ++i) {
        double* ci = c.row(i);
        for (std::int64_t k = 0; k < kk; ++k) {
          const double av = a(k, i);
          const double* bk = b.row(k);
          for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
      }
    }
  }
  return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols)
    throw std::invalid_argument("matmul_a_bt: shape mismatch " + a.shape_str() +
                                " * " + b.shape_str() + "^T");
  return matmul(a, transpose(b));
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace ocreplay
