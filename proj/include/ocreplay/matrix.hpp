#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace ocreplay {

// Dense row-major 2-D array of doubles. The single numeric container for
// activations, parameters and gradients.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> init);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const;
  bool all_finite() const;
};

// c = a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// c = a^T * b, without materializing the transpose
Matrix matmul_at_b(const Matrix& a, const Matrix& b);
// c = a * b^T
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

// Number of threads used by the matmul kernels. Results are bit-identical
// for any thread count (each output row is accumulated by a single thread
// in fixed order).
void set_num_threads(int n);
int num_threads();

}  // namespace ocreplay
