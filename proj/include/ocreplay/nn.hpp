#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ocreplay/matrix.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay {

// y = x W + b with the bias row broadcast over the batch.
// x: batch x in, w: in x out, b: 1 x out.
Matrix dense_forward(const Matrix& x, const Matrix& w, const Matrix& b);

struct DenseGrads {
  Matrix x;  // batch x in
  Matrix w;  // in x out
  Matrix b;  // 1 x out
};
DenseGrads dense_backward(const Matrix& x, const Matrix& w, const Matrix& grad_y);

Matrix relu(const Matrix& x);
// x is the forward input (pre-activation)
Matrix relu_backward(const Matrix& x, const Matrix& grad_y);
Matrix sigmoid(const Matrix& x);
// y is the forward output
Matrix sigmoid_backward(const Matrix& y, const Matrix& grad_y);
// row-wise softmax via log-sum-exp with row-max subtraction
Matrix softmax_rows(const Matrix& x);
// y is the forward output, grad_y is dL/dy
Matrix softmax_rows_backward(const Matrix& y, const Matrix& grad_y);

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Matrix first_moment;
  Matrix second_moment;
  std::uint64_t step_count = 0;

  AdamState() = default;
  AdamState(std::size_t rows, std::size_t cols)
      : first_moment(rows, cols, 0.0), second_moment(rows, cols, 0.0) {}
};

// One bias-corrected Adam update in place. Throws on a non-finite gradient,
// naming the parameter.
void adam_step(Matrix& param, const Matrix& grad, AdamState& state,
               const AdamParams& hp, const std::string& name);

// Entries ~ Normal(0, 2 / fan_in). The distribution depends only on fan_in.
Matrix he_normal_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                      Rng& rng);

struct GradCheckItem {
  Matrix* value;           // parameter to perturb
  const Matrix* analytic;  // hand-computed gradient, same shape
  std::string name;
};
struct GradCheckReport {
  std::string name;
  double max_rel_err;
};

// Central finite differences per coordinate. loss must be deterministic
// (any noise frozen). Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<double()>& loss,
                  const std::vector<GradCheckItem>& items, double step,
                  std::vector<GradCheckReport>* report = nullptr);

}  // namespace ocreplay
