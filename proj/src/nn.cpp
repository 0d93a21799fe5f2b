#include "ocreplay/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ocreplay {

Matrix dense_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols != w.rows)
    throw std::invalid_argument("dense_forward: shape mismatch x " +
                                x.shape_str() + " vs w " + w.shape_str());
  if (b.rows != 1 || b.cols != w.cols)
    throw std::invalid_argument("dense_forward: shape mismatch b " +
                                b.shape_str() + " vs w " + w.shape_str());
  Matrix y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* yi = y.row(i);
    const double* bv = b.row(0);
    for (std::size_t j = 0; j < y.cols; ++j) yi[j] += bv[j];
  }
  return y;
}

DenseGrads dense_backward(const Matrix& x, const Matrix& w,
                          const Matrix& grad_y) {
  if (grad_y.rows != x.rows || grad_y.cols != w.cols || x.cols != w.rows)
    throw std::invalid_argument("dense_backward: shape mismatch x " +
                                x.shape_str() + ", w " + w.shape_str() +
                                ", grad_y " + grad_y.shape_str());
  DenseGrads g;
  g.w = matmul_at_b(x, grad_y);
  g.x = matmul_a_bt(grad_y, w);
  g.b = Matrix(1, grad_y.cols, 0.0);
  for (std::size_t i = 0; i < grad_y.rows; ++i) {
    const double* gi = grad_y.row(i);
    double* bb = g.b.row(0);
    for (std::size_t j = 0; j < grad_y.cols; ++j) bb[j] += gi[j];
  }
  return g;
}

Matrix relu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Matrix relu_backward(const Matrix& x, const Matrix& grad_y) {
  require_same_shape(x, grad_y, "relu_backward");
  Matrix g = grad_y;
  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (x.data[i] <= 0.0) g.data[i] = 0.0;
  return g;
}

Matrix sigmoid(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return y;
}

Matrix sigmoid_backward(const Matrix& y, const Matrix& grad_y) {
  require_same_shape(y, grad_y, "sigmoid_backward");
  Matrix g = grad_y;
  for (std::size_t i = 0; i < g.data.size(); ++i)
    g.data[i] *= y.data[i] * (1.0 - y.data[i]);
  return g;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y = x;
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* r = y.row(i);
    double mx = r[0];
    for (std::size_t j = 1; j < y.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (std::size_t j = 0; j < y.cols; ++j) r[j] /= sum;
  }
  return y;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& grad_y) {
  require_same_shape(y, grad_y, "softmax_rows_backward");
  Matrix g(y.rows, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i) {
    const double* yi = y.row(i);
    const double* gi = grad_y.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) dot += yi[j] * gi[j];
    double* go = g.row(i);
    for (std::size_t j = 0; j < y.cols; ++j) go[j] = yi[j] * (gi[j] - dot);
  }
  return g;
}

void adam_step(Matrix& param, const Matrix& grad, AdamState& state,
               const AdamParams& hp, const std::string& name) {
  require_same_shape(param, grad, "adam_step");
  require_same_shape(param, state.first_moment, "adam_step state");
  if (hp.lr <= 0.0) throw std::invalid_argument("adam_step: lr must be > 0");
  if (!grad.all_finite())
    throw std::runtime_error("adam_step: non-finite gradient for parameter '" +
                             name + "'");
  state.step_count += 1;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step_count));
  double* m = state.first_moment.data.data();
  double* v = state.second_moment.data.data();
  double* p = param.data.data();
  const double* g = grad.data.data();
  const std::size_t n = param.size();
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

Matrix he_normal_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                      Rng& rng) {
  if (fan_in == 0)
    throw std::invalid_argument("he_normal_init: fan_in must be > 0");
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal() * sd;
  return m;
}

double grad_check(const std::function<double()>& loss,
                  const std::vector<GradCheckItem>& items, double step,
                  std::vector<GradCheckReport>* report) {
  double worst = 0.0;
  for (const auto& item : items) {
    require_same_shape(*item.value, *item.analytic, "grad_check");
    double item_worst = 0.0;
    for (std::size_t i = 0; i < item.value->size(); ++i) {
      double& p = item.value->data[i];
      const double old = p;
      p = old + step;
      const double lp = loss();
      p = old - step;
      const double lm = loss();
      p = old;
      const double numeric = (lp - lm) / (2.0 * step);
      const double analytic = item.analytic->data[i];
      const double denom =
          std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      item_worst = std::max(item_worst, std::fabs(analytic - numeric) / denom);
    }
    if (report) report->push_back({item.name, item_worst});
    worst = std::max(worst, item_worst);
  }
  return worst;
}

}  // namespace ocreplay
