#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "ocreplay/matrix.hpp"
#include "ocreplay/nn.hpp"
#include "ocreplay/rng.hpp"

using namespace ocreplay;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = (rng.uniform() * 2.0 - 1.0) * scale;
  return m;
}

// independent oracle: naive triple loop
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j)
      for (std::size_t k = 0; k < a.cols; ++k)
        c(i, j) += a(i, k) * b(k, j);
  return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(a.data[i] - b.data[i]));
  return worst;
}

}  // namespace

TEST_CASE("rng is seed-deterministic and well distributed") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double sum = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.02);

  Rng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("rng state round-trips through save/restore") {
  Rng a(123);
  for (int i = 0; i < 17; ++i) a.normal();  // leaves a cached value
  const Rng::State st = a.state();
  Rng b(0);
  b.restore(st);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
}

TEST_CASE("dense_forward hand examples") {
  const Matrix x{{1, 0}};
  const Matrix w{{2, 0}, {0, 3}};
  const Matrix b{{1, 1}};
  const Matrix y = dense_forward(x, w, b);
  CHECK(y(0, 0) == doctest::Approx(3.0));
  CHECK(y(0, 1) == doctest::Approx(1.0));

  // identity in, zero bias: returns w itself
  Rng rng(1);
  const Matrix w2 = random_matrix(2, 4, rng);
  const Matrix eye{{1, 0}, {0, 1}};
  const Matrix zero(1, 4, 0.0);
  CHECK(max_abs_diff(dense_forward(eye, w2, zero), w2) == 0.0);
}

TEST_CASE("dense_forward matches the triple-loop oracle") {
  Rng rng(11);
  const Matrix x = random_matrix(4, 5, rng);
  const Matrix w = random_matrix(5, 3, rng);
  const Matrix b = random_matrix(1, 3, rng);
  Matrix expected = matmul_oracle(x, w);
  for (std::size_t i = 0; i < expected.rows; ++i)
    for (std::size_t j = 0; j < expected.cols; ++j)
      expected(i, j) += b(0, j);
  CHECK(max_abs_diff(dense_forward(x, w, b), expected) < 1e-12);
}

TEST_CASE("matmul variants agree with the oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = random_matrix(7, 9, rng);
    const Matrix b = random_matrix(9, 6, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);
    const Matrix b2 = random_matrix(7, 6, rng);
    CHECK(max_abs_diff(matmul_at_b(a, b2), matmul_oracle(transpose(a), b2)) <
          1e-12);
    const Matrix d = random_matrix(6, 9, rng);
    CHECK(max_abs_diff(matmul_a_bt(a, d), matmul_oracle(a, transpose(d))) <
          1e-12);
  }
}

TEST_CASE("shape mismatches are hard errors naming both shapes") {
  const Matrix x(2, 3), w(4, 5), b(1, 5);
  CHECK_THROWS_WITH_AS(dense_forward(x, w, b),
                       doctest::Contains("2x3"), std::invalid_argument);
  CHECK_THROWS_AS(matmul(x, w), std::invalid_argument);
}

TEST_CASE("dense_backward analytic formulas") {
  SUBCASE("zero upstream gradient") {
    Rng rng(3);
    const Matrix x = random_matrix(3, 4, rng);
    const Matrix w = random_matrix(4, 2, rng);
    const Matrix gy(3, 2, 0.0);
    const DenseGrads g = dense_backward(x, w, gy);
    for (double v : g.x.data) CHECK(v == 0.0);
    for (double v : g.w.data) CHECK(v == 0.0);
    for (double v : g.b.data) CHECK(v == 0.0);
  }
  SUBCASE("scalar chain rule") {
    const Matrix x{{2}}, w{{3}}, gy{{1}};
    const DenseGrads g = dense_backward(x, w, gy);
    CHECK(g.w(0, 0) == doctest::Approx(2.0));
    CHECK(g.x(0, 0) == doctest::Approx(3.0));
    CHECK(g.b(0, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("activation pointwise examples") {
  const Matrix s = softmax_rows(Matrix{{0, 0}});
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(0, 1) == doctest::Approx(0.5));

  const Matrix r = relu(Matrix{{-1, 2}});
  CHECK(r(0, 0) == 0.0);
  CHECK(r(0, 1) == 2.0);

  CHECK(sigmoid(Matrix{{0}})(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("softmax rows sum to one with entries in (0,1]") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = random_matrix(4, 7, rng, 30.0);
    const Matrix y = softmax_rows(x);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) {
        CHECK(y(i, j) > 0.0);
        CHECK(y(i, j) <= 1.0);
        sum += y(i, j);
      }
      CHECK(std::fabs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("every exported backward pass agrees with finite differences") {
  // property over 20 seeds; loss = sum(c .* f(x)) with fixed random c
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Matrix x = random_matrix(3, 5, rng);
    const Matrix c = random_matrix(3, 5, rng);

    {
      const Matrix analytic = relu_backward(x, c);
      auto loss = [&]() {
        const Matrix y = relu(x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += c.data[i] * y.data[i];
        return s;
      };
      CHECK(grad_check(loss, {{&x, &analytic, "relu.x"}}, 1e-6) < 1e-4);
    }
    {
      const Matrix analytic = sigmoid_backward(sigmoid(x), c);
      auto loss = [&]() {
        const Matrix y = sigmoid(x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += c.data[i] * y.data[i];
        return s;
      };
      CHECK(grad_check(loss, {{&x, &analytic, "sigmoid.x"}}, 1e-6) < 1e-4);
    }
    {
      const Matrix analytic = softmax_rows_backward(softmax_rows(x), c);
      auto loss = [&]() {
        const Matrix y = softmax_rows(x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += c.data[i] * y.data[i];
        return s;
      };
      CHECK(grad_check(loss, {{&x, &analytic, "softmax.x"}}, 1e-6) < 1e-4);
    }
    {
      Matrix w = random_matrix(5, 4, rng);
      Matrix b = random_matrix(1, 4, rng);
      const Matrix cy = random_matrix(3, 4, rng);
      const DenseGrads g = dense_backward(x, w, cy);
      auto loss = [&]() {
        const Matrix y = dense_forward(x, w, b);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += cy.data[i] * y.data[i];
        return s;
      };
      const double err = grad_check(
          loss,
          {{&x, &g.x, "dense.x"}, {&w, &g.w, "dense.w"}, {&b, &g.b, "dense.b"}},
          1e-6);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("adam first step with unit gradient") {
  Matrix p(2, 2, 1.0);
  const Matrix g(2, 2, 1.0);
  AdamState st(2, 2);
  adam_step(p, g, st, AdamParams{}, "p");
  // bias-corrected first step: -lr * 1 / (1 + eps)
  const double expected = 1.0 - 0.001 / (1.0 + 1e-8);
  for (double v : p.data) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  CHECK(st.step_count == 1);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Matrix p{{0.3, -0.7}};
  const Matrix p0 = p;
  const Matrix g(1, 2, 0.0);
  AdamState st(1, 2);
  adam_step(p, g, st, AdamParams{}, "p");
  CHECK(max_abs_diff(p, p0) == 0.0);
}

TEST_CASE("adam matches a hand-unrolled three-step recurrence") {
  const AdamParams hp;
  Matrix p{{0.5}};
  AdamState st(1, 1);
  const double grads[3] = {0.4, -0.2, 0.9};

  // independent oracle: scalar recurrence unrolled by hand
  double m = 0.0, v = 0.0, ref = 0.5;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    m = hp.beta1 * m + (1 - hp.beta1) * g;
    v = hp.beta2 * v + (1 - hp.beta2) * g * g;
    const double mhat = m / (1 - std::pow(hp.beta1, t));
    const double vhat = v / (1 - std::pow(hp.beta2, t));
    ref -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);

    Matrix gm{{g}};
    adam_step(p, gm, st, hp, "p");
  }
  CHECK(std::fabs(p(0, 0) - ref) < 1e-12);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  Matrix p{{1.0}};
  Matrix g{{std::nan("")}};
  AdamState st(1, 1);
  CHECK_THROWS_WITH_AS(adam_step(p, g, st, AdamParams{}, "enc1.w"),
                       doctest::Contains("enc1.w"), std::runtime_error);
}

TEST_CASE("matmul results are bit-identical for any thread count") {
  Rng rng(23);
  const Matrix a = random_matrix(37, 53, rng);
  const Matrix b = random_matrix(53, 29, rng);
  const Matrix g = random_matrix(37, 29, rng);
  set_num_threads(1);
  const Matrix c1 = matmul(a, b);
  const Matrix w1 = matmul_at_b(a, g);
  const Matrix x1 = matmul_a_bt(g, b);
  set_num_threads(4);
  const Matrix c4 = matmul(a, b);
  const Matrix w4 = matmul_at_b(a, g);
  const Matrix x4 = matmul_a_bt(g, b);
  set_num_threads(1);
  CHECK(max_abs_diff(c1, c4) == 0.0);
  CHECK(max_abs_diff(w1, w4) == 0.0);
  CHECK(max_abs_diff(x1, x4) == 0.0);
}

TEST_CASE("adam is deterministic given identical inputs and state") {
  Rng rng(21);
  const Matrix g = random_matrix(4, 3, rng);
  Matrix p1 = random_matrix(4, 3, rng);
  Matrix p2 = p1;
  AdamState s1(4, 3), s2(4, 3);
  for (int i = 0; i < 5; ++i) {
    adam_step(p1, g, s1, AdamParams{}, "p");
    adam_step(p2, g, s2, AdamParams{}, "p");
  }
  CHECK(max_abs_diff(p1, p2) == 0.0);
}

TEST_CASE("he_normal_init sampling statistics") {
  auto sample_stats = [](std::size_t fan_in, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix m = he_normal_init(200, 500, fan_in, rng);  // 1e5 draws
    double sum = 0.0, sq = 0.0;
    for (double v : m.data) {
      sum += v;
      sq += v * v;
    }
    const double n = static_cast<double>(m.size());
    const double mean = sum / n;
    return std::pair{mean, sq / n - mean * mean};
  };

  {
    const auto [mean, var] = sample_stats(60, 3);
    const double want = 2.0 / 60.0;
    CHECK(std::fabs(std::sqrt(var) - std::sqrt(want)) < 0.05 * std::sqrt(want));
    CHECK(std::fabs(mean) < 3.0 * std::sqrt(want) / std::sqrt(1e5));
    CHECK(std::fabs(var - want) < 0.05 * want);
  }
  {
    const auto stats = sample_stats(2, 4);
    CHECK(std::fabs(std::sqrt(stats.second) - 1.0) < 0.05);
  }

  Rng a(99), b(99);
  CHECK(max_abs_diff(he_normal_init(7, 9, 7, a), he_normal_init(7, 9, 7, b)) ==
        0.0);
}

TEST_CASE("grad_check sanity") {
  SUBCASE("exact for quadratics up to round-off") {
    Rng rng(13);
    Matrix p = random_matrix(2, 6, rng);
    Matrix analytic = p;  // d/dp of 0.5 * ||p||^2
    auto loss = [&]() {
      double s = 0.0;
      for (double v : p.data) s += 0.5 * v * v;
      return s;
    };
    CHECK(grad_check(loss, {{&p, &analytic, "p"}}, 1e-5) < 1e-8);
  }
  SUBCASE("a doubled gradient is detected at relative error 0.5") {
    Rng rng(14);
    Matrix p = random_matrix(1, 4, rng);
    Matrix corrupted = p;
    for (double& v : corrupted.data) v *= 2.0;
    auto loss = [&]() {
      double s = 0.0;
      for (double v : p.data) s += 0.5 * v * v;
      return s;
    };
    std::vector<GradCheckReport> report;
    const double err =
        grad_check(loss, {{&p, &corrupted, "p"}}, 1e-5, &report);
    CHECK(err == doctest::Approx(0.5).epsilon(1e-3));
    REQUIRE(report.size() == 1);
    CHECK(report[0].name == "p");
  }
}
