#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <zlib.h>

#include "ocreplay/data.hpp"

using namespace ocreplay;
using namespace ocreplay::data;

TEST_CASE("parse_idx_images decodes a hand-built file") {
  const std::vector<std::uint8_t> bytes = {
      0, 0, 8, 3,        // magic 0x00000803
      0, 0, 0, 1,        // one image
      0, 0, 0, 2,        // 2 rows
      0, 0, 0, 2,        // 2 cols
      0, 255, 128, 64,   // pixels
  };
  const IdxImages parsed = parse_idx_images(bytes);
  CHECK(parsed.img_rows == 2);
  CHECK(parsed.img_cols == 2);
  REQUIRE(parsed.images.rows == 1);
  REQUIRE(parsed.images.cols == 4);
  CHECK(parsed.images(0, 0) == 0.0);
  CHECK(parsed.images(0, 1) == 1.0);
  CHECK(parsed.images(0, 2) == doctest::Approx(128.0 / 255.0));
  CHECK(parsed.images(0, 3) == doctest::Approx(64.0 / 255.0));
}

TEST_CASE("idx error paths name the byte offset") {
  SUBCASE("wrong magic") {
    const std::vector<std::uint8_t> bytes = {0, 0, 8, 1, 0, 0, 0, 1,
                                             0, 0, 0, 1, 0, 0, 0, 1, 42};
    CHECK_THROWS_WITH_AS(parse_idx_images(bytes),
                         doctest::Contains("offset 0"), std::runtime_error);
  }
  SUBCASE("truncated payload never yields partial data") {
    // header promises 2 images of 2x2 pixels but only 3 payload bytes follow
    std::vector<std::uint8_t> bytes = {0, 0, 8, 3, 0, 0, 0, 2,
                                       0, 0, 0, 2, 0, 0, 0, 2};
    for (std::uint8_t v : {1, 2, 3}) bytes.push_back(v);
    CHECK_THROWS_WITH_AS(parse_idx_images(bytes),
                         doctest::Contains("truncated"), std::runtime_error);
  }
  SUBCASE("labels use their own magic") {
    const std::vector<std::uint8_t> bytes = {0, 0, 8, 3, 0, 0, 0, 0};
    CHECK_THROWS_AS(parse_idx_labels(bytes), std::runtime_error);
  }
  SUBCASE("trailing garbage is rejected") {
    std::vector<std::uint8_t> bytes = {0, 0, 8, 1, 0, 0, 0, 2, 5, 9, 77};
    CHECK_THROWS_AS(parse_idx_labels(bytes), std::runtime_error);
  }
}

TEST_CASE("idx write -> parse round-trips exactly") {
  Rng rng(1);
  Matrix images(7, 12);
  for (double& v : images.data)
    v = static_cast<double>(rng.uniform_index(256)) / 255.0;
  const auto bytes = write_idx_images(images, 3, 4);
  const IdxImages parsed = parse_idx_images(bytes);
  CHECK(parsed.img_rows == 3);
  CHECK(parsed.img_cols == 4);
  for (std::size_t i = 0; i < images.size(); ++i)
    CHECK(parsed.images.data[i] == images.data[i]);
  CHECK(write_idx_images(parsed.images, 3, 4) == bytes);

  std::vector<int> labels = {0, 3, 9, 1, 255};
  CHECK(parse_idx_labels(write_idx_labels(labels)) == labels);
}

TEST_CASE("gzip-compressed idx files load transparently") {
  Rng rng(2);
  Matrix images(3, 4);
  for (double& v : images.data)
    v = static_cast<double>(rng.uniform_index(256)) / 255.0;
  const auto raw = write_idx_images(images, 2, 2);

  // gzip the buffer with zlib
  std::vector<std::uint8_t> gz(raw.size() + 128);
  z_stream strm{};
  REQUIRE(deflateInit2(&strm, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS,
                       8, Z_DEFAULT_STRATEGY) == Z_OK);
  strm.next_in = const_cast<Bytef*>(raw.data());
  strm.avail_in = static_cast<uInt>(raw.size());
  strm.next_out = gz.data();
  strm.avail_out = static_cast<uInt>(gz.size());
  REQUIRE(deflate(&strm, Z_FINISH) == Z_STREAM_END);
  gz.resize(gz.size() - strm.avail_out);
  deflateEnd(&strm);

  const std::string path = "test_data_images.gz";
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(gz.data()),
             static_cast<std::streamsize>(gz.size()));
  const auto loaded = read_file_maybe_gzip(path);
  std::filesystem::remove(path);
  CHECK(loaded == raw);
}

namespace {

// independent oracle: one-vs-rest least-squares linear classifier solved by
// Gaussian elimination on the normal equations
std::vector<int> linear_fit_predict(const Matrix& x,
                                    const std::vector<int>& y,
                                    std::size_t classes) {
  const std::size_t n = x.rows, d = x.cols + 1;
  // A = X~^T X~, B = X~^T Y (with bias column)
  std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> b(d, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> xi(d, 1.0);
    for (std::size_t j = 0; j < x.cols; ++j) xi[j] = x(i, j);
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = 0; q < d; ++q) a[p][q] += xi[p] * xi[q];
      b[p][static_cast<std::size_t>(y[i])] += xi[p];
    }
  }
  for (std::size_t p = 0; p < d; ++p) a[p][p] += 1e-9;
  // solve A W = B
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t q = 0; q < d; ++q) a[r][q] -= f * a[col][q];
      for (std::size_t q = 0; q < classes; ++q) b[r][q] -= f * b[col][q];
    }
  }
  std::vector<std::vector<double>> w(d, std::vector<double>(classes));
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = 0; q < classes; ++q) w[p][q] = b[p][q] / a[p][p];

  std::vector<int> preds(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
      double s = w[d - 1][c];
      for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * w[j][c];
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    preds[i] = static_cast<int>(best);
  }
  return preds;
}

}  // namespace

TEST_CASE("make_blobs produces separable, bounded, deterministic data") {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.points_per_class = 100;
  spec.dim = 2;
  spec.center_separation = 0.5;
  spec.cluster_sigma = 0.02;

  Rng rng(11);
  const LabeledDataset ds = make_blobs(spec, rng);
  CHECK(ds.size() == 400);
  for (double v : ds.images.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (int y : ds.labels) {
    CHECK(y >= 0);
    CHECK(y < 4);
  }

  // a linear one-vs-rest fit separates the clusters perfectly
  const auto preds = linear_fit_predict(ds.images, ds.labels, 4);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    correct += preds[i] == ds.labels[i];
  CHECK(correct == ds.size());

  SUBCASE("sigma -> 0 collapses every point onto its center") {
    SyntheticSpec tight = spec;
    tight.cluster_sigma = 0.0;
    Rng r2(12);
    const LabeledDataset point = make_blobs(tight, r2);
    std::map<int, std::vector<double>> first;
    for (std::size_t i = 0; i < point.size(); ++i) {
      auto& f = first[point.labels[i]];
      if (f.empty())
        f.assign(point.images.row(i), point.images.row(i) + 2);
      else
        for (int j = 0; j < 2; ++j) CHECK(point.images(i, j) == f[j]);
    }
  }

  SUBCASE("seeded determinism") {
    Rng a(13), b(13);
    const LabeledDataset da = make_blobs(spec, a);
    const LabeledDataset db = make_blobs(spec, b);
    for (std::size_t i = 0; i < da.images.size(); ++i)
      CHECK(da.images.data[i] == db.images.data[i]);
  }
}

TEST_CASE("train_val_split is stratified, disjoint and exhaustive") {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.points_per_class = 250;
  spec.dim = 3;
  Rng rng(21);
  const LabeledDataset ds = make_blobs(spec, rng);

  Rng split_rng(22);
  const auto [train, val] = train_val_split(ds, 0.05, split_rng);
  CHECK(train.size() + val.size() == ds.size());
  CHECK(val.size() == 4 * 13);  // round(0.05 * 250) = 13 per class

  // per-class proportions preserved within one sample
  std::map<int, int> val_counts;
  for (int y : val.labels) ++val_counts[y];
  for (const auto& [cls, count] : val_counts)
    CHECK(std::abs(count - 13) <= 1);

  // disjoint and exhaustive: per-class sample multisets match exactly
  auto rows_of = [](const LabeledDataset& d) {
    std::multiset<std::vector<double>> rows;
    for (std::size_t i = 0; i < d.size(); ++i)
      rows.insert(std::vector<double>(d.images.row(i), d.images.row(i) + 3));
    return rows;
  };
  auto all = rows_of(ds);
  auto tr = rows_of(train);
  auto va = rows_of(val);
  for (const auto& r : va) {
    CHECK(tr.count(r) == 0);
    all.erase(all.find(r));
  }
  for (const auto& r : tr) all.erase(all.find(r));
  CHECK(all.empty());

  SUBCASE("deterministic under the seed") {
    Rng a(30), b(30);
    const auto [t1, v1] = train_val_split(ds, 0.1, a);
    const auto [t2, v2] = train_val_split(ds, 0.1, b);
    CHECK(v1.labels == v2.labels);
    for (std::size_t i = 0; i < v1.images.size(); ++i)
      CHECK(v1.images.data[i] == v2.images.data[i]);
  }

  SUBCASE("a class with fewer than 2 samples is an error") {
    LabeledDataset tiny;
    tiny.images = Matrix(3, 2, 0.5);
    tiny.labels = {0, 0, 1};
    Rng r(1);
    CHECK_THROWS_AS(train_val_split(tiny, 0.5, r), std::runtime_error);
  }
}
