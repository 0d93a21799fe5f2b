#include "ocreplay/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include <zlib.h>

namespace ocreplay::data {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32_be(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    require(n, what);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  void require(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size())
      throw std::runtime_error(std::string("idx: truncated reading ") + what +
                               " at byte offset " + std::to_string(pos_) +
                               " (file has " + std::to_string(bytes_.size()) +
                               " bytes)");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void push_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in,
                                 const std::string& path) {
  z_stream strm{};
  if (inflateInit2(&strm, 16 + MAX_WBITS) != Z_OK)
    throw std::runtime_error("gzip: inflateInit failed for " + path);
  std::vector<std::uint8_t> out;
  out.resize(std::max<std::size_t>(in.size() * 4, 1 << 16));
  strm.next_in = const_cast<Bytef*>(in.data());
  strm.avail_in = static_cast<uInt>(in.size());
  std::size_t written = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    strm.next_out = out.data() + written;
    strm.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&strm, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&strm);
      throw std::runtime_error("gzip: corrupt stream in " + path);
    }
    written = out.size() - strm.avail_out;
  }
  inflateEnd(&strm);
  out.resize(written);
  return out;
}

}  // namespace

IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  const std::uint32_t magic = r.u32_be("magic");
  if (magic != kImagesMagic) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", magic);
    throw std::runtime_error(std::string("idx: bad image magic ") + buf +
                             " at byte offset 0 (expected 0x00000803)");
  }
  const std::uint32_t n = r.u32_be("image count");
  const std::uint32_t rows = r.u32_be("row count");
  const std::uint32_t cols = r.u32_be("column count");
  if (rows == 0 || cols == 0)
    throw std::runtime_error("idx: zero image dimensions at byte offset 8");
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  const std::uint8_t* payload =
      r.take(static_cast<std::size_t>(n) * pixels, "pixel payload");
  if (r.pos() != bytes.size())
    throw std::runtime_error("idx: " +
                             std::to_string(bytes.size() - r.pos()) +
                             " trailing bytes at offset " +
                             std::to_string(r.pos()));

  IdxImages out;
  out.img_rows = rows;
  out.img_cols = cols;
  out.images = Matrix(n, pixels);
  for (std::size_t i = 0; i < out.images.size(); ++i)
    out.images.data[i] = static_cast<double>(payload[i]) / 255.0;
  return out;
}

std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  const std::uint32_t magic = r.u32_be("magic");
  if (magic != kLabelsMagic) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", magic);
    throw std::runtime_error(std::string("idx: bad label magic ") + buf +
                             " at byte offset 0 (expected 0x00000801)");
  }
  const std::uint32_t n = r.u32_be("label count");
  const std::uint8_t* payload = r.take(n, "label payload");
  if (r.pos() != bytes.size())
    throw std::runtime_error("idx: " +
                             std::to_string(bytes.size() - r.pos()) +
                             " trailing bytes at offset " +
                             std::to_string(r.pos()));
  std::vector<int> labels(n);
  for (std::uint32_t i = 0; i < n; ++i) labels[i] = payload[i];
  return labels;
}

std::vector<std::uint8_t> write_idx_images(const Matrix& images,
                                           std::size_t img_rows,
                                           std::size_t img_cols) {
  if (img_rows * img_cols != images.cols)
    throw std::invalid_argument("write_idx_images: geometry mismatch");
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.size());
  push_u32_be(out, kImagesMagic);
  push_u32_be(out, static_cast<std::uint32_t>(images.rows));
  push_u32_be(out, static_cast<std::uint32_t>(img_rows));
  push_u32_be(out, static_cast<std::uint32_t>(img_cols));
  for (double v : images.data)
    out.push_back(static_cast<std::uint8_t>(
        std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

std::vector<std::uint8_t> write_idx_labels(const std::vector<int>& labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  push_u32_be(out, kLabelsMagic);
  push_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  for (int v : labels) {
    if (v < 0 || v > 255)
      throw std::invalid_argument("write_idx_labels: label out of byte range");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
    return gunzip(bytes, path);
  return bytes;
}

LabeledDataset load_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                const std::string& name) {
  IdxImages imgs = parse_idx_images(read_file_maybe_gzip(images_path));
  std::vector<int> labels = parse_idx_labels(read_file_maybe_gzip(labels_path));
  if (labels.size() != imgs.images.rows)
    throw std::runtime_error("idx: " + std::to_string(imgs.images.rows) +
                             " images but " + std::to_string(labels.size()) +
                             " labels (" + name + ")");
  LabeledDataset ds;
  ds.images = std::move(imgs.images);
  ds.labels = std::move(labels);
  ds.name = name;
  ds.img_rows = imgs.img_rows;
  ds.img_cols = imgs.img_cols;
  return ds;
}

LabeledDataset make_blobs(const SyntheticSpec& spec, Rng& rng) {
  if (spec.num_classes == 0 || spec.points_per_class == 0 || spec.dim == 0)
    throw std::invalid_argument("make_blobs: counts must be positive");
  if (spec.center_separation <= 0.0 || spec.cluster_sigma < 0.0)
    throw std::invalid_argument("make_blobs: invalid separation or sigma");

  // Class centers sit on a line (1-D) or a square grid (higher dims) around
  // 0.5, spaced by the separation; extra coordinates stay at 0.5.
  std::vector<std::vector<double>> centers(spec.num_classes,
                                           std::vector<double>(spec.dim, 0.5));
  if (spec.dim == 1) {
    const double mid = (static_cast<double>(spec.num_classes) - 1.0) / 2.0;
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      centers[c][0] =
          0.5 + spec.center_separation * (static_cast<double>(c) - mid);
  } else {
    const std::size_t g = static_cast<std::size_t>(
        std::ceil(std::sqrt(static_cast<double>(spec.num_classes))));
    const double mid = (static_cast<double>(g) - 1.0) / 2.0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      centers[c][0] = 0.5 + spec.center_separation *
                                (static_cast<double>(c % g) - mid);
      centers[c][1] = 0.5 + spec.center_separation *
                                (static_cast<double>(c / g) - mid);
    }
  }

  LabeledDataset ds;
  ds.name = "blobs";
  ds.img_rows = 1;
  ds.img_cols = spec.dim;
  ds.images = Matrix(spec.num_classes * spec.points_per_class, spec.dim);
  ds.labels.resize(ds.images.rows);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t p = 0; p < spec.points_per_class; ++p, ++row) {
      double* dst = ds.images.row(row);
      for (std::size_t j = 0; j < spec.dim; ++j)
        dst[j] = std::clamp(centers[c][j] + spec.cluster_sigma * rng.normal(),
                            0.0, 1.0);
      ds.labels[row] = static_cast<int>(c);
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> train_val_split(
    const LabeledDataset& ds, double val_fraction, Rng& rng) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw std::invalid_argument("train_val_split: fraction must be in (0, 1)");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    by_class[ds.labels[i]].push_back(i);

  std::vector<char> is_val(ds.size(), 0);
  for (auto& [cls, idx] : by_class) {
    if (idx.size() < 2)
      throw std::runtime_error("train_val_split: class " +
                               std::to_string(cls) +
                               " has fewer than 2 samples");
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
    std::size_t take = static_cast<std::size_t>(std::lround(
        val_fraction * static_cast<double>(idx.size())));
    take = std::clamp<std::size_t>(take, 1, idx.size() - 1);
    for (std::size_t i = 0; i < take; ++i) is_val[idx[i]] = 1;
  }

  auto subset = [&](bool val) {
    LabeledDataset out;
    out.name = ds.name + (val ? "/val" : "/train");
    out.img_rows = ds.img_rows;
    out.img_cols = ds.img_cols;
    std::size_t n = 0;
    for (char f : is_val) n += (f == (val ? 1 : 0));
    out.images = Matrix(n, ds.images.cols);
    out.labels.resize(n);
    std::size_t row = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if ((is_val[i] == 1) != val) continue;
      std::copy(ds.images.row(i), ds.images.row(i) + ds.images.cols,
                out.images.row(row));
      out.labels[row] = ds.labels[i];
      ++row;
    }
    return out;
  };
  return {subset(false), subset(true)};
}

}  // namespace ocreplay::data
