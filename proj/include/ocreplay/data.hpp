#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ocreplay/matrix.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay::data {

struct LabeledDataset {
  Matrix images;             // n x pixels, entries in [0, 1]
  std::vector<int> labels;   // class ids, one per image
  std::string name;
  std::size_t img_rows = 1;  // image geometry, pixels = img_rows * img_cols
  std::size_t img_cols = 0;

  std::size_t size() const { return images.rows; }
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t points_per_class = 100;
  std::size_t dim = 2;
  double center_separation = 0.5;
  double cluster_sigma = 0.05;
};

// IDX decoding. Images scale pixel bytes by 1/255 into [0, 1]. Errors name
// the byte offset.
struct IdxImages {
  Matrix images;
  std::size_t img_rows, img_cols;
};
IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes);
std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes);

// IDX encoding, the inverse of the parsers above.
std::vector<std::uint8_t> write_idx_images(const Matrix& images,
                                           std::size_t img_rows,
                                           std::size_t img_cols);
std::vector<std::uint8_t> write_idx_labels(const std::vector<int>& labels);

// Reads a file, transparently inflating gzip payloads (0x1f 0x8b prefix).
std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path);

LabeledDataset load_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                const std::string& name);

// Gaussian clusters at deterministic lattice points scaled by the
// separation, clamped into [0, 1] per coordinate.
LabeledDataset make_blobs(const SyntheticSpec& spec, Rng& rng);

// Stratified by class, deterministic under the rng seed. The pair is
// (train, val); outputs are disjoint and exhaustive.
std::pair<LabeledDataset, LabeledDataset> train_val_split(
    const LabeledDataset& ds, double val_fraction, Rng& rng);

}  // namespace ocreplay::data
