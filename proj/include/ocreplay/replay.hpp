#pragma once

#include <cstddef>
#include <vector>

#include "ocreplay/evt.hpp"
#include "ocreplay/joint_model.hpp"
#include "ocreplay/matrix.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay::replay {

struct ReplayConfig {
  double omega = 0.01;                  // rejection prior
  std::size_t replay_count = 0;         // accepted samples to produce
  std::size_t max_attempts_factor = 100;
  std::size_t batch = 128;              // prior draws per scoring block
  bool filtering = true;                // false: naive prior sampling
};

struct GeneratedSet {
  Matrix x;                     // n x input_dim, decoder mean probabilities
  std::vector<int> y;           // argmax of classify(z)
  Matrix z_used;                // n x latent_dim
  double acceptance_rate = 1.0; // passes / scored prior draws

  std::size_t size() const { return x.rows; }
};

// n x latent_dim of i.i.d. standard normal entries.
Matrix sample_prior(std::size_t n, std::size_t latent_dim, Rng& rng);

// Draws prior batches, scores outlier probabilities on z before any
// decoding, keeps rows with omega <= cfg.omega (all rows when filtering is
// off), and decodes and labels only the kept rows. Throws when the attempt
// budget max_attempts_factor * replay_count is exhausted, reporting the
// acceptance rate.
GeneratedSet generate_replay(const JointModel& frozen,
                             const evt::MetaRecognitionModel* meta,
                             const ReplayConfig& cfg, Rng& rng);

// Epoch iterator that pairs one half-batch of real data with one half-batch
// of generated data per step so the loss realizes the equal real/replay
// weighting. Without a generated set it degenerates to plain full batches
// of real data.
class MixedStream {
 public:
  MixedStream(const Batch& real, const GeneratedSet* generated,
              std::size_t batch_size);

  std::size_t steps_per_epoch() const { return steps_; }
  bool has_replay() const { return gen_ != nullptr; }

  // Reshuffles both halves; call once per epoch.
  void begin_epoch(Rng& rng);
  // Fills the next pair of half-batches. replay_half is left empty when
  // there is no generated set. Returns false at the end of the epoch.
  bool next(Batch& real_half, Batch& replay_half);

 private:
  const Batch* real_;
  const GeneratedSet* gen_;
  std::size_t half_;
  std::size_t steps_;
  std::size_t step_ = 0;
  std::size_t gen_cursor_ = 0;
  std::vector<std::size_t> real_order_;
  std::vector<std::size_t> gen_order_;
};

}  // namespace ocreplay::replay
