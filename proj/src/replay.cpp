#include "ocreplay/replay.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace ocreplay::replay {

Matrix sample_prior(std::size_t n, std::size_t latent_dim, Rng& rng) {
  Matrix z(n, latent_dim);
  for (double& v : z.data) v = rng.normal();
  return z;
}

GeneratedSet generate_replay(const JointModel& frozen,
                             const evt::MetaRecognitionModel* meta,
                             const ReplayConfig& cfg, Rng& rng) {
  if (cfg.omega < 0.0 || cfg.omega > 1.0)
    throw std::invalid_argument("generate_replay: omega must be in [0, 1]");
  if (cfg.filtering && (meta == nullptr || meta->empty()))
    throw std::invalid_argument(
        "generate_replay: filtering requires a built meta model");
  if (cfg.batch == 0)
    throw std::invalid_argument("generate_replay: batch must be positive");

  GeneratedSet out;
  out.z_used = Matrix(cfg.replay_count, frozen.latent_dim);
  if (cfg.replay_count == 0) {
    out.x = Matrix(0, frozen.input_dim);
    return out;
  }

  const std::size_t budget = cfg.max_attempts_factor * cfg.replay_count;
  std::size_t accepted = 0, scored = 0, passed = 0;
  while (accepted < cfg.replay_count) {
    if (scored >= budget) {
      const double rate =
          scored ? static_cast<double>(passed) / static_cast<double>(scored)
                 : 0.0;
      throw std::runtime_error(
          "generate_replay: attempt budget exhausted after " +
          std::to_string(scored) + " draws (acceptance_rate " +
          std::to_string(rate) + "); the bound looks collapsed or "
          "mis-calibrated");
    }
    const Matrix block = sample_prior(cfg.batch, frozen.latent_dim, rng);
    scored += block.rows;
    for (std::size_t i = 0; i < block.rows; ++i) {
      bool keep = true;
      if (cfg.filtering) {
        const double w =
            evt::outlier_probability(*meta, block.row(i), frozen.latent_dim);
        keep = w <= cfg.omega;
      }
      if (!keep) continue;
      ++passed;
      if (accepted < cfg.replay_count) {
        double* dst = out.z_used.row(accepted);
        const double* src = block.row(i);
        std::copy(src, src + frozen.latent_dim, dst);
        ++accepted;
      }
    }
  }
  out.acceptance_rate =
      static_cast<double>(passed) / static_cast<double>(scored);

  out.x = frozen.decode(out.z_used);
  const Matrix logits = frozen.classify(out.z_used);
  out.y.resize(out.z_used.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const double* r = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols; ++j)
      if (r[j] > r[best]) best = j;
    out.y[i] = static_cast<int>(best);
  }
  return out;
}

MixedStream::MixedStream(const Batch& real, const GeneratedSet* generated,
                         std::size_t batch_size)
    : real_(&real), gen_(generated) {
  if (batch_size == 0)
    throw std::invalid_argument("MixedStream: batch_size must be positive");
  if (real.size() == 0)
    throw std::invalid_argument("MixedStream: empty real data");
  if (gen_ && gen_->size() == 0)
    throw std::invalid_argument(
        "MixedStream: replay requested with an empty generated set");
  half_ = gen_ ? std::max<std::size_t>(batch_size / 2, 1) : batch_size;
  steps_ = (real.size() + half_ - 1) / half_;
  real_order_.resize(real.size());
  std::iota(real_order_.begin(), real_order_.end(), 0);
  if (gen_) {
    gen_order_.resize(gen_->size());
    std::iota(gen_order_.begin(), gen_order_.end(), 0);
  }
}

namespace {
void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
}
}  // namespace

void MixedStream::begin_epoch(Rng& rng) {
  shuffle_indices(real_order_, rng);
  if (gen_) shuffle_indices(gen_order_, rng);
  step_ = 0;
  gen_cursor_ = 0;
}

bool MixedStream::next(Batch& real_half, Batch& replay_half) {
  if (step_ >= steps_) return false;
  const std::size_t begin = step_ * half_;
  const std::size_t end = std::min(begin + half_, real_->size());
  const std::size_t n = end - begin;

  real_half.x = Matrix(n, real_->x.cols);
  real_half.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = real_order_[begin + i];
    std::copy(real_->x.row(src), real_->x.row(src) + real_->x.cols,
              real_half.x.row(i));
    real_half.y[i] = real_->y[src];
  }

  if (gen_) {
    replay_half.x = Matrix(half_, gen_->x.cols);
    replay_half.y.resize(half_);
    for (std::size_t i = 0; i < half_; ++i) {
      if (gen_cursor_ >= gen_order_.size()) gen_cursor_ = 0;  // wrap
      const std::size_t src = gen_order_[gen_cursor_++];
      std::copy(gen_->x.row(src), gen_->x.row(src) + gen_->x.cols,
                replay_half.x.row(i));
      replay_half.y[i] = gen_->y[src];
    }
  } else {
    replay_half.x = Matrix();
    replay_half.y.clear();
  }
  ++step_;
  return true;
}

}  // namespace ocreplay::replay
