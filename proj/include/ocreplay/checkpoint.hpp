#pragma once

#include <string>

#include "ocreplay/joint_model.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay {

// Versioned binary container for all weight matrices, beta, dimensions,
// Adam states and the rng state. Round trips are bit-exact.
void save_checkpoint(const std::string& path, const JointModel& model,
                     const JointTrainer& trainer, const Rng& rng);

struct Checkpoint {
  JointModel model;
  AdamParams adam;
  std::vector<AdamState> states;
  Rng::State rng_state;
};

Checkpoint load_checkpoint(const std::string& path);

// Rebuilds a trainer whose optimizer slots come from the checkpoint.
JointTrainer make_trainer(Checkpoint& ckpt);

}  // namespace ocreplay
