#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ocreplay/data.hpp"
#include "ocreplay/evt.hpp"
#include "ocreplay/joint_model.hpp"
#include "ocreplay/replay.hpp"

namespace ocreplay::continual {

enum class ModeKind { ISO, UB, LB, CDVAE, OCDVAE, DUAL };

struct Mode {
  ModeKind kind = ModeKind::OCDVAE;
  bool intro = false;            // introspective training of the joint model
  bool dual_evt_filter = false;  // EVT-filtered replay for the dual baseline
};

ModeKind parse_mode(const std::string& name);
std::string mode_name(ModeKind kind);

struct Task {
  Batch train, val, test;
  std::vector<int> class_ids;  // global ids covered by this task
};

struct TaskSequence {
  std::vector<Task> tasks;
  std::size_t total_classes = 0;
  std::size_t input_dim = 0;
  std::size_t img_rows = 1, img_cols = 0;
};

// Deterministic class-incremental split in ascending class order; the last
// task takes the remainder. Class ids are remapped to contiguous global ids.
TaskSequence split_classes(const data::LabeledDataset& train,
                           const data::LabeledDataset& test,
                           std::size_t classes_per_task, double val_fraction,
                           Rng& rng);

// Tasks from whole datasets in sequence order, class ids offset so the
// global space stays contiguous and disjoint.
TaskSequence cross_dataset_sequence(
    const std::vector<std::pair<data::LabeledDataset, data::LabeledDataset>>&
        train_test_pairs,
    double val_fraction, Rng& rng);

struct MetricsRecord {
  std::size_t t = 0;             // increment index, 1-based
  std::size_t classes_seen = 0;
  double alpha_base = 0.0, alpha_new = 0.0, alpha_all = 0.0;
  // reconstruction NLL, nats per image and nats per pixel (both kept)
  double gamma_base = 0.0, gamma_new = 0.0, gamma_all = 0.0;
  double gamma_base_px = 0.0, gamma_new_px = 0.0, gamma_all_px = 0.0;
  double kl_all = 0.0;           // nats per latent dimension
};

// Separate generative and discriminative networks for the dual baseline.
// The discriminative half is a two-hidden-layer MLP on raw input.
struct DiscNet {
  Dense l1, l2, out;
  std::size_t input_dim = 0, hidden = 0, num_classes = 0;

  DiscNet() = default;
  DiscNet(std::size_t input_dim, std::size_t hidden, std::size_t num_classes,
          Rng& rng);
  Matrix logits(const Matrix& x) const;
  std::vector<int> predict(const Matrix& x) const;
  void expand(std::size_t new_num_classes, Rng& rng);
};

struct DualModel {
  JointModel generative;  // trained with class weight 0
  DiscNet discriminative;
};

struct ExperimentConfig {
  Mode mode;
  std::size_t latent_dim = 60;
  std::size_t hidden = 400;
  double beta = 0.1;
  double denoise_sigma = 0.25;
  double intro_margin = 1.0;
  AdamParams adam;

  replay::ReplayConfig replay;      // replay_count 0 = previous-total policy
  bool replay_count_fixed = false;  // true: use replay.replay_count as given
  double tail_fraction = 0.05;
  std::size_t min_tail_count = 10;

  std::size_t epochs_per_task = 20;
  std::size_t batch = 128;
  std::size_t eval_samples = 100;
  std::uint64_t seed = 1;
};

struct ExperimentResult {
  std::vector<MetricsRecord> metrics;
  JointModel model;                      // joint model (or dual generative)
  std::optional<DiscNet> discriminative; // dual mode only
  // In filtering modes the meta model from the final task boundary; in the
  // other modes built once at run end for export. A failed build aborts the
  // run only in filtering modes; otherwise the reason lands here.
  std::optional<evt::MetaRecognitionModel> meta;
  std::string meta_build_error;
  Matrix confusion;                      // final counts, true x predicted
  std::vector<double> acceptance_rates;  // one per replay generation
};

ExperimentResult run_experiment(const TaskSequence& seq,
                                const ExperimentConfig& cfg);

// Metrics over tasks 1..upto_task. Classification predicts by the argmax of
// the mean softmax over `samples` posterior draws; inputs are clean.
MetricsRecord evaluate(const JointModel& model, const TaskSequence& seq,
                       std::size_t upto_task, std::size_t samples, Rng& rng);

// Dual-mode variant: accuracy from the discriminative net, reconstruction
// and KL from the generative model.
MetricsRecord evaluate_dual(const DualModel& dual, const TaskSequence& seq,
                            std::size_t upto_task, std::size_t samples,
                            Rng& rng);

struct OpensetRow {
  std::string criterion;  // "entropy" | "reconstruction" | "evt"
  std::string dataset;
  double threshold = 0.0;
  double percent_flagged = 0.0;
};
struct OmegaCurvePoint {
  double omega = 0.0;
  std::string dataset;
  double fraction_flagged = 0.0;
};
struct OpensetReport {
  std::vector<OpensetRow> rows;
  std::vector<OmegaCurvePoint> curve;  // 100-point EVT grid
};

// Calibrates every criterion on the known validation data at the target
// inlier fraction, then reports the flagged percentage on the known test
// data and each unknown set, plus the full EVT rejection-prior curve.
OpensetReport openset_sweep(
    const JointModel& model, const evt::MetaRecognitionModel& meta,
    const Matrix& known_val, const Matrix& known_test,
    const std::vector<std::pair<std::string, Matrix>>& unknown_sets,
    std::size_t samples, Rng& rng, double target_inlier_fraction = 0.95);

}  // namespace ocreplay::continual
