#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ocreplay/matrix.hpp"
#include "ocreplay/nn.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay {

struct Dense {
  Matrix w;  // in x out
  Matrix b;  // 1 x out
};

struct Batch {
  Matrix x;            // batch x input_dim, entries in [0, 1]
  std::vector<int> y;  // labels in [0, num_classes)

  std::size_t size() const { return x.rows; }
};

struct LossBreakdown {
  double recon = 0.0;       // nats per pixel
  double kl = 0.0;          // nats per latent dimension
  double class_loss = 0.0;  // nats, mean cross-entropy per sample
  double total = 0.0;       // recon + class_loss + beta * kl
};

struct IntroConfig {
  bool enabled = false;
  double margin = 1.0;  // nats per latent dimension
};

struct JointModelConfig {
  std::size_t input_dim = 0;
  std::size_t latent_dim = 60;
  std::size_t hidden = 400;
  std::size_t num_classes = 0;
  double beta = 0.1;
};

// Shared probabilistic encoder, probabilistic decoder and linear classifier
// over one latent variable with a unit Gaussian prior. The encoder and
// decoder are two-hidden-layer ReLU MLPs; the classifier is a single affine
// map so classes stay linearly separable in latent space.
struct JointModel {
  std::size_t input_dim = 0;
  std::size_t latent_dim = 0;
  std::size_t hidden = 0;
  std::size_t num_classes = 0;
  double beta = 0.1;

  Dense enc1, enc2, enc_mu, enc_logvar;
  Dense dec1, dec2, dec_out;
  Dense cls;

  JointModel() = default;
  JointModel(const JointModelConfig& cfg, Rng& rng);

  void encode(const Matrix& x, Matrix& mu, Matrix& logvar) const;
  Matrix reparameterize(const Matrix& mu, const Matrix& logvar, Rng& rng) const;
  Matrix decode_logits(const Matrix& z) const;
  Matrix decode(const Matrix& z) const;  // sigmoid probabilities in (0, 1)
  Matrix classify(const Matrix& z) const;

  // Grows the classifier head. Existing weight columns and bias entries are
  // bit-unchanged; new weights are He-initialized with fan_in = latent_dim,
  // new biases are zero.
  void expand_classifier(std::size_t new_num_classes, Rng& rng);

  struct ParamRef {
    Matrix* m;
    std::string name;
  };
  // Fixed canonical parameter order (16 entries).
  std::vector<ParamRef> parameters();
  std::vector<const Matrix*> parameters_const() const;
};

// Indices into the canonical parameter order.
inline constexpr std::size_t kEncoderParamBegin = 0, kEncoderParamEnd = 8;
inline constexpr std::size_t kDecoderParamBegin = 8, kDecoderParamEnd = 14;
inline constexpr std::size_t kClassifierParamBegin = 14, kClassifierParamEnd = 16;

// Full forward state of one loss evaluation, kept for the backward pass.
struct ForwardCache {
  Matrix enc_in;               // x (+ noise)
  Matrix h1_pre, h1, h2_pre, h2;
  Matrix mu, logvar, std_dev, eps_z, z;
  Matrix g1_pre, g1, g2_pre, g2;
  Matrix dec_logits, probs;
  Matrix cls_logits;
};

// Loss of one batch with fixed noise draws. noise_x may be null (clean
// encoder input); eps_z must be batch x latent_dim. class_weight scales the
// classification term (0 turns the model into a plain (denoising) VAE).
// The reconstruction target is always the clean x.
LossBreakdown joint_loss_forward(const JointModel& m, const Matrix& x_clean,
                                 const std::vector<int>& labels,
                                 const Matrix* noise_x, const Matrix& eps_z,
                                 double class_weight, ForwardCache* cache);

// Accumulates scale * dL/dparam into grads (aligned with parameters()).
void joint_loss_backward(const JointModel& m, const ForwardCache& cache,
                         const Matrix& x_clean, const std::vector<int>& labels,
                         double class_weight, double scale,
                         std::vector<Matrix>& grads);

// Introspection penalties on a generated batch, reported in minimization
// convention: encoder term beta * max(0, margin - KL), decoder term
// beta * KL, with KL the per-latent-dimension posterior-to-prior divergence
// of the encoded generated data.
std::pair<double, double> intro_losses(const JointModel& m,
                                       const Matrix& generated_x,
                                       const IntroConfig& cfg);

// Adversarial introspection step for one prior draw: decodes z_prior into a
// fake batch, then accumulates the encoder hinge gradient (fakes treated as
// constant inputs) and the decoder gradient (flowing through a frozen
// encoder) into grads. Returns (encoder term, decoder term) values.
std::pair<double, double> intro_backward(const JointModel& m,
                                         const Matrix& z_prior,
                                         const IntroConfig& cfg,
                                         std::vector<Matrix>& grads);

// Owns the Adam state for every model parameter.
class JointTrainer {
 public:
  JointTrainer(JointModel& model, const AdamParams& hp);

  // Single posterior sample per datum, no input noise, no update.
  LossBreakdown loss(const Batch& batch, Rng& rng) const;

  // Denoising step: encoder sees x + Normal(0, sigma^2), target is clean x.
  LossBreakdown train_step(const Batch& batch, double denoise_sigma, Rng& rng);

  // Half real + half replay step realizing the equal task weighting:
  // total gradient is 0.5 * dL(real)/dp + 0.5 * dL(replay)/dp.
  LossBreakdown train_step_mixed(const Batch& real, const Batch& replay,
                                 double denoise_sigma, Rng& rng);

  // Keeps optimizer slots aligned after a classifier expansion: moments of
  // existing entries are preserved, new entries start at zero.
  void expand_classifier(std::size_t new_num_classes, Rng& rng);

  JointModel& model() { return *model_; }
  const JointModel& model() const { return *model_; }
  const AdamParams& hyper() const { return hp_; }
  std::vector<AdamState>& states() { return states_; }

  IntroConfig intro;
  double class_weight = 1.0;

 private:
  LossBreakdown step_impl(const Batch& batch, const Batch* replay,
                          double denoise_sigma, Rng& rng);
  void apply_intro_grads(const Batch& batch, Rng& rng,
                         std::vector<Matrix>& grads);

  JointModel* model_;
  AdamParams hp_;
  std::vector<AdamState> states_;
};

}  // namespace ocreplay
