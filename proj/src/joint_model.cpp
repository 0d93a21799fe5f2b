#include "ocreplay/joint_model.hpp"

#include <cmath>
#include <stdexcept>

namespace ocreplay {

namespace {

Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  Dense d;
  d.w = he_normal_init(in, out, in, rng);
  d.b = Matrix(1, out, 0.0);
  return d;
}

void check_labels(const std::vector<int>& labels, std::size_t num_classes,
                  std::size_t batch) {
  if (labels.size() != batch)
    throw std::invalid_argument("labels: count " + std::to_string(labels.size()) +
                                " does not match batch " + std::to_string(batch));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw std::out_of_range("label " + std::to_string(y) +
                              " out of range for " +
                              std::to_string(num_classes) + " classes");
}

// Numerically safe binary cross-entropy from logits:
// bce(l, t) = max(l, 0) - l*t + log(1 + exp(-|l|))
double bce_from_logits_sum(const Matrix& logits, const Matrix& target) {
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double l = logits.data[i];
    const double t = target.data[i];
    sum += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::fabs(l)));
  }
  return sum;
}

}  // namespace

JointModel::JointModel(const JointModelConfig& cfg, Rng& rng)
    : input_dim(cfg.input_dim),
      latent_dim(cfg.latent_dim),
      hidden(cfg.hidden),
      num_classes(cfg.num_classes),
      beta(cfg.beta) {
  if (input_dim == 0 || latent_dim == 0 || hidden == 0 || num_classes == 0)
    throw std::invalid_argument("JointModel: all dimensions must be positive");
  enc1 = make_dense(input_dim, hidden, rng);
  enc2 = make_dense(hidden, hidden, rng);
  enc_mu = make_dense(hidden, latent_dim, rng);
  enc_logvar = make_dense(hidden, latent_dim, rng);
  dec1 = make_dense(latent_dim, hidden, rng);
  dec2 = make_dense(hidden, hidden, rng);
  dec_out = make_dense(hidden, input_dim, rng);
  cls.w = he_normal_init(latent_dim, num_classes, latent_dim, rng);
  cls.b = Matrix(1, num_classes, 0.0);
}

void JointModel::encode(const Matrix& x, Matrix& mu, Matrix& logvar) const {
  if (x.cols != input_dim)
    throw std::invalid_argument("encode: input has " + std::to_string(x.cols) +
                                " columns, expected " +
                                std::to_string(input_dim));
  const Matrix h1 = relu(dense_forward(x, enc1.w, enc1.b));
  const Matrix h2 = relu(dense_forward(h1, enc2.w, enc2.b));
  mu = dense_forward(h2, enc_mu.w, enc_mu.b);
  logvar = dense_forward(h2, enc_logvar.w, enc_logvar.b);
}

Matrix JointModel::reparameterize(const Matrix& mu, const Matrix& logvar,
                                  Rng& rng) const {
  require_same_shape(mu, logvar, "reparameterize");
  Matrix z = mu;
  for (std::size_t i = 0; i < z.size(); ++i)
    z.data[i] += std::exp(0.5 * logvar.data[i]) * rng.normal();
  return z;
}

Matrix JointModel::decode_logits(const Matrix& z) const {
  if (z.cols != latent_dim)
    throw std::invalid_argument("decode: z has " + std::to_string(z.cols) +
                                " columns, expected " +
                                std::to_string(latent_dim));
  const Matrix g1 = relu(dense_forward(z, dec1.w, dec1.b));
  const Matrix g2 = relu(dense_forward(g1, dec2.w, dec2.b));
  return dense_forward(g2, dec_out.w, dec_out.b);
}

Matrix JointModel::decode(const Matrix& z) const {
  return sigmoid(decode_logits(z));
}

Matrix JointModel::classify(const Matrix& z) const {
  if (z.cols != latent_dim)
    throw std::invalid_argument("classify: z has " + std::to_string(z.cols) +
                                " columns, expected " +
                                std::to_string(latent_dim));
  return dense_forward(z, cls.w, cls.b);
}

void JointModel::expand_classifier(std::size_t new_num_classes, Rng& rng) {
  if (new_num_classes <= num_classes)
    throw std::invalid_argument(
        "expand_classifier: cannot shrink from " + std::to_string(num_classes) +
        " to " + std::to_string(new_num_classes) + " classes");
  const std::size_t added = new_num_classes - num_classes;
  const Matrix fresh = he_normal_init(latent_dim, added, latent_dim, rng);
  Matrix w(latent_dim, new_num_classes);
  for (std::size_t i = 0; i < latent_dim; ++i) {
    for (std::size_t j = 0; j < num_classes; ++j) w(i, j) = cls.w(i, j);
    for (std::size_t j = 0; j < added; ++j) w(i, num_classes + j) = fresh(i, j);
  }
  Matrix b(1, new_num_classes, 0.0);
  for (std::size_t j = 0; j < num_classes; ++j) b(0, j) = cls.b(0, j);
  cls.w = std::move(w);
  cls.b = std::move(b);
  num_classes = new_num_classes;
}

std::vector<JointModel::ParamRef> JointModel::parameters() {
  return {
      {&enc1.w, "enc1.w"},       {&enc1.b, "enc1.b"},
      {&enc2.w, "enc2.w"},       {&enc2.b, "enc2.b"},
      {&enc_mu.w, "enc_mu.w"},   {&enc_mu.b, "enc_mu.b"},
      {&enc_logvar.w, "enc_logvar.w"}, {&enc_logvar.b, "enc_logvar.b"},
      {&dec1.w, "dec1.w"},       {&dec1.b, "dec1.b"},
      {&dec2.w, "dec2.w"},       {&dec2.b, "dec2.b"},
      {&dec_out.w, "dec_out.w"}, {&dec_out.b, "dec_out.b"},
      {&cls.w, "cls.w"},         {&cls.b, "cls.b"},
  };
}

std::vector<const Matrix*> JointModel::parameters_const() const {
  auto refs = const_cast<JointModel*>(this)->parameters();
  std::vector<const Matrix*> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(r.m);
  return out;
}

LossBreakdown joint_loss_forward(const JointModel& m, const Matrix& x_clean,
                                 const std::vector<int>& labels,
                                 const Matrix* noise_x, const Matrix& eps_z,
                                 double class_weight, ForwardCache* cache) {
  const std::size_t batch = x_clean.rows;
  if (batch == 0) throw std::invalid_argument("joint_loss: empty batch");
  if (class_weight != 0.0) check_labels(labels, m.num_classes, batch);
  if (eps_z.rows != batch || eps_z.cols != m.latent_dim)
    throw std::invalid_argument("joint_loss: eps_z shape " + eps_z.shape_str());

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;

  c.enc_in = x_clean;
  if (noise_x) {
    require_same_shape(x_clean, *noise_x, "joint_loss noise");
    for (std::size_t i = 0; i < c.enc_in.size(); ++i)
      c.enc_in.data[i] += noise_x->data[i];
  }
  c.h1_pre = dense_forward(c.enc_in, m.enc1.w, m.enc1.b);
  c.h1 = relu(c.h1_pre);
  c.h2_pre = dense_forward(c.h1, m.enc2.w, m.enc2.b);
  c.h2 = relu(c.h2_pre);
  c.mu = dense_forward(c.h2, m.enc_mu.w, m.enc_mu.b);
  c.logvar = dense_forward(c.h2, m.enc_logvar.w, m.enc_logvar.b);

  c.eps_z = eps_z;
  c.std_dev = c.logvar;
  for (double& v : c.std_dev.data) v = std::exp(0.5 * v);
  c.z = c.mu;
  for (std::size_t i = 0; i < c.z.size(); ++i)
    c.z.data[i] += c.std_dev.data[i] * eps_z.data[i];

  c.g1_pre = dense_forward(c.z, m.dec1.w, m.dec1.b);
  c.g1 = relu(c.g1_pre);
  c.g2_pre = dense_forward(c.g1, m.dec2.w, m.dec2.b);
  c.g2 = relu(c.g2_pre);
  c.dec_logits = dense_forward(c.g2, m.dec_out.w, m.dec_out.b);
  c.probs = sigmoid(c.dec_logits);

  LossBreakdown out;
  out.recon = bce_from_logits_sum(c.dec_logits, x_clean) /
              (static_cast<double>(batch) * static_cast<double>(m.input_dim));

  double kl_sum = 0.0;
  for (std::size_t i = 0; i < c.mu.size(); ++i) {
    const double mu = c.mu.data[i];
    const double lv = c.logvar.data[i];
    kl_sum += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
  }
  out.kl = kl_sum /
           (static_cast<double>(batch) * static_cast<double>(m.latent_dim));

  if (class_weight != 0.0) {
    c.cls_logits = dense_forward(c.z, m.cls.w, m.cls.b);
    double ce = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      const double* r = c.cls_logits.row(i);
      double mx = r[0];
      for (std::size_t j = 1; j < m.num_classes; ++j) mx = std::max(mx, r[j]);
      double lse = 0.0;
      for (std::size_t j = 0; j < m.num_classes; ++j)
        lse += std::exp(r[j] - mx);
      ce += mx + std::log(lse) - r[static_cast<std::size_t>(labels[i])];
    }
    out.class_loss = ce / static_cast<double>(batch);
  }

  out.total = out.recon + class_weight * out.class_loss + m.beta * out.kl;
  return out;
}

namespace {

// Backprop from d(total)/dmu and d(total)/dlogvar into the encoder stack.
// When accumulate is false only the input gradient is produced (used by the
// introspective decoder term, which flows through a frozen encoder).
Matrix encoder_backward(const JointModel& m, const Matrix& enc_in,
                        const Matrix& h1_pre, const Matrix& h1,
                        const Matrix& h2_pre, const Matrix& h2,
                        const Matrix& dmu, const Matrix& dlogvar, double scale,
                        bool accumulate, std::vector<Matrix>* grads) {
  DenseGrads gmu = dense_backward(h2, m.enc_mu.w, dmu);
  DenseGrads glv = dense_backward(h2, m.enc_logvar.w, dlogvar);
  Matrix dh2 = gmu.x;
  for (std::size_t i = 0; i < dh2.size(); ++i) dh2.data[i] += glv.x.data[i];
  const Matrix dh2_pre = relu_backward(h2_pre, dh2);
  DenseGrads g2 = dense_backward(h1, m.enc2.w, dh2_pre);
  const Matrix dh1_pre = relu_backward(h1_pre, g2.x);
  DenseGrads g1 = dense_backward(enc_in, m.enc1.w, dh1_pre);

  if (accumulate && grads) {
    auto& g = *grads;
    auto add = [scale](Matrix& dst, const Matrix& src) {
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst.data[i] += scale * src.data[i];
    };
    add(g[0], g1.w);
    add(g[1], g1.b);
    add(g[2], g2.w);
    add(g[3], g2.b);
    add(g[4], gmu.w);
    add(g[5], gmu.b);
    add(g[6], glv.w);
    add(g[7], glv.b);
  }
  return g1.x;
}

// Backprop from d(total)/d(decoder logits) into the decoder stack; returns
// the gradient with respect to z.
Matrix decoder_backward(const JointModel& m, const Matrix& z,
                        const Matrix& g1_pre, const Matrix& g1,
                        const Matrix& g2_pre, const Matrix& g2,
                        const Matrix& ddec_logits, double scale,
                        std::vector<Matrix>* grads) {
  DenseGrads gout = dense_backward(g2, m.dec_out.w, ddec_logits);
  const Matrix dg2_pre = relu_backward(g2_pre, gout.x);
  DenseGrads gd2 = dense_backward(g1, m.dec2.w, dg2_pre);
  const Matrix dg1_pre = relu_backward(g1_pre, gd2.x);
  DenseGrads gd1 = dense_backward(z, m.dec1.w, dg1_pre);

  if (grads) {
    auto& g = *grads;
    auto add = [scale](Matrix& dst, const Matrix& src) {
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst.data[i] += scale * src.data[i];
    };
    add(g[8], gd1.w);
    add(g[9], gd1.b);
    add(g[10], gd2.w);
    add(g[11], gd2.b);
    add(g[12], gout.w);
    add(g[13], gout.b);
  }
  return gd1.x;
}

}  // namespace

void joint_loss_backward(const JointModel& m, const ForwardCache& c,
                         const Matrix& x_clean, const std::vector<int>& labels,
                         double class_weight, double scale,
                         std::vector<Matrix>& grads) {
  const std::size_t batch = x_clean.rows;
  const double inv_bd =
      1.0 / (static_cast<double>(batch) * static_cast<double>(m.input_dim));
  const double inv_bl =
      1.0 / (static_cast<double>(batch) * static_cast<double>(m.latent_dim));

  // reconstruction path
  Matrix ddec_logits(batch, m.input_dim);
  for (std::size_t i = 0; i < ddec_logits.size(); ++i)
    ddec_logits.data[i] = (c.probs.data[i] - x_clean.data[i]) * inv_bd;
  Matrix dz = decoder_backward(m, c.z, c.g1_pre, c.g1, c.g2_pre, c.g2,
                               ddec_logits, scale, &grads);

  // classifier path
  if (class_weight != 0.0) {
    Matrix dcls = softmax_rows(c.cls_logits);
    const double cw = class_weight / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      double* r = dcls.row(i);
      for (std::size_t j = 0; j < m.num_classes; ++j) r[j] *= cw;
      r[static_cast<std::size_t>(labels[i])] -= cw;
    }
    DenseGrads gc = dense_backward(c.z, m.cls.w, dcls);
    for (std::size_t i = 0; i < grads[14].size(); ++i)
      grads[14].data[i] += scale * gc.w.data[i];
    for (std::size_t i = 0; i < grads[15].size(); ++i)
      grads[15].data[i] += scale * gc.b.data[i];
    for (std::size_t i = 0; i < dz.size(); ++i) dz.data[i] += gc.x.data[i];
  }

  // reparameterization and KL paths
  Matrix dmu = dz;
  Matrix dlogvar = dz;
  const double bkl = m.beta * inv_bl;
  for (std::size_t i = 0; i < dmu.size(); ++i) {
    dmu.data[i] += bkl * c.mu.data[i];
    dlogvar.data[i] = dz.data[i] * 0.5 * c.std_dev.data[i] * c.eps_z.data[i] +
                      bkl * 0.5 * (std::exp(c.logvar.data[i]) - 1.0);
  }

  encoder_backward(m, c.enc_in, c.h1_pre, c.h1, c.h2_pre, c.h2, dmu, dlogvar,
                   scale, true, &grads);
}

std::pair<double, double> intro_losses(const JointModel& m,
                                       const Matrix& generated_x,
                                       const IntroConfig& cfg) {
  if (!cfg.enabled)
    throw std::logic_error("intro_losses: introspection is disabled");
  Matrix mu, logvar;
  m.encode(generated_x, mu, logvar);
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double muv = mu.data[i];
    const double lv = logvar.data[i];
    kl_sum += 0.5 * (muv * muv + std::exp(lv) - 1.0 - lv);
  }
  const double kl = kl_sum / (static_cast<double>(generated_x.rows) *
                              static_cast<double>(m.latent_dim));
  const double enc_extra = m.beta * std::max(0.0, cfg.margin - kl);
  const double dec_extra = m.beta * kl;
  return {enc_extra, dec_extra};
}

JointTrainer::JointTrainer(JointModel& model, const AdamParams& hp)
    : model_(&model), hp_(hp) {
  for (const auto& p : model.parameters())
    states_.emplace_back(p.m->rows, p.m->cols);
}

LossBreakdown JointTrainer::loss(const Batch& batch, Rng& rng) const {
  Matrix eps(batch.size(), model_->latent_dim);
  for (double& v : eps.data) v = rng.normal();
  return joint_loss_forward(*model_, batch.x, batch.y, nullptr, eps,
                            class_weight, nullptr);
}

LossBreakdown JointTrainer::train_step(const Batch& batch, double denoise_sigma,
                                       Rng& rng) {
  return step_impl(batch, nullptr, denoise_sigma, rng);
}

LossBreakdown JointTrainer::train_step_mixed(const Batch& real,
                                             const Batch& replay,
                                             double denoise_sigma, Rng& rng) {
  return step_impl(real, &replay, denoise_sigma, rng);
}

LossBreakdown JointTrainer::step_impl(const Batch& batch, const Batch* replay,
                                      double denoise_sigma, Rng& rng) {
  auto params = model_->parameters();
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.emplace_back(p.m->rows, p.m->cols, 0.0);

  auto run_half = [&](const Batch& half, double weight) {
    Matrix noise;
    const Matrix* noise_ptr = nullptr;
    if (denoise_sigma > 0.0) {
      noise = Matrix(half.size(), model_->input_dim);
      for (double& v : noise.data) v = rng.normal() * denoise_sigma;
      noise_ptr = &noise;
    }
    Matrix eps(half.size(), model_->latent_dim);
    for (double& v : eps.data) v = rng.normal();
    ForwardCache cache;
    LossBreakdown lb = joint_loss_forward(*model_, half.x, half.y, noise_ptr,
                                          eps, class_weight, &cache);
    joint_loss_backward(*model_, cache, half.x, half.y, class_weight, weight,
                        grads);
    return lb;
  };

  LossBreakdown lb;
  if (replay) {
    const LossBreakdown a = run_half(batch, 0.5);
    const LossBreakdown b = run_half(*replay, 0.5);
    lb.recon = 0.5 * a.recon + 0.5 * b.recon;
    lb.kl = 0.5 * a.kl + 0.5 * b.kl;
    lb.class_loss = 0.5 * a.class_loss + 0.5 * b.class_loss;
    lb.total = 0.5 * a.total + 0.5 * b.total;
  } else {
    lb = run_half(batch, 1.0);
  }

  if (intro.enabled) apply_intro_grads(batch, rng, grads);

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (class_weight == 0.0 && i >= kClassifierParamBegin) continue;
    adam_step(*params[i].m, grads[i], states_[i], hp_, params[i].name);
  }
  return lb;
}

void JointTrainer::apply_intro_grads(const Batch& batch, Rng& rng,
                                     std::vector<Matrix>& grads) {
  Matrix z_prior(batch.size(), model_->latent_dim);
  for (double& v : z_prior.data) v = rng.normal();
  intro_backward(*model_, z_prior, intro, grads);
}

std::pair<double, double> intro_backward(const JointModel& m,
                                         const Matrix& z_prior,
                                         const IntroConfig& cfg,
                                         std::vector<Matrix>& grads) {
  if (!cfg.enabled)
    throw std::logic_error("intro_backward: introspection is disabled");
  const std::size_t batch_n = z_prior.rows;
  const double inv_bl =
      1.0 / (static_cast<double>(batch_n) * static_cast<double>(m.latent_dim));

  // fake batch from the prior through the current decoder
  const Matrix g1_pre = dense_forward(z_prior, m.dec1.w, m.dec1.b);
  const Matrix g1 = relu(g1_pre);
  const Matrix g2_pre = dense_forward(g1, m.dec2.w, m.dec2.b);
  const Matrix g2 = relu(g2_pre);
  const Matrix dec_logits = dense_forward(g2, m.dec_out.w, m.dec_out.b);
  const Matrix x_fake = sigmoid(dec_logits);

  // encode fakes
  const Matrix h1_pre = dense_forward(x_fake, m.enc1.w, m.enc1.b);
  const Matrix h1 = relu(h1_pre);
  const Matrix h2_pre = dense_forward(h1, m.enc2.w, m.enc2.b);
  const Matrix h2 = relu(h2_pre);
  const Matrix mu = dense_forward(h2, m.enc_mu.w, m.enc_mu.b);
  const Matrix logvar = dense_forward(h2, m.enc_logvar.w, m.enc_logvar.b);

  double kl_sum = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    kl_sum += 0.5 * (mu.data[i] * mu.data[i] + std::exp(logvar.data[i]) - 1.0 -
                     logvar.data[i]);
  const double kl = kl_sum * inv_bl;

  // dKL/dmu and dKL/dlogvar, shared by both adversarial terms
  Matrix dmu(batch_n, m.latent_dim);
  Matrix dlogvar(batch_n, m.latent_dim);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    dmu.data[i] = mu.data[i] * inv_bl;
    dlogvar.data[i] = 0.5 * (std::exp(logvar.data[i]) - 1.0) * inv_bl;
  }

  // encoder term: beta * max(0, margin - KL); active hinge pushes KL up
  if (kl < cfg.margin) {
    encoder_backward(m, x_fake, h1_pre, h1, h2_pre, h2, dmu, dlogvar, -m.beta,
                     true, &grads);
  }

  // decoder term: beta * KL through a frozen encoder
  Matrix dx_fake = encoder_backward(m, x_fake, h1_pre, h1, h2_pre, h2, dmu,
                                    dlogvar, 0.0, false, nullptr);
  Matrix ddec_logits = sigmoid_backward(x_fake, dx_fake);
  decoder_backward(m, z_prior, g1_pre, g1, g2_pre, g2, ddec_logits, m.beta,
                   &grads);

  return {m.beta * std::max(0.0, cfg.margin - kl), m.beta * kl};
}

void JointTrainer::expand_classifier(std::size_t new_num_classes, Rng& rng) {
  const std::size_t old_classes = model_->num_classes;
  model_->expand_classifier(new_num_classes, rng);

  auto expand_state = [&](AdamState& st, std::size_t rows, bool is_bias) {
    AdamState fresh(rows, new_num_classes);
    fresh.step_count = st.step_count;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < old_classes; ++j) {
        fresh.first_moment(i, j) = st.first_moment(i, j);
        fresh.second_moment(i, j) = st.second_moment(i, j);
      }
    (void)is_bias;
    st = std::move(fresh);
  };
  expand_state(states_[kClassifierParamBegin], model_->latent_dim, false);
  expand_state(states_[kClassifierParamBegin + 1], 1, true);
}

}  // namespace ocreplay
