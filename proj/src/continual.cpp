#include "ocreplay/continual.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace ocreplay::continual {

namespace {

constexpr std::size_t kEvalChunk = 512;

Matrix copy_rows(const Matrix& src, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), src.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(src.row(rows[i]), src.row(rows[i]) + src.cols, out.row(i));
  return out;
}

Batch concat(const Batch& a, const Batch& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  Batch out;
  out.x = Matrix(a.size() + b.size(), a.x.cols);
  std::copy(a.x.data.begin(), a.x.data.end(), out.x.data.begin());
  std::copy(b.x.data.begin(), b.x.data.end(),
            out.x.data.begin() + static_cast<std::ptrdiff_t>(a.x.size()));
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

std::size_t argmax_row(const double* r, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (r[j] > r[best]) best = j;
  return best;
}

void encode_all(const JointModel& model, const Matrix& x, Matrix& mu,
                Matrix& logvar) {
  mu = Matrix(x.rows, model.latent_dim);
  logvar = Matrix(x.rows, model.latent_dim);
  for (std::size_t begin = 0; begin < x.rows; begin += kEvalChunk) {
    const std::size_t end = std::min(begin + kEvalChunk, x.rows);
    std::vector<std::size_t> rows(end - begin);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
    Matrix cmu, clv;
    model.encode(copy_rows(x, rows), cmu, clv);
    std::copy(cmu.data.begin(), cmu.data.end(),
              mu.data.begin() + static_cast<std::ptrdiff_t>(begin * mu.cols));
    std::copy(clv.data.begin(), clv.data.end(),
              logvar.data.begin() +
                  static_cast<std::ptrdiff_t>(begin * logvar.cols));
  }
}

}  // namespace

ModeKind parse_mode(const std::string& name) {
  std::string s;
  for (char c : name) s.push_back(static_cast<char>(std::tolower(c)));
  if (s == "iso") return ModeKind::ISO;
  if (s == "ub") return ModeKind::UB;
  if (s == "lb") return ModeKind::LB;
  if (s == "cdvae") return ModeKind::CDVAE;
  if (s == "ocdvae") return ModeKind::OCDVAE;
  if (s == "dual") return ModeKind::DUAL;
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected iso|ub|lb|cdvae|ocdvae|dual)");
}

std::string mode_name(ModeKind kind) {
  switch (kind) {
    case ModeKind::ISO: return "iso";
    case ModeKind::UB: return "ub";
    case ModeKind::LB: return "lb";
    case ModeKind::CDVAE: return "cdvae";
    case ModeKind::OCDVAE: return "ocdvae";
    case ModeKind::DUAL: return "dual";
  }
  return "?";
}

TaskSequence split_classes(const data::LabeledDataset& train,
                           const data::LabeledDataset& test,
                           std::size_t classes_per_task, double val_fraction,
                           Rng& rng) {
  if (classes_per_task < 1)
    throw std::invalid_argument("split_classes: classes_per_task must be >= 1");
  if (train.images.cols != test.images.cols)
    throw std::invalid_argument("split_classes: train/test pixel mismatch");

  std::map<int, int> remap;  // original class -> global id, ascending order
  for (int y : train.labels) remap[y];
  {
    int next = 0;
    for (auto& [orig, global] : remap) global = next++;
  }
  const std::size_t total = remap.size();

  TaskSequence seq;
  seq.total_classes = total;
  seq.input_dim = train.images.cols;
  seq.img_rows = train.img_rows;
  seq.img_cols = train.img_cols;

  std::vector<int> order;  // global ids in ascending order
  order.reserve(total);
  for (const auto& [orig, global] : remap) order.push_back(global);

  auto select = [&](const data::LabeledDataset& ds, int lo, int hi) {
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
      const auto it = remap.find(ds.labels[i]);
      if (it == remap.end()) continue;
      if (it->second >= lo && it->second < hi) {
        rows.push_back(i);
        labels.push_back(it->second);
      }
    }
    Batch b;
    b.x = copy_rows(ds.images, rows);
    b.y = std::move(labels);
    return b;
  };

  for (std::size_t begin = 0; begin < total; begin += classes_per_task) {
    const std::size_t end = std::min(begin + classes_per_task, total);
    Task task;
    for (std::size_t c = begin; c < end; ++c)
      task.class_ids.push_back(static_cast<int>(c));

    const Batch train_all =
        select(train, static_cast<int>(begin), static_cast<int>(end));
    if (train_all.size() == 0)
      throw std::runtime_error("split_classes: empty training task");

    data::LabeledDataset tmp;
    tmp.images = train_all.x;
    tmp.labels = train_all.y;
    tmp.name = train.name;
    auto [tr, val] = data::train_val_split(tmp, val_fraction, rng);
    task.train = Batch{std::move(tr.images), std::move(tr.labels)};
    task.val = Batch{std::move(val.images), std::move(val.labels)};
    task.test = select(test, static_cast<int>(begin), static_cast<int>(end));
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

TaskSequence cross_dataset_sequence(
    const std::vector<std::pair<data::LabeledDataset, data::LabeledDataset>>&
        train_test_pairs,
    double val_fraction, Rng& rng) {
  if (train_test_pairs.empty())
    throw std::invalid_argument("cross_dataset_sequence: no datasets");
  TaskSequence seq;
  seq.input_dim = train_test_pairs.front().first.images.cols;
  seq.img_rows = train_test_pairs.front().first.img_rows;
  seq.img_cols = train_test_pairs.front().first.img_cols;

  int offset = 0;
  for (const auto& [train, test] : train_test_pairs) {
    if (train.images.cols != seq.input_dim)
      throw std::invalid_argument(
          "cross_dataset_sequence: pixel count mismatch between datasets");
    std::map<int, int> remap;
    for (int y : train.labels) remap[y];
    int next = offset;
    for (auto& [orig, global] : remap) global = next++;

    Task task;
    for (const auto& [orig, global] : remap) task.class_ids.push_back(global);

    auto remapped = [&](const data::LabeledDataset& ds) {
      Batch b;
      b.x = ds.images;
      b.y.reserve(ds.labels.size());
      for (int y : ds.labels) b.y.push_back(remap.at(y));
      return b;
    };
    Batch train_all = remapped(train);
    data::LabeledDataset tmp;
    tmp.images = std::move(train_all.x);
    tmp.labels = std::move(train_all.y);
    tmp.name = train.name;
    auto [tr, val] = data::train_val_split(tmp, val_fraction, rng);
    task.train = Batch{std::move(tr.images), std::move(tr.labels)};
    task.val = Batch{std::move(val.images), std::move(val.labels)};
    task.test = remapped(test);
    seq.tasks.push_back(std::move(task));
    offset = next;
  }
  seq.total_classes = static_cast<std::size_t>(offset);
  return seq;
}

DiscNet::DiscNet(std::size_t input_dim_, std::size_t hidden_,
                 std::size_t num_classes_, Rng& rng)
    : input_dim(input_dim_), hidden(hidden_), num_classes(num_classes_) {
  l1.w = he_normal_init(input_dim, hidden, input_dim, rng);
  l1.b = Matrix(1, hidden, 0.0);
  l2.w = he_normal_init(hidden, hidden, hidden, rng);
  l2.b = Matrix(1, hidden, 0.0);
  out.w = he_normal_init(hidden, num_classes, hidden, rng);
  out.b = Matrix(1, num_classes, 0.0);
}

Matrix DiscNet::logits(const Matrix& x) const {
  const Matrix h1 = relu(dense_forward(x, l1.w, l1.b));
  const Matrix h2 = relu(dense_forward(h1, l2.w, l2.b));
  return dense_forward(h2, out.w, out.b);
}

std::vector<int> DiscNet::predict(const Matrix& x) const {
  const Matrix lg = logits(x);
  std::vector<int> preds(lg.rows);
  for (std::size_t i = 0; i < lg.rows; ++i)
    preds[i] = static_cast<int>(argmax_row(lg.row(i), lg.cols));
  return preds;
}

void DiscNet::expand(std::size_t new_num_classes, Rng& rng) {
  if (new_num_classes <= num_classes)
    throw std::invalid_argument("DiscNet::expand: cannot shrink");
  const std::size_t added = new_num_classes - num_classes;
  const Matrix fresh = he_normal_init(hidden, added, hidden, rng);
  Matrix w(hidden, new_num_classes);
  for (std::size_t i = 0; i < hidden; ++i) {
    for (std::size_t j = 0; j < num_classes; ++j) w(i, j) = out.w(i, j);
    for (std::size_t j = 0; j < added; ++j) w(i, num_classes + j) = fresh(i, j);
  }
  Matrix b(1, new_num_classes, 0.0);
  for (std::size_t j = 0; j < num_classes; ++j) b(0, j) = out.b(0, j);
  out.w = std::move(w);
  out.b = std::move(b);
  num_classes = new_num_classes;
}

namespace {

// Trainer for the dual baseline's discriminative MLP.
class DiscTrainer {
 public:
  DiscTrainer(DiscNet& net, const AdamParams& hp) : net_(&net), hp_(hp) {
    for (Matrix* m : params()) states_.emplace_back(m->rows, m->cols);
  }

  std::vector<Matrix*> params() {
    return {&net_->l1.w, &net_->l1.b, &net_->l2.w,
            &net_->l2.b, &net_->out.w, &net_->out.b};
  }

  void train_step(const Batch& real, const Batch* replay) {
    auto ps = params();
    std::vector<Matrix> grads;
    for (Matrix* m : ps) grads.emplace_back(m->rows, m->cols, 0.0);
    if (replay) {
      accumulate(real, 0.5, grads);
      accumulate(*replay, 0.5, grads);
    } else {
      accumulate(real, 1.0, grads);
    }
    static const char* names[] = {"disc.l1.w", "disc.l1.b", "disc.l2.w",
                                  "disc.l2.b", "disc.out.w", "disc.out.b"};
    for (std::size_t i = 0; i < ps.size(); ++i)
      adam_step(*ps[i], grads[i], states_[i], hp_, names[i]);
  }

  void expand(std::size_t new_num_classes, Rng& rng) {
    const std::size_t old_classes = net_->num_classes;
    net_->expand(new_num_classes, rng);
    auto grow = [&](AdamState& st, std::size_t rows) {
      AdamState fresh(rows, new_num_classes);
      fresh.step_count = st.step_count;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < old_classes; ++j) {
          fresh.first_moment(i, j) = st.first_moment(i, j);
          fresh.second_moment(i, j) = st.second_moment(i, j);
        }
      st = std::move(fresh);
    };
    grow(states_[4], net_->hidden);
    grow(states_[5], 1);
  }

 private:
  void accumulate(const Batch& batch, double weight,
                  std::vector<Matrix>& grads) {
    const std::size_t n = batch.size();
    const Matrix h1_pre = dense_forward(batch.x, net_->l1.w, net_->l1.b);
    const Matrix h1 = relu(h1_pre);
    const Matrix h2_pre = dense_forward(h1, net_->l2.w, net_->l2.b);
    const Matrix h2 = relu(h2_pre);
    const Matrix lg = dense_forward(h2, net_->out.w, net_->out.b);

    Matrix dlg = softmax_rows(lg);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double* r = dlg.row(i);
      for (std::size_t j = 0; j < dlg.cols; ++j) r[j] *= inv_n;
      r[static_cast<std::size_t>(batch.y[i])] -= inv_n;
    }
    DenseGrads gout = dense_backward(h2, net_->out.w, dlg);
    const Matrix dh2_pre = relu_backward(h2_pre, gout.x);
    DenseGrads g2 = dense_backward(h1, net_->l2.w, dh2_pre);
    const Matrix dh1_pre = relu_backward(h1_pre, g2.x);
    DenseGrads g1 = dense_backward(batch.x, net_->l1.w, dh1_pre);

    auto add = [weight](Matrix& dst, const Matrix& src) {
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst.data[i] += weight * src.data[i];
    };
    add(grads[0], g1.w);
    add(grads[1], g1.b);
    add(grads[2], g2.w);
    add(grads[3], g2.b);
    add(grads[4], gout.w);
    add(grads[5], gout.b);
  }

  DiscNet* net_;
  AdamParams hp_;
  std::vector<AdamState> states_;
};

struct EvalTaskStats {
  std::size_t n = 0;
  std::size_t correct = 0;
  double bce_sum = 0.0;  // nats per image, summed over images
  double kl_sum = 0.0;   // nats per latent dim, summed over images
};

EvalTaskStats eval_task(const JointModel& model, const DiscNet* disc,
                        const Batch& test, std::size_t samples, Rng& rng,
                        Matrix* confusion) {
  EvalTaskStats st;
  st.n = test.size();
  const double inv_s = 1.0 / static_cast<double>(samples);
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(begin + kEvalChunk, test.size());
    const std::size_t n = end - begin;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = begin + i;
    const Matrix x = copy_rows(test.x, rows);

    Matrix mu, logvar;
    model.encode(x, mu, logvar);
    Matrix std_dev = logvar;
    for (double& v : std_dev.data) v = std::exp(0.5 * v);

    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double m = mu.data[i];
      const double lv = logvar.data[i];
      st.kl_sum += 0.5 * (m * m + std::exp(lv) - 1.0 - lv) /
                   static_cast<double>(model.latent_dim);
    }

    Matrix prob_sum;
    if (!disc) prob_sum = Matrix(n, model.num_classes, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
      Matrix z = mu;
      for (std::size_t i = 0; i < z.size(); ++i)
        z.data[i] += std_dev.data[i] * rng.normal();

      if (!disc) {
        const Matrix probs = softmax_rows(model.classify(z));
        for (std::size_t i = 0; i < probs.size(); ++i)
          prob_sum.data[i] += probs.data[i];
      }

      const Matrix logits = model.decode_logits(z);
      for (std::size_t i = 0; i < n; ++i) {
        const double* l = logits.row(i);
        const double* t = x.row(i);
        double bce = 0.0;
        for (std::size_t j = 0; j < model.input_dim; ++j)
          bce += std::max(l[j], 0.0) - l[j] * t[j] +
                 std::log1p(std::exp(-std::fabs(l[j])));
        st.bce_sum += bce * inv_s;
      }
    }

    std::vector<int> preds;
    if (disc) {
      preds = disc->predict(x);
    } else {
      preds.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        preds[i] =
            static_cast<int>(argmax_row(prob_sum.row(i), prob_sum.cols));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const int truth = test.y[begin + i];
      if (preds[i] == truth) ++st.correct;
      if (confusion)
        (*confusion)(static_cast<std::size_t>(truth),
                     static_cast<std::size_t>(preds[i])) += 1.0;
    }
  }
  return st;
}

MetricsRecord eval_impl(const JointModel& model, const DiscNet* disc,
                        const TaskSequence& seq, std::size_t upto_task,
                        std::size_t samples, Rng& rng, Matrix* confusion) {
  if (upto_task < 1 || upto_task > seq.tasks.size())
    throw std::invalid_argument("evaluate: upto_task out of range");
  MetricsRecord rec;
  rec.t = upto_task;
  for (std::size_t t = 0; t < upto_task; ++t)
    rec.classes_seen += seq.tasks[t].class_ids.size();

  std::size_t n_all = 0, correct_all = 0;
  double bce_all = 0.0, kl_all = 0.0;
  for (std::size_t t = 0; t < upto_task; ++t) {
    const EvalTaskStats st =
        eval_task(model, disc, seq.tasks[t].test, samples, rng, confusion);
    const double n = static_cast<double>(st.n);
    const double alpha = st.n ? static_cast<double>(st.correct) / n : 0.0;
    const double gamma = st.n ? st.bce_sum / n : 0.0;
    if (t == 0) {
      rec.alpha_base = alpha;
      rec.gamma_base = gamma;
      rec.gamma_base_px = gamma / static_cast<double>(model.input_dim);
    }
    if (t + 1 == upto_task) {
      rec.alpha_new = alpha;
      rec.gamma_new = gamma;
      rec.gamma_new_px = gamma / static_cast<double>(model.input_dim);
    }
    n_all += st.n;
    correct_all += st.correct;
    bce_all += st.bce_sum;
    kl_all += st.kl_sum;
  }
  const double n = static_cast<double>(n_all);
  rec.alpha_all = n_all ? static_cast<double>(correct_all) / n : 0.0;
  rec.gamma_all = n_all ? bce_all / n : 0.0;
  rec.gamma_all_px = rec.gamma_all / static_cast<double>(model.input_dim);
  rec.kl_all = n_all ? kl_all / n : 0.0;
  return rec;
}

evt::MetaRecognitionModel build_meta_from_train(
    const JointModel& model, const Batch& train_data,
    const replay::GeneratedSet* gen, double tail_fraction,
    std::size_t min_tail_count, std::size_t task_index) {
  Batch mixed = train_data;
  if (gen && gen->size() > 0)
    mixed = concat(train_data, Batch{gen->x, gen->y});
  Matrix mu, logvar;
  encode_all(model, mixed.x, mu, logvar);
  const std::vector<int> preds = [&] {
    std::vector<int> out(mu.rows);
    for (std::size_t begin = 0; begin < mu.rows; begin += kEvalChunk) {
      const std::size_t end = std::min(begin + kEvalChunk, mu.rows);
      std::vector<std::size_t> rows(end - begin);
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
      const Matrix logits = model.classify(copy_rows(mu, rows));
      for (std::size_t i = 0; i < logits.rows; ++i)
        out[begin + i] =
            static_cast<int>(argmax_row(logits.row(i), logits.cols));
    }
    return out;
  }();
  return evt::build_meta_model(mu, mixed.y, preds, tail_fraction, task_index,
                               min_tail_count);
}

}  // namespace

MetricsRecord evaluate(const JointModel& model, const TaskSequence& seq,
                       std::size_t upto_task, std::size_t samples, Rng& rng) {
  return eval_impl(model, nullptr, seq, upto_task, samples, rng, nullptr);
}

MetricsRecord evaluate_dual(const DualModel& dual, const TaskSequence& seq,
                            std::size_t upto_task, std::size_t samples,
                            Rng& rng) {
  return eval_impl(dual.generative, &dual.discriminative, seq, upto_task,
                   samples, rng, nullptr);
}

ExperimentResult run_experiment(const TaskSequence& seq,
                                const ExperimentConfig& cfg) {
  if (seq.tasks.empty())
    throw std::invalid_argument("run_experiment: empty task sequence");
  Rng rng(cfg.seed);

  const ModeKind kind = cfg.mode.kind;
  const bool replay_mode = kind == ModeKind::CDVAE || kind == ModeKind::OCDVAE;
  const bool dual_mode = kind == ModeKind::DUAL;

  // ISO sees all data from the start as one task; evaluation still follows
  // the original task structure.
  std::vector<const Task*> units;
  Task merged;
  if (kind == ModeKind::ISO) {
    for (const Task& t : seq.tasks) {
      merged.train = concat(merged.train, t.train);
      merged.val = concat(merged.val, t.val);
      merged.test = concat(merged.test, t.test);
      merged.class_ids.insert(merged.class_ids.end(), t.class_ids.begin(),
                              t.class_ids.end());
    }
    units.push_back(&merged);
  } else {
    for (const Task& t : seq.tasks) units.push_back(&t);
  }

  JointModelConfig mc;
  mc.input_dim = seq.input_dim;
  mc.latent_dim = cfg.latent_dim;
  mc.hidden = cfg.hidden;
  mc.num_classes = units.front()->class_ids.size();
  mc.beta = cfg.beta;

  ExperimentResult result;
  JointModel model(mc, rng);
  JointTrainer trainer(model, cfg.adam);
  trainer.intro.enabled = cfg.mode.intro && !dual_mode;
  trainer.intro.margin = cfg.intro_margin;
  if (dual_mode) trainer.class_weight = 0.0;

  std::optional<DiscNet> disc;
  std::optional<DiscTrainer> disc_trainer;
  std::optional<DiscNet> frozen_disc;
  if (dual_mode) {
    disc.emplace(seq.input_dim, cfg.hidden, units.front()->class_ids.size(),
                 rng);
    disc_trainer.emplace(*disc, cfg.adam);
  }

  std::optional<JointModel> frozen;
  std::optional<evt::MetaRecognitionModel> meta;
  std::size_t classes_so_far = 0;
  std::size_t real_so_far = 0;
  Batch union_train;  // UB/ISO accumulation

  for (std::size_t u = 0; u < units.size(); ++u) {
    const Task& task = *units[u];
    classes_so_far += task.class_ids.size();

    replay::GeneratedSet gen;
    if (u > 0) {
      if (replay_mode || dual_mode) {
        replay::ReplayConfig rcfg = cfg.replay;
        rcfg.filtering = kind == ModeKind::OCDVAE ||
                         (dual_mode && cfg.mode.dual_evt_filter);
        if (!cfg.replay_count_fixed) rcfg.replay_count = real_so_far;
        gen = replay::generate_replay(
            *frozen, meta.has_value() ? &*meta : nullptr, rcfg, rng);
        if (dual_mode && gen.size() > 0)
          gen.y = frozen_disc->predict(gen.x);
        result.acceptance_rates.push_back(gen.acceptance_rate);
      }
      trainer.expand_classifier(classes_so_far, rng);
      if (dual_mode) disc_trainer->expand(classes_so_far, rng);
    }

    Batch train_data;
    if (kind == ModeKind::UB || kind == ModeKind::ISO) {
      union_train = concat(union_train, task.train);
      train_data = union_train;
    } else {
      train_data = task.train;
    }

    replay::MixedStream stream(train_data,
                               gen.size() > 0 ? &gen : nullptr, cfg.batch);
    Batch real_half, replay_half;
    for (std::size_t epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
      stream.begin_epoch(rng);
      while (stream.next(real_half, replay_half)) {
        if (replay_half.size() > 0) {
          trainer.train_step_mixed(real_half, replay_half, cfg.denoise_sigma,
                                   rng);
          if (dual_mode)
            disc_trainer->train_step(real_half, &replay_half);
        } else {
          trainer.train_step(real_half, cfg.denoise_sigma, rng);
          if (dual_mode) disc_trainer->train_step(real_half, nullptr);
        }
      }
    }
    real_so_far += task.train.size();

    // Task-end bookkeeping: snapshot for the next task's replay; the meta
    // model is rebuilt on the mixed training set in filtering modes.
    if (replay_mode || dual_mode) {
      frozen = model;
      if (dual_mode) frozen_disc = *disc;
      if (kind == ModeKind::OCDVAE ||
          (dual_mode && cfg.mode.dual_evt_filter)) {
        if (dual_mode) {
          Batch mixed = train_data;
          if (gen.size() > 0) mixed = concat(train_data, Batch{gen.x, gen.y});
          Matrix mu, logvar;
          encode_all(model, mixed.x, mu, logvar);
          meta = evt::build_meta_model(mu, mixed.y, disc->predict(mixed.x),
                                       cfg.tail_fraction, u + 1,
                                       cfg.min_tail_count);
        } else {
          meta = build_meta_from_train(model, train_data,
                                       gen.size() > 0 ? &gen : nullptr,
                                       cfg.tail_fraction, cfg.min_tail_count,
                                       u + 1);
        }
      }
    }

    const std::size_t upto =
        kind == ModeKind::ISO ? seq.tasks.size() : u + 1;
    const bool last = u + 1 == units.size();
    Matrix confusion;
    if (last)
      confusion = Matrix(seq.total_classes, seq.total_classes, 0.0);
    result.metrics.push_back(eval_impl(model, disc ? &*disc : nullptr, seq,
                                       upto, cfg.eval_samples, rng,
                                       last ? &confusion : nullptr));
    if (last) result.confusion = std::move(confusion);
  }

  // Export meta model for every mode: filtering modes keep the one from the
  // final task, the others build it once from the final training data. Here
  // the meta model is auxiliary output, so a failed build is reported, not
  // fatal.
  if (!meta.has_value()) {
    try {
      if (dual_mode) {
        const Task& task = *units.back();
        Matrix mu, logvar;
        encode_all(model, task.train.x, mu, logvar);
        meta = evt::build_meta_model(mu, task.train.y,
                                     disc->predict(task.train.x),
                                     cfg.tail_fraction, units.size(),
                                     cfg.min_tail_count);
      } else {
        const Batch& final_train =
            (kind == ModeKind::UB || kind == ModeKind::ISO)
                ? union_train
                : units.back()->train;
        meta = build_meta_from_train(model, final_train, nullptr,
                                     cfg.tail_fraction, cfg.min_tail_count,
                                     units.size());
      }
    } catch (const std::exception& e) {
      result.meta_build_error = e.what();
    }
  }

  result.model = std::move(model);
  if (dual_mode) result.discriminative = std::move(*disc);
  result.meta = std::move(meta);
  return result;
}

OpensetReport openset_sweep(
    const JointModel& model, const evt::MetaRecognitionModel& meta,
    const Matrix& known_val, const Matrix& known_test,
    const std::vector<std::pair<std::string, Matrix>>& unknown_sets,
    std::size_t samples, Rng& rng, double target_inlier_fraction) {
  const evt::OpensetScores val_scores =
      evt::openset_criteria(model, &meta, known_val, samples, rng);

  const double entropy_cut =
      evt::empirical_quantile(val_scores.entropy, target_inlier_fraction);
  const double recon_cut =
      evt::empirical_quantile(val_scores.recon, target_inlier_fraction);
  const double omega_star =
      evt::empirical_quantile(val_scores.evt_prob, target_inlier_fraction);

  OpensetReport report;
  std::vector<std::pair<std::string, const Matrix*>> sets;
  sets.emplace_back("known_test", &known_test);
  for (const auto& [name, x] : unknown_sets) sets.emplace_back(name, &x);

  for (const auto& [name, x] : sets) {
    const evt::OpensetScores sc =
        evt::openset_criteria(model, &meta, *x, samples, rng);
    const double n = static_cast<double>(x->rows);
    auto flagged = [&](const std::vector<double>& v, double cut) {
      std::size_t count = 0;
      for (double s : v) count += s > cut;
      return 100.0 * static_cast<double>(count) / n;
    };
    report.rows.push_back(
        {"entropy", name, entropy_cut, flagged(sc.entropy, entropy_cut)});
    report.rows.push_back(
        {"reconstruction", name, recon_cut, flagged(sc.recon, recon_cut)});
    report.rows.push_back(
        {"evt", name, omega_star, flagged(sc.evt_prob, omega_star)});

    for (int k = 0; k < 100; ++k) {
      const double omega = static_cast<double>(k) / 99.0;
      std::size_t count = 0;
      for (double w : sc.evt_prob) count += w > omega;
      report.curve.push_back(
          {omega, name, static_cast<double>(count) / n});
    }
  }
  return report;
}

}  // namespace ocreplay::continual
