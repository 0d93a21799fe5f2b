#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ocreplay/continual.hpp"

using namespace ocreplay;
using namespace ocreplay::continual;

namespace {

data::LabeledDataset blob_set(std::size_t classes, std::size_t per_class,
                              double sigma, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.num_classes = classes;
  spec.points_per_class = per_class;
  spec.dim = 8;
  spec.center_separation = 0.4;
  spec.cluster_sigma = sigma;
  Rng rng(seed);
  return data::make_blobs(spec, rng);
}

TaskSequence blob_sequence(std::size_t classes, std::size_t classes_per_task,
                           std::uint64_t seed) {
  const data::LabeledDataset train = blob_set(classes, 200, 0.10, seed);
  const data::LabeledDataset test = blob_set(classes, 40, 0.10, seed + 1);
  Rng rng(seed + 2);
  return split_classes(train, test, classes_per_task, 0.1, rng);
}

ExperimentConfig small_config(ModeKind kind, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.mode.kind = kind;
  cfg.latent_dim = 4;
  cfg.hidden = 24;
  cfg.beta = 0.1;
  cfg.denoise_sigma = 0.05;
  cfg.epochs_per_task = 30;
  cfg.batch = 32;
  cfg.eval_samples = 10;
  cfg.tail_fraction = 0.3;
  cfg.replay.omega = 0.3;
  cfg.replay.max_attempts_factor = 3000;
  cfg.seed = seed;
  return cfg;
}

// hand-built model whose latent copies the 2-D input and whose classifier
// picks the matching lattice quadrant; posterior collapsed to mu
JointModel quadrant_stub(const std::vector<std::vector<double>>& centers,
                         Rng& rng) {
  JointModelConfig mc;
  mc.input_dim = 2;
  mc.latent_dim = 2;
  mc.hidden = 4;
  mc.num_classes = centers.size();
  JointModel m(mc, rng);

  auto zero = [](Dense& d) {
    for (double& v : d.w.data) v = 0.0;
    for (double& v : d.b.data) v = 0.0;
  };
  for (Dense* d : {&m.enc1, &m.enc2, &m.enc_mu, &m.enc_logvar, &m.cls})
    zero(*d);

  // h1 = relu([x, -x]), passthrough second layer, mu = h1[0:2] - h1[2:4]
  m.enc1.w = Matrix{{1, 0, -1, 0}, {0, 1, 0, -1}};
  for (int i = 0; i < 4; ++i) m.enc2.w(i, i) = 1.0;
  m.enc_mu.w = Matrix{{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  for (std::size_t j = 0; j < 2; ++j) m.enc_logvar.b(0, j) = -60.0;

  // nearest-center partition: argmax of center.z - |center|^2 / 2
  for (std::size_t c = 0; c < centers.size(); ++c) {
    m.cls.w(0, c) = centers[c][0];
    m.cls.w(1, c) = centers[c][1];
    m.cls.b(0, c) =
        -0.5 * (centers[c][0] * centers[c][0] + centers[c][1] * centers[c][1]);
  }
  return m;
}

TaskSequence quadrant_sequence(const std::vector<std::vector<double>>& centers,
                               std::size_t per_task, Rng& rng) {
  TaskSequence seq;
  seq.input_dim = 2;
  seq.total_classes = centers.size();
  seq.img_rows = 1;
  seq.img_cols = 2;
  for (std::size_t c = 0; c < centers.size(); c += per_task) {
    Task t;
    for (std::size_t k = c; k < std::min(c + per_task, centers.size()); ++k)
      t.class_ids.push_back(static_cast<int>(k));
    auto fill = [&](Batch& b, std::size_t n) {
      b.x = Matrix(n * t.class_ids.size(), 2);
      b.y.resize(b.x.rows);
      std::size_t row = 0;
      for (int cls : t.class_ids)
        for (std::size_t i = 0; i < n; ++i, ++row) {
          for (int j = 0; j < 2; ++j)
            b.x(row, static_cast<std::size_t>(j)) = std::clamp(
                centers[static_cast<std::size_t>(cls)]
                       [static_cast<std::size_t>(j)] +
                    0.02 * rng.normal(),
                0.0, 1.0);
          b.y[row] = cls;
        }
    };
    fill(t.train, 30);
    fill(t.val, 10);
    fill(t.test, 20);
    seq.tasks.push_back(std::move(t));
  }
  return seq;
}

const std::vector<std::vector<double>> kQuadCenters = {
    {0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};

}  // namespace

TEST_CASE("split_classes groups ascending classes with a remainder task") {
  SUBCASE("10 classes in groups of two") {
    const data::LabeledDataset train = blob_set(10, 30, 0.02, 1);
    const data::LabeledDataset test = blob_set(10, 10, 0.02, 2);
    Rng rng(3);
    const TaskSequence seq = split_classes(train, test, 2, 0.1, rng);
    REQUIRE(seq.tasks.size() == 5);
    CHECK(seq.total_classes == 10);
    for (std::size_t t = 0; t < 5; ++t) {
      REQUIRE(seq.tasks[t].class_ids.size() == 2);
      CHECK(seq.tasks[t].class_ids[0] == static_cast<int>(2 * t));
      CHECK(seq.tasks[t].class_ids[1] == static_cast<int>(2 * t + 1));
      for (int y : seq.tasks[t].train.y) {
        CHECK(y >= static_cast<int>(2 * t));
        CHECK(y <= static_cast<int>(2 * t + 1));
      }
    }
  }
  SUBCASE("remainder rule: 3 classes in groups of two") {
    const data::LabeledDataset train = blob_set(3, 30, 0.02, 4);
    const data::LabeledDataset test = blob_set(3, 10, 0.02, 5);
    Rng rng(6);
    const TaskSequence seq = split_classes(train, test, 2, 0.1, rng);
    REQUIRE(seq.tasks.size() == 2);
    CHECK(seq.tasks[0].class_ids == std::vector<int>{0, 1});
    CHECK(seq.tasks[1].class_ids == std::vector<int>{2});
  }
  SUBCASE("classes_per_task covering everything gives a single task") {
    const data::LabeledDataset train = blob_set(4, 30, 0.02, 7);
    const data::LabeledDataset test = blob_set(4, 10, 0.02, 8);
    Rng rng(9);
    const TaskSequence seq = split_classes(train, test, 4, 0.1, rng);
    CHECK(seq.tasks.size() == 1);
  }
  SUBCASE("zero classes per task is rejected") {
    const data::LabeledDataset train = blob_set(4, 30, 0.02, 10);
    Rng rng(11);
    CHECK_THROWS_AS(split_classes(train, train, 0, 0.1, rng),
                    std::invalid_argument);
  }
}

TEST_CASE("cross_dataset_sequence keeps the global id space contiguous") {
  const data::LabeledDataset a_train = blob_set(3, 30, 0.02, 20);
  const data::LabeledDataset a_test = blob_set(3, 10, 0.02, 21);
  const data::LabeledDataset b_train = blob_set(2, 30, 0.02, 22);
  const data::LabeledDataset b_test = blob_set(2, 10, 0.02, 23);
  Rng rng(24);
  const TaskSequence seq = cross_dataset_sequence(
      {{a_train, a_test}, {b_train, b_test}}, 0.1, rng);
  REQUIRE(seq.tasks.size() == 2);
  CHECK(seq.total_classes == 5);
  CHECK(seq.tasks[0].class_ids == std::vector<int>{0, 1, 2});
  CHECK(seq.tasks[1].class_ids == std::vector<int>{3, 4});
  for (int y : seq.tasks[1].train.y) CHECK(y >= 3);
}

TEST_CASE("evaluate on a hand-built perfect classifier yields alpha = 1") {
  Rng rng(31);
  const TaskSequence seq = quadrant_sequence(kQuadCenters, 2, rng);
  Rng mrng(32);
  const JointModel stub = quadrant_stub(kQuadCenters, mrng);

  Rng erng(33);
  const MetricsRecord rec = evaluate(stub, seq, 2, 10, erng);
  CHECK(rec.alpha_base == 1.0);
  CHECK(rec.alpha_new == 1.0);
  CHECK(rec.alpha_all == 1.0);
  CHECK(rec.classes_seen == 4);
}

TEST_CASE("evaluate on a constant-class stub reports that class frequency") {
  Rng rng(41);
  const TaskSequence seq = quadrant_sequence(kQuadCenters, 2, rng);
  Rng mrng(42);
  JointModel stub = quadrant_stub(kQuadCenters, mrng);
  for (double& v : stub.cls.w.data) v = 0.0;
  stub.cls.b(0, 2) = 5.0;  // always predicts class 2

  Rng erng(43);
  const MetricsRecord rec = evaluate(stub, seq, 2, 5, erng);
  // class 2 is a quarter of the union test set
  CHECK(rec.alpha_all == doctest::Approx(0.25));
  CHECK(rec.alpha_base == 0.0);
}

TEST_CASE("sample count does not matter once the posterior collapses") {
  Rng rng(51);
  const TaskSequence seq = quadrant_sequence(kQuadCenters, 2, rng);
  Rng mrng(52);
  const JointModel stub = quadrant_stub(kQuadCenters, mrng);

  Rng e1(53), e2(999);
  const MetricsRecord r1 = evaluate(stub, seq, 2, 1, e1);
  const MetricsRecord r100 = evaluate(stub, seq, 2, 100, e2);
  CHECK(r1.alpha_base == r100.alpha_base);
  CHECK(r1.alpha_new == r100.alpha_new);
  CHECK(r1.alpha_all == r100.alpha_all);
}

TEST_CASE("evaluate reconstruction and KL bookkeeping on analytic stubs") {
  Rng rng(45);
  const TaskSequence seq = quadrant_sequence(kQuadCenters, 2, rng);
  Rng mrng(46);
  JointModel stub = quadrant_stub(kQuadCenters, mrng);
  // zero decoder: every pixel probability is 0.5, so the per-pixel BCE is
  // exactly ln 2 whatever the target; zero posterior gives zero KL
  for (Dense* d : {&stub.dec1, &stub.dec2, &stub.dec_out}) {
    for (double& v : d->w.data) v = 0.0;
    for (double& v : d->b.data) v = 0.0;
  }
  for (double& v : stub.enc1.w.data) v = 0.0;
  for (double& v : stub.enc_mu.w.data) v = 0.0;
  for (double& v : stub.enc_logvar.b.data) v = 0.0;

  Rng erng(47);
  const MetricsRecord rec = evaluate(stub, seq, 2, 3, erng);
  CHECK(rec.gamma_all_px == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(rec.gamma_all ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));  // 2 pixels
  CHECK(rec.kl_all == doctest::Approx(0.0));
}

TEST_CASE("alpha_all equals the sample-weighted mean of per-task accuracies") {
  Rng rng(61);
  // uneven task sizes through a remainder split
  const TaskSequence seq = quadrant_sequence(kQuadCenters, 3, rng);
  Rng mrng(62);
  const JointModel stub = quadrant_stub(kQuadCenters, mrng);

  Rng ea(63), eb(64), ec(65);
  const MetricsRecord all = evaluate(stub, seq, 2, 4, ea);
  const MetricsRecord first = evaluate(stub, seq, 1, 4, eb);
  const MetricsRecord second = evaluate(stub, seq, 2, 4, ec);
  const double n1 = static_cast<double>(seq.tasks[0].test.size());
  const double n2 = static_cast<double>(seq.tasks[1].test.size());
  const double weighted =
      (first.alpha_all * n1 + second.alpha_new * n2) / (n1 + n2);
  CHECK(all.alpha_all == doctest::Approx(weighted).epsilon(1e-12));
}

TEST_CASE("mode lattice on split blobs: LB <= CDVAE and OCDVAE <= UB + margin") {
  const TaskSequence seq = blob_sequence(8, 2, 100);

  auto final_alpha = [&](ModeKind kind) {
    const ExperimentResult res = run_experiment(seq, small_config(kind, 7));
    REQUIRE(res.metrics.size() == 4);
    return res.metrics.back().alpha_all;
  };

  const double lb = final_alpha(ModeKind::LB);
  const double cdvae = final_alpha(ModeKind::CDVAE);
  const double ocdvae = final_alpha(ModeKind::OCDVAE);
  const double ub = final_alpha(ModeKind::UB);

  // full forgetting leaves roughly the last task's share of the classes
  CHECK(lb < 0.3);
  CHECK(lb <= cdvae);
  CHECK(ocdvae <= ub + 0.02);
  CHECK(ocdvae >= lb + 0.3);
  CHECK(ocdvae >= 0.7);
  CHECK(ub > 0.9);
}

TEST_CASE("filtered replay in OCDVAE mode respects the rejection prior") {
  const TaskSequence seq = blob_sequence(4, 2, 200);
  ExperimentConfig cfg = small_config(ModeKind::OCDVAE, 8);
  const ExperimentResult res = run_experiment(seq, cfg);
  REQUIRE(res.meta.has_value());
  REQUIRE(res.acceptance_rates.size() == 1);
  CHECK(res.acceptance_rates[0] > 0.0);
  CHECK(res.acceptance_rates[0] <= 1.0);
  REQUIRE(res.metrics.size() == 2);
  CHECK(res.metrics.back().alpha_all > 0.5);
}

TEST_CASE("experiments are bit-deterministic under one seed") {
  const TaskSequence seq = blob_sequence(4, 2, 200);
  const ExperimentConfig cfg = small_config(ModeKind::OCDVAE, 17);
  const ExperimentResult a = run_experiment(seq, cfg);
  const ExperimentResult b = run_experiment(seq, cfg);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].alpha_all == b.metrics[i].alpha_all);
    CHECK(a.metrics[i].gamma_all == b.metrics[i].gamma_all);
    CHECK(a.metrics[i].kl_all == b.metrics[i].kl_all);
  }
  const auto pa = a.model.parameters_const();
  const auto pb = b.model.parameters_const();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->size(); ++j)
      CHECK(pa[i]->data[j] == pb[i]->data[j]);
}

TEST_CASE("replay modes on a single-task sequence reduce to ISO") {
  const TaskSequence seq = blob_sequence(4, 4, 400);  // one task
  REQUIRE(seq.tasks.size() == 1);

  const ExperimentResult iso =
      run_experiment(seq, small_config(ModeKind::ISO, 23));
  const ExperimentResult ocdvae =
      run_experiment(seq, small_config(ModeKind::OCDVAE, 23));
  const ExperimentResult lb =
      run_experiment(seq, small_config(ModeKind::LB, 23));

  REQUIRE(iso.metrics.size() == 1);
  REQUIRE(ocdvae.metrics.size() == 1);
  CHECK(iso.metrics[0].alpha_all == ocdvae.metrics[0].alpha_all);
  CHECK(iso.metrics[0].gamma_all == ocdvae.metrics[0].gamma_all);
  CHECK(iso.metrics[0].alpha_all == lb.metrics[0].alpha_all);
  const auto pi = iso.model.parameters_const();
  const auto po = ocdvae.model.parameters_const();
  for (std::size_t i = 0; i < pi.size(); ++i)
    for (std::size_t j = 0; j < pi[i]->size(); ++j)
      CHECK(pi[i]->data[j] == po[i]->data[j]);
}

TEST_CASE("ISO over a multi-task sequence emits one final record") {
  const TaskSequence seq = blob_sequence(4, 2, 500);
  const ExperimentResult iso =
      run_experiment(seq, small_config(ModeKind::ISO, 29));
  REQUIRE(iso.metrics.size() == 1);
  CHECK(iso.metrics[0].t == 2);
  CHECK(iso.metrics[0].classes_seen == 4);
  CHECK(iso.metrics[0].alpha_all > 0.9);
}

TEST_CASE("dual mode trains separate generative and discriminative models") {
  const TaskSequence seq = blob_sequence(4, 2, 200);
  ExperimentConfig cfg = small_config(ModeKind::DUAL, 31);
  const ExperimentResult res = run_experiment(seq, cfg);
  REQUIRE(res.discriminative.has_value());
  REQUIRE(res.metrics.size() == 2);
  CHECK(res.metrics.back().alpha_all > 0.5);
  CHECK(res.metrics.back().alpha_all <= 1.0);
  REQUIRE(res.meta.has_value());
}

TEST_CASE("dual mode with the EVT filter builds and honors its meta model") {
  const TaskSequence seq = blob_sequence(4, 2, 200);
  ExperimentConfig cfg = small_config(ModeKind::DUAL, 31);
  cfg.mode.dual_evt_filter = true;
  const ExperimentResult res = run_experiment(seq, cfg);
  REQUIRE(res.meta.has_value());
  REQUIRE(res.acceptance_rates.size() == 1);
  CHECK(res.acceptance_rates[0] > 0.0);
  CHECK(res.acceptance_rates[0] <= 1.0);
  CHECK(res.metrics.back().alpha_all > 0.5);
}

TEST_CASE("introspective training runs and stays deterministic") {
  const TaskSequence seq = blob_sequence(4, 2, 200);
  ExperimentConfig cfg = small_config(ModeKind::OCDVAE, 8);
  cfg.mode.intro = true;
  cfg.intro_margin = 1.0;
  const ExperimentResult a = run_experiment(seq, cfg);
  const ExperimentResult b = run_experiment(seq, cfg);
  CHECK(a.metrics.back().alpha_all > 0.5);
  CHECK(a.metrics.back().alpha_all == b.metrics.back().alpha_all);
  CHECK(std::isfinite(a.metrics.back().gamma_all));
}

TEST_CASE("shrinking beta through a 2-D bottleneck restores separability") {
  // eight classes forced through a 2-D latent: a large beta collapses the
  // structure the linear classifier needs, small beta recovers it
  const TaskSequence seq = blob_sequence(8, 8, 100);
  auto accuracy_at = [&](double beta) {
    ExperimentConfig cfg = small_config(ModeKind::ISO, 1);
    cfg.latent_dim = 2;
    cfg.beta = beta;
    cfg.epochs_per_task = 40;
    return run_experiment(seq, cfg).metrics.back().alpha_all;
  };
  const double a40 = accuracy_at(4.0);
  const double a10 = accuracy_at(1.0);
  const double a01 = accuracy_at(0.1);
  CHECK(a40 < a10);
  CHECK(a10 < a01);
  CHECK(a01 > 0.75);
  CHECK(a40 < 0.5);
}

TEST_CASE("openset sweep orders unknown data above known test data") {
  // train on the first two blob classes only
  const TaskSequence known = blob_sequence(2, 2, 700);
  ExperimentConfig cfg = small_config(ModeKind::ISO, 37);
  cfg.epochs_per_task = 40;
  const ExperimentResult res = run_experiment(known, cfg);
  REQUIRE(res.meta.has_value());

  // unknown data: blobs drawn at different lattice corners
  data::SyntheticSpec far_spec;
  far_spec.num_classes = 9;
  far_spec.points_per_class = 30;
  far_spec.dim = 8;
  far_spec.center_separation = 0.45;
  far_spec.cluster_sigma = 0.05;
  Rng urng(38);
  data::LabeledDataset unknown_all = data::make_blobs(far_spec, urng);
  // keep only classes 4.. (centers away from the known two)
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < unknown_all.size(); ++i)
    if (unknown_all.labels[i] >= 4) keep.push_back(i);
  Matrix unknown(keep.size(), 8);
  for (std::size_t i = 0; i < keep.size(); ++i)
    std::copy(unknown_all.images.row(keep[i]),
              unknown_all.images.row(keep[i]) + 8, unknown.row(i));

  Rng srng(39);
  const OpensetReport report = openset_sweep(
      res.model, *res.meta, known.tasks[0].val.x, known.tasks[0].test.x,
      {{"far_blobs", unknown}}, 10, srng);

  double known_evt = -1.0, unknown_evt = -1.0;
  for (const auto& row : report.rows) {
    if (row.criterion != "evt") continue;
    if (row.dataset == "known_test") known_evt = row.percent_flagged;
    if (row.dataset == "far_blobs") unknown_evt = row.percent_flagged;
  }
  REQUIRE(known_evt >= 0.0);
  REQUIRE(unknown_evt >= 0.0);
  // self-consistency near the 5% calibration level, strict ordering below
  CHECK(known_evt < 20.0);
  CHECK(unknown_evt > known_evt);

  // the rejection-prior curve ends at zero flagged for omega = 1
  for (const auto& pt : report.curve)
    if (pt.omega == 1.0) CHECK(pt.fraction_flagged == 0.0);
  const std::size_t sets = 2;
  CHECK(report.curve.size() == 100 * sets);
}
