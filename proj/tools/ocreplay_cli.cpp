// ocreplay: open-world continual learning with EVT-filtered generative
// replay. Subcommands: train, openset, gradcheck, replay-demo, report.

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ocreplay/artifacts.hpp"
#include "ocreplay/checkpoint.hpp"
#include "ocreplay/continual.hpp"
#include "ocreplay/data.hpp"
#include "ocreplay/evt.hpp"
#include "ocreplay/replay.hpp"

namespace fs = std::filesystem;
using namespace ocreplay;

namespace {

struct RunConfig {
  std::string mode = "ocdvae";
  std::string dataset = "blobs";
  std::string data_dir;
  std::string output_dir = "run";
  std::size_t classes_per_task = 2;
  std::size_t epochs_per_task = 20;
  double beta = 0.1;
  std::size_t latent_dim = 60;
  std::size_t hidden_width = 400;
  double denoise_sigma = 0.25;
  double omega = 0.01;
  double tail_fraction = 0.05;
  std::size_t replay_count = 0;  // 0 = total size of all previous tasks
  std::size_t max_attempts_factor = 100;
  std::size_t eval_samples = 100;
  std::size_t batch = 128;
  double lr = 0.001;
  double val_fraction = 0.05;
  std::uint64_t seed = 1;
  bool intro = false;
  double intro_margin = 1.0;
  bool dual_evt = false;
  int threads = 1;
  // synthetic task parameters (dataset = blobs)
  std::size_t blob_classes = 8;
  std::size_t blob_train_points = 200;
  std::size_t blob_test_points = 40;
  std::size_t blob_dim = 8;
  double blob_separation = 0.4;
  double blob_sigma = 0.1;
};

// ---------------------------------------------------------------- config io

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// flat TOML subset: key = value with strings, numbers, booleans, # comments
std::map<std::string, std::string> parse_flat_toml(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool in_quote = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_quote = !in_quote;
      if (line[i] == '#' && !in_quote) {
        line = line.substr(0, i);
        break;
      }
    }
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[')
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": sections are not supported; use flat keys");
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> parse_json_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  in >> j;
  std::map<std::string, std::string> kv;
  for (const auto& [key, value] : j.items()) {
    if (value.is_string())
      kv[key] = value.get<std::string>();
    else if (value.is_boolean())
      kv[key] = value.get<bool>() ? "true" : "false";
    else
      kv[key] = value.dump();
  }
  return kv;
}

void apply_config_value(RunConfig& cfg, const std::string& key,
                        const std::string& value) {
  auto as_u64 = [&] { return std::stoull(value); };
  auto as_f = [&] { return std::stod(value); };
  auto as_b = [&] {
    if (value == "true") return true;
    if (value == "false") return false;
    throw std::runtime_error("expected true/false for " + key);
  };
  if (key == "mode") cfg.mode = value;
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "data_dir") cfg.data_dir = value;
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "classes_per_task") cfg.classes_per_task = as_u64();
  else if (key == "epochs_per_task") cfg.epochs_per_task = as_u64();
  else if (key == "beta") cfg.beta = as_f();
  else if (key == "latent_dim") cfg.latent_dim = as_u64();
  else if (key == "hidden_width") cfg.hidden_width = as_u64();
  else if (key == "denoise_sigma") cfg.denoise_sigma = as_f();
  else if (key == "omega") cfg.omega = as_f();
  else if (key == "tail_fraction") cfg.tail_fraction = as_f();
  else if (key == "replay_count") cfg.replay_count = as_u64();
  else if (key == "max_attempts_factor") cfg.max_attempts_factor = as_u64();
  else if (key == "eval_samples") cfg.eval_samples = as_u64();
  else if (key == "batch") cfg.batch = as_u64();
  else if (key == "lr") cfg.lr = as_f();
  else if (key == "val_fraction") cfg.val_fraction = as_f();
  else if (key == "seed") cfg.seed = as_u64();
  else if (key == "intro") cfg.intro = as_b();
  else if (key == "intro_margin") cfg.intro_margin = as_f();
  else if (key == "dual_evt") cfg.dual_evt = as_b();
  else if (key == "threads") cfg.threads = static_cast<int>(as_u64());
  else if (key == "blob_classes") cfg.blob_classes = as_u64();
  else if (key == "blob_train_points") cfg.blob_train_points = as_u64();
  else if (key == "blob_test_points") cfg.blob_test_points = as_u64();
  else if (key == "blob_dim") cfg.blob_dim = as_u64();
  else if (key == "blob_separation") cfg.blob_separation = as_f();
  else if (key == "blob_sigma") cfg.blob_sigma = as_f();
  else throw std::runtime_error("unknown config key '" + key + "'");
}

nlohmann::ordered_json resolved_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = c.mode;
  j["dataset"] = c.dataset;
  j["data_dir"] = c.data_dir;
  j["output_dir"] = c.output_dir;
  j["classes_per_task"] = c.classes_per_task;
  j["epochs_per_task"] = c.epochs_per_task;
  j["beta"] = c.beta;
  j["latent_dim"] = c.latent_dim;
  j["hidden_width"] = c.hidden_width;
  j["denoise_sigma"] = c.denoise_sigma;
  j["omega"] = c.omega;
  j["tail_fraction"] = c.tail_fraction;
  j["replay_count"] = c.replay_count;
  j["max_attempts_factor"] = c.max_attempts_factor;
  j["eval_samples"] = c.eval_samples;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["val_fraction"] = c.val_fraction;
  j["seed"] = c.seed;
  j["intro"] = c.intro;
  j["intro_margin"] = c.intro_margin;
  j["dual_evt"] = c.dual_evt;
  j["threads"] = c.threads;
  j["blob_classes"] = c.blob_classes;
  j["blob_train_points"] = c.blob_train_points;
  j["blob_test_points"] = c.blob_test_points;
  j["blob_dim"] = c.blob_dim;
  j["blob_separation"] = c.blob_separation;
  j["blob_sigma"] = c.blob_sigma;
  return j;
}

// ---------------------------------------------------------------- datasets

std::string data_root(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("OCREPLAY_DATA_DIR")) return env;
  return "data";
}

std::string find_idx_file(const std::string& root, const std::string& subdir,
                          const std::string& name) {
  for (const std::string dir : {root + "/" + subdir, root}) {
    for (const std::string suffix : {"", ".gz"}) {
      const std::string path = dir + "/" + name + suffix;
      if (fs::exists(path)) return path;
    }
  }
  throw std::runtime_error("dataset file '" + name + "' not found under " +
                           root + " (set --data-dir or OCREPLAY_DATA_DIR; "
                           "see tools/fetch_mnist.sh)");
}

std::pair<data::LabeledDataset, data::LabeledDataset> load_dataset(
    const RunConfig& cfg) {
  if (cfg.dataset == "blobs") {
    data::SyntheticSpec spec;
    spec.num_classes = cfg.blob_classes;
    spec.points_per_class = cfg.blob_train_points;
    spec.dim = cfg.blob_dim;
    spec.center_separation = cfg.blob_separation;
    spec.cluster_sigma = cfg.blob_sigma;
    Rng train_rng(cfg.seed * 1000 + 1);
    data::LabeledDataset train = data::make_blobs(spec, train_rng);
    spec.points_per_class = cfg.blob_test_points;
    Rng test_rng(cfg.seed * 1000 + 2);
    data::LabeledDataset test = data::make_blobs(spec, test_rng);
    return {std::move(train), std::move(test)};
  }
  std::string subdir;
  if (cfg.dataset == "mnist") subdir = "mnist";
  else if (cfg.dataset == "fashion" || cfg.dataset == "fashion-mnist")
    subdir = "fashion-mnist";
  else
    throw std::runtime_error("unknown dataset '" + cfg.dataset +
                             "' (expected mnist|fashion|blobs)");
  const std::string root = data_root(cfg);
  data::LabeledDataset train = data::load_idx_dataset(
      find_idx_file(root, subdir, "train-images-idx3-ubyte"),
      find_idx_file(root, subdir, "train-labels-idx1-ubyte"), cfg.dataset);
  data::LabeledDataset test = data::load_idx_dataset(
      find_idx_file(root, subdir, "t10k-images-idx3-ubyte"),
      find_idx_file(root, subdir, "t10k-labels-idx1-ubyte"),
      cfg.dataset + "/test");
  return {std::move(train), std::move(test)};
}

continual::ExperimentConfig experiment_config(const RunConfig& cfg) {
  continual::ExperimentConfig ec;
  ec.mode.kind = continual::parse_mode(cfg.mode);
  ec.mode.intro = cfg.intro;
  ec.mode.dual_evt_filter = cfg.dual_evt;
  ec.latent_dim = cfg.latent_dim;
  ec.hidden = cfg.hidden_width;
  ec.beta = cfg.beta;
  ec.denoise_sigma = cfg.denoise_sigma;
  ec.intro_margin = cfg.intro_margin;
  ec.adam.lr = cfg.lr;
  ec.replay.omega = cfg.omega;
  ec.replay.max_attempts_factor = cfg.max_attempts_factor;
  ec.replay.batch = cfg.batch;
  if (cfg.replay_count > 0) {
    ec.replay.replay_count = cfg.replay_count;
    ec.replay_count_fixed = true;
  }
  ec.tail_fraction = cfg.tail_fraction;
  ec.epochs_per_task = cfg.epochs_per_task;
  ec.batch = cfg.batch;
  ec.eval_samples = cfg.eval_samples;
  ec.seed = cfg.seed;
  return ec;
}

Matrix concat_x(const std::vector<const Batch*>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const Batch* b : parts) rows += b->size();
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const Batch* b : parts) {
    std::copy(b->x.data.begin(), b->x.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(at));
    at += b->x.size();
  }
  return out;
}

void write_openset_artifacts(
    const fs::path& dir, const JointModel& model,
    const evt::MetaRecognitionModel& meta, const continual::TaskSequence& seq,
    const std::vector<std::pair<std::string, Matrix>>& unknowns,
    std::size_t samples, Rng& rng) {
  std::vector<const Batch*> vals, tests;
  for (const auto& t : seq.tasks) {
    vals.push_back(&t.val);
    tests.push_back(&t.test);
  }
  const Matrix val_x = concat_x(vals, seq.input_dim);
  const Matrix test_x = concat_x(tests, seq.input_dim);
  const continual::OpensetReport report = continual::openset_sweep(
      model, meta, val_x, test_x, unknowns, samples, rng);
  artifacts::write_openset_csv((dir / "openset.csv").string(), report.rows);
  artifacts::write_omega_curve_csv((dir / "omega_curve.csv").string(),
                                   report.curve);
}

// ---------------------------------------------------------------- commands

int cmd_train(const RunConfig& cfg,
              const std::vector<std::string>& unknown_paths) {
  set_num_threads(cfg.threads);
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);

  {
    std::ofstream out(dir / "config.json");
    out << resolved_config_json(cfg).dump(2) << "\n";
  }

  auto [train, test] = load_dataset(cfg);
  Rng split_rng(cfg.seed * 1000 + 3);
  const continual::TaskSequence seq = continual::split_classes(
      train, test, cfg.classes_per_task, cfg.val_fraction, split_rng);

  const continual::ExperimentConfig ec = experiment_config(cfg);
  continual::ExperimentResult result = continual::run_experiment(seq, ec);

  artifacts::write_metrics_csv((dir / "metrics.csv").string(), result.metrics);
  artifacts::write_confusion_csv((dir / "confusion.csv").string(),
                                 result.confusion);

  {
    JointTrainer trainer(result.model, ec.adam);
    Rng rng(cfg.seed);
    save_checkpoint((dir / "model.ckpt").string(), result.model, trainer, rng);
  }
  if (!result.meta_build_error.empty())
    std::fprintf(stderr,
                 "note: no meta model exported for this run (%s)\n",
                 result.meta_build_error.c_str());
  if (result.meta.has_value()) {
    evt::save_meta_model(*result.meta, (dir / "weibull.json").string());

    std::vector<std::pair<std::string, Matrix>> unknowns;
    for (const std::string& path : unknown_paths) {
      data::IdxImages imgs =
          data::parse_idx_images(data::read_file_maybe_gzip(path));
      unknowns.emplace_back(fs::path(path).filename().string(),
                            std::move(imgs.images));
    }
    Rng sweep_rng(cfg.seed * 1000 + 7);
    write_openset_artifacts(dir, result.model, *result.meta, seq, unknowns,
                            cfg.eval_samples, sweep_rng);
  }

  for (const auto& rec : result.metrics)
    std::printf("t=%zu classes=%zu alpha_base=%.4f alpha_new=%.4f "
                "alpha_all=%.4f kl=%.4f\n",
                rec.t, rec.classes_seen, rec.alpha_base, rec.alpha_new,
                rec.alpha_all, rec.kl_all);
  return 0;
}

int cmd_openset(const RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& meta_path, const std::string& out_dir,
                const std::vector<std::string>& unknown_paths) {
  set_num_threads(cfg.threads);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const evt::MetaRecognitionModel meta = evt::load_meta_model(meta_path);

  auto [train, test] = load_dataset(cfg);
  Rng split_rng(cfg.seed * 1000 + 3);
  const continual::TaskSequence seq = continual::split_classes(
      train, test, cfg.classes_per_task, cfg.val_fraction, split_rng);

  std::vector<std::pair<std::string, Matrix>> unknowns;
  for (const std::string& path : unknown_paths) {
    data::IdxImages imgs =
        data::parse_idx_images(data::read_file_maybe_gzip(path));
    unknowns.emplace_back(fs::path(path).filename().string(),
                          std::move(imgs.images));
  }

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  Rng rng(cfg.seed * 1000 + 7);
  write_openset_artifacts(dir, ckpt.model, meta, seq, unknowns,
                          cfg.eval_samples, rng);
  std::printf("wrote %s and %s\n", (dir / "openset.csv").c_str(),
              (dir / "omega_curve.csv").c_str());
  return 0;
}

int cmd_gradcheck(bool inject_fault) {
  const struct {
    std::size_t batch, input, latent, hidden, classes;
  } configs[] = {
      {2, 5, 2, 6, 2}, {3, 7, 4, 9, 3}, {4, 6, 8, 16, 4},
      {1, 8, 3, 10, 2}, {4, 4, 5, 12, 5},
  };
  double worst = 0.0;
  std::string worst_name;
  std::uint64_t seed = 100;
  for (const auto& c : configs) {
    Rng rng(seed++);
    JointModelConfig mc;
    mc.input_dim = c.input;
    mc.latent_dim = c.latent;
    mc.hidden = c.hidden;
    mc.num_classes = c.classes;
    JointModel m(mc, rng);

    Batch b;
    b.x = Matrix(c.batch, c.input);
    for (double& v : b.x.data) v = rng.uniform();
    b.y.resize(c.batch);
    for (auto& y : b.y) y = static_cast<int>(rng.uniform_index(c.classes));

    Matrix noise(c.batch, c.input);
    for (double& v : noise.data) v = rng.normal() * 0.25;
    Matrix eps(c.batch, c.latent);
    for (double& v : eps.data) v = rng.normal();

    ForwardCache cache;
    joint_loss_forward(m, b.x, b.y, &noise, eps, 1.0, &cache);
    auto params = m.parameters();
    std::vector<Matrix> grads;
    for (const auto& p : params) grads.emplace_back(p.m->rows, p.m->cols, 0.0);
    joint_loss_backward(m, cache, b.x, b.y, 1.0, 1.0, grads);
    if (inject_fault)
      for (double& v : grads[4].data) v *= 2.0;  // corrupt enc_mu.w

    auto loss = [&]() {
      return joint_loss_forward(m, b.x, b.y, &noise, eps, 1.0, nullptr).total;
    };
    std::vector<GradCheckItem> items;
    for (std::size_t i = 0; i < params.size(); ++i)
      items.push_back({params[i].m, &grads[i], params[i].name});
    std::vector<GradCheckReport> report;
    grad_check(loss, items, 1e-5, &report);

    std::printf("config %zux%zu latent=%zu hidden=%zu classes=%zu\n", c.batch,
                c.input, c.latent, c.hidden, c.classes);
    for (const auto& r : report) {
      std::printf("  %-14s max relative error %.3e%s\n", r.name.c_str(),
                  r.max_rel_err, r.max_rel_err < 1e-4 ? "" : "  <-- FAIL");
      if (r.max_rel_err > worst) {
        worst = r.max_rel_err;
        worst_name = r.name;
      }
    }
  }
  if (worst < 1e-4) {
    std::printf("gradcheck PASS (worst %.3e)\n", worst);
    return 0;
  }
  std::printf("gradcheck FAIL: parameter %s at %.3e\n", worst_name.c_str(),
              worst);
  return 1;
}

int cmd_replay_demo(const std::string& checkpoint_path,
                    const std::string& meta_path, std::size_t n, double omega,
                    const std::string& out_dir, std::uint64_t seed,
                    std::size_t max_attempts_factor, bool filtering,
                    std::size_t width, std::size_t height) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  evt::MetaRecognitionModel meta;
  if (filtering) meta = evt::load_meta_model(meta_path);

  const fs::path dir(out_dir);
  fs::create_directories(dir);

  replay::ReplayConfig cfg;
  cfg.omega = omega;
  cfg.replay_count = n;
  cfg.max_attempts_factor = max_attempts_factor;
  cfg.filtering = filtering;
  Rng rng(seed);
  const replay::GeneratedSet gen = replay::generate_replay(
      ckpt.model, filtering ? &meta : nullptr, cfg, rng);

  if (width * height == 0) {
    const auto side = static_cast<std::size_t>(
        std::lround(std::sqrt(static_cast<double>(ckpt.model.input_dim))));
    if (side * side == ckpt.model.input_dim) {
      width = height = side;
    } else {
      width = ckpt.model.input_dim;
      height = 1;
    }
  }
  if (width * height != ckpt.model.input_dim)
    throw std::runtime_error("replay-demo: width*height must equal " +
                             std::to_string(ckpt.model.input_dim));

  std::ofstream csv(dir / "replay.csv");
  csv << "# schema=1\n";
  csv << "index,label,omega\n";
  for (std::size_t i = 0; i < gen.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.pgm", i);
    artifacts::write_pgm((dir / name).string(), gen.x.row(i), width, height);
    const double w =
        filtering
            ? evt::outlier_probability(meta, gen.z_used.row(i),
                                       ckpt.model.latent_dim)
            : 0.0;
    csv << i << ',' << gen.y[i] << ',' << artifacts::format_double(w) << '\n';
  }
  std::printf("wrote %zu samples (acceptance_rate %.4f) to %s\n", gen.size(),
              gen.acceptance_rate, dir.c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs,
               const std::string& out_path) {
  if (inputs.empty()) throw std::runtime_error("report: no metrics files");
  std::vector<artifacts::MetricsTable> tables;
  for (const std::string& path : inputs) {
    std::string file = path;
    if (fs::is_directory(path)) file = (fs::path(path) / "metrics.csv").string();
    tables.push_back(artifacts::read_metrics_csv(file));
  }
  const auto& header = tables.front().header;
  for (const auto& t : tables)
    if (t.header != header || t.rows.size() != tables.front().rows.size())
      throw std::runtime_error("report: metrics files do not line up");

  std::ostringstream out;
  out << "# schema=1\n";
  out << "t";
  for (std::size_t c = 2; c < header.size(); ++c)
    out << ',' << header[c] << "_mean," << header[c] << "_std";
  out << '\n';
  for (std::size_t r = 0; r < tables.front().rows.size(); ++r) {
    out << tables.front().rows[r][0];
    for (std::size_t c = 2; c < header.size(); ++c) {
      double mean = 0.0;
      for (const auto& t : tables) mean += t.rows[r][c];
      mean /= static_cast<double>(tables.size());
      double var = 0.0;
      for (const auto& t : tables) {
        const double d = t.rows[r][c] - mean;
        var += d * d;
      }
      var /= static_cast<double>(tables.size());
      out << ',' << artifacts::format_double(mean) << ','
          << artifacts::format_double(std::sqrt(var));
    }
    out << '\n';
  }
  if (out_path.empty()) {
    std::cout << out.str();
  } else {
    std::ofstream f(out_path);
    f << out.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"open-world continual learning with EVT-filtered generative "
               "replay"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_path;
  std::vector<std::string> unknown_paths;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "TOML or JSON config file");
    sub->add_option("--mode", cfg.mode, "iso|ub|lb|cdvae|ocdvae|dual");
    sub->add_option("--dataset", cfg.dataset, "mnist|fashion|blobs");
    sub->add_option("--data-dir", cfg.data_dir, "dataset root");
    sub->add_option("--classes-per-task", cfg.classes_per_task);
    sub->add_option("--epochs-per-task", cfg.epochs_per_task);
    sub->add_option("--beta", cfg.beta);
    sub->add_option("--latent-dim", cfg.latent_dim);
    sub->add_option("--hidden-width", cfg.hidden_width);
    sub->add_option("--denoise-sigma", cfg.denoise_sigma);
    sub->add_option("--omega", cfg.omega);
    sub->add_option("--tail-fraction", cfg.tail_fraction);
    sub->add_option("--replay-count", cfg.replay_count,
                    "0 = total size of previous tasks");
    sub->add_option("--max-attempts-factor", cfg.max_attempts_factor);
    sub->add_option("--eval-samples", cfg.eval_samples);
    sub->add_option("--batch", cfg.batch);
    sub->add_option("--lr", cfg.lr);
    sub->add_option("--val-fraction", cfg.val_fraction);
    sub->add_option("--seed", cfg.seed);
    sub->add_flag("--intro", cfg.intro, "introspective training");
    sub->add_option("--intro-margin", cfg.intro_margin);
    sub->add_flag("--dual-evt", cfg.dual_evt, "EVT-filtered dual replay");
    sub->add_option("--threads", cfg.threads);
    sub->add_option("--blob-classes", cfg.blob_classes);
    sub->add_option("--blob-train-points", cfg.blob_train_points);
    sub->add_option("--blob-test-points", cfg.blob_test_points);
    sub->add_option("--blob-dim", cfg.blob_dim);
    sub->add_option("--blob-separation", cfg.blob_separation);
    sub->add_option("--blob-sigma", cfg.blob_sigma);
  };

  CLI::App* train = app.add_subcommand("train", "run a continual experiment");
  add_common(train);
  train->add_option("--output-dir", cfg.output_dir, "results directory");
  train->add_option("--unknown", unknown_paths,
                    "IDX image files treated as unknown data in the "
                    "open-set sweep");

  CLI::App* openset =
      app.add_subcommand("openset", "open-set sweep from saved artifacts");
  add_common(openset);
  std::string ckpt_path, meta_path, out_dir = "openset_out";
  openset->add_option("--checkpoint", ckpt_path)->required();
  openset->add_option("--meta", meta_path)->required();
  openset->add_option("--out", out_dir);
  openset->add_option("--unknown", unknown_paths, "IDX image files");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  bool inject_fault = false;
  gradcheck->add_flag("--inject-fault", inject_fault,
                      "corrupt one gradient to demonstrate detection");

  CLI::App* demo = app.add_subcommand("replay-demo",
                                      "dump accepted replay samples as PGM");
  std::string demo_ckpt, demo_meta, demo_out = "replay_out";
  std::size_t demo_n = 16, demo_width = 0, demo_height = 0;
  double demo_omega = 0.01;
  std::uint64_t demo_seed = 1;
  std::size_t demo_attempts = 100;
  bool demo_unfiltered = false;
  demo->add_option("--checkpoint", demo_ckpt)->required();
  demo->add_option("--meta", demo_meta);
  demo->add_option("--n", demo_n);
  demo->add_option("--omega", demo_omega);
  demo->add_option("--out", demo_out);
  demo->add_option("--seed", demo_seed);
  demo->add_option("--max-attempts-factor", demo_attempts);
  demo->add_option("--width", demo_width);
  demo->add_option("--height", demo_height);
  demo->add_flag("--unfiltered", demo_unfiltered, "skip the EVT filter");

  CLI::App* report =
      app.add_subcommand("report", "mean/std table across per-seed metrics");
  std::vector<std::string> report_inputs;
  std::string report_out;
  report->add_option("inputs", report_inputs,
                     "metrics.csv files or run directories")
      ->required();
  report->add_option("--out", report_out, "output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    // file config first, then re-apply any explicit flags (flags win)
    if (!config_path.empty()) {
      const auto kv = config_path.size() > 5 &&
                              config_path.substr(config_path.size() - 5) ==
                                  ".json"
                          ? parse_json_config(config_path)
                          : parse_flat_toml(config_path);
      RunConfig from_file;
      for (const auto& [key, value] : kv)
        apply_config_value(from_file, key, value);
      // flags the user actually passed take precedence
      static const std::map<std::string, std::string> flag_of_key = {
          {"mode", "--mode"}, {"dataset", "--dataset"},
          {"data_dir", "--data-dir"}, {"output_dir", "--output-dir"},
          {"classes_per_task", "--classes-per-task"},
          {"epochs_per_task", "--epochs-per-task"}, {"beta", "--beta"},
          {"latent_dim", "--latent-dim"}, {"hidden_width", "--hidden-width"},
          {"denoise_sigma", "--denoise-sigma"}, {"omega", "--omega"},
          {"tail_fraction", "--tail-fraction"},
          {"replay_count", "--replay-count"},
          {"max_attempts_factor", "--max-attempts-factor"},
          {"eval_samples", "--eval-samples"}, {"batch", "--batch"},
          {"lr", "--lr"}, {"val_fraction", "--val-fraction"},
          {"seed", "--seed"}, {"intro", "--intro"},
          {"intro_margin", "--intro-margin"}, {"dual_evt", "--dual-evt"},
          {"threads", "--threads"}, {"blob_classes", "--blob-classes"},
          {"blob_train_points", "--blob-train-points"},
          {"blob_test_points", "--blob-test-points"},
          {"blob_dim", "--blob-dim"},
          {"blob_separation", "--blob-separation"},
          {"blob_sigma", "--blob-sigma"},
      };
      for (const auto& [key, value] : kv) {
        const auto it = flag_of_key.find(key);
        const CLI::Option* opt =
            it == flag_of_key.end() ? nullptr
                                    : sub->get_option_no_throw(it->second);
        const bool overridden = opt != nullptr && opt->count() > 0;
        if (!overridden) apply_config_value(cfg, key, value);
      }
    }

    if (sub == train) return cmd_train(cfg, unknown_paths);
    if (sub == openset)
      return cmd_openset(cfg, ckpt_path, meta_path, out_dir, unknown_paths);
    if (sub == gradcheck) return cmd_gradcheck(inject_fault);
    if (sub == demo)
      return cmd_replay_demo(demo_ckpt, demo_meta, demo_n, demo_omega,
                             demo_out, demo_seed, demo_attempts,
                             !demo_unfiltered, demo_width, demo_height);
    if (sub == report) return cmd_report(report_inputs, report_out);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
