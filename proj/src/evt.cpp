#include "ocreplay/evt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "ocreplay/nn.hpp"

namespace ocreplay::evt {

double cosine_distance(const double* a, const double* b, std::size_t n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
  return std::clamp(1.0 - dot / denom, 0.0, 2.0);
}

double cosine_distance(const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_distance: length mismatch " +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  return cosine_distance(a.data(), b.data(), a.size());
}

namespace {

// Log-domain sums for the profile likelihood in kappa. With
// l_i = log(x_i) and w_i = exp(kappa * (l_i - max_l)):
//   f(kappa)  = sum(w l)/sum(w) - 1/kappa - mean(l)
//   f'(kappa) = (sum(w l^2) sum(w) - sum(w l)^2)/sum(w)^2 + 1/kappa^2
struct KappaEq {
  const std::vector<double>& logs;
  double mean_log;
  double max_log;

  void sums(double kappa, double& sw, double& swl, double& swll) const {
    sw = swl = swll = 0.0;
    for (double l : logs) {
      const double w = std::exp(kappa * (l - max_log));
      sw += w;
      swl += w * l;
      swll += w * l * l;
    }
  }
  double f(double kappa) const {
    double sw, swl, swll;
    sums(kappa, sw, swl, swll);
    return swl / sw - 1.0 / kappa - mean_log;
  }
  double fprime(double kappa) const {
    double sw, swl, swll;
    sums(kappa, sw, swl, swll);
    return (swll * sw - swl * swl) / (sw * sw) + 1.0 / (kappa * kappa);
  }
};

}  // namespace

WeibullParams fit_weibull_tail(const std::vector<double>& tail) {
  if (tail.size() < 2)
    throw std::invalid_argument("fit_weibull_tail: need at least 2 points, got " +
                                std::to_string(tail.size()));
  for (std::size_t i = 0; i < tail.size(); ++i) {
    if (tail[i] < 0.0)
      throw std::invalid_argument("fit_weibull_tail: negative distance");
    if (i > 0 && tail[i] < tail[i - 1])
      throw std::invalid_argument("fit_weibull_tail: tail not ascending");
  }
  if (tail.back() <= tail.front())
    throw std::runtime_error("fit_weibull_tail: degenerate all-equal tail");

  WeibullParams p;
  p.tau = tail.front() * (1.0 - 1e-6) - 1e-12;

  std::vector<double> logs;
  logs.reserve(tail.size());
  double mean_log = 0.0, max_log = -1e300;
  for (double d : tail) {
    const double l = std::log(d - p.tau);
    logs.push_back(l);
    mean_log += l;
    max_log = std::max(max_log, l);
  }
  mean_log /= static_cast<double>(logs.size());
  const KappaEq eq{logs, mean_log, max_log};

  constexpr double kLo = 1e-3, kHi = 1e3, kTol = 1e-10;
  double kappa = 1.0;
  bool converged = false;
  for (int it = 0; it < 100; ++it) {
    const double fv = eq.f(kappa);
    if (std::fabs(fv) < kTol) {
      converged = true;
      break;
    }
    const double fp = eq.fprime(kappa);
    const double next = kappa - fv / fp;
    if (!std::isfinite(next) || next <= kLo || next >= kHi) break;
    if (std::fabs(next - kappa) < kTol * std::max(1.0, kappa)) {
      kappa = next;
      converged = true;
      break;
    }
    kappa = next;
  }
  if (!converged) {
    // f is increasing in kappa, so bisection is safe once a sign change
    // brackets the root.
    double lo = kLo, hi = kHi;
    if (eq.f(lo) > 0.0 || eq.f(hi) < 0.0)
      throw std::runtime_error(
          "fit_weibull_tail: no root in [1e-3, 1e3] after Newton failure");
    for (int it = 0; it < 200; ++it) {
      kappa = 0.5 * (lo + hi);
      const double fv = eq.f(kappa);
      if (std::fabs(fv) < kTol || (hi - lo) < kTol * kappa) break;
      if (fv > 0.0)
        hi = kappa;
      else
        lo = kappa;
    }
  }

  double sw, swl, swll;
  eq.sums(kappa, sw, swl, swll);
  // lambda = (mean(x^kappa))^(1/kappa) computed in log domain
  const double log_mean =
      kappa * max_log + std::log(sw / static_cast<double>(logs.size()));
  p.kappa = kappa;
  p.lambda = std::exp(log_mean / kappa);
  if (!std::isfinite(p.kappa) || !std::isfinite(p.lambda) || p.kappa <= 0.0 ||
      p.lambda <= 0.0)
    throw std::runtime_error("fit_weibull_tail: fit did not converge");
  return p;
}

double weibull_cdf(const WeibullParams& p, double d) {
  if (d <= p.tau) return 0.0;
  return 1.0 - std::exp(-std::pow((d - p.tau) / p.lambda, p.kappa));
}

MetaRecognitionModel build_meta_model(const Matrix& mu_latents,
                                      const std::vector<int>& labels,
                                      const std::vector<int>& predictions,
                                      double tail_fraction,
                                      std::size_t built_at_task,
                                      std::size_t min_tail_count) {
  if (labels.size() != mu_latents.rows || predictions.size() != mu_latents.rows)
    throw std::invalid_argument("build_meta_model: row/label count mismatch");
  if (tail_fraction <= 0.0 || tail_fraction > 1.0)
    throw std::invalid_argument("build_meta_model: tail_fraction must be in (0, 1]");

  std::map<int, std::vector<std::size_t>> correct;
  for (int y : labels) correct[y];  // every class present in labels
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == predictions[i])
      correct[labels[i]].push_back(i);

  MetaRecognitionModel model;
  model.latent_dim = mu_latents.cols;
  model.tail_fraction = tail_fraction;
  model.built_at_task = built_at_task;

  for (const auto& [cls, rows] : correct) {
    if (rows.size() < min_tail_count)
      throw std::runtime_error(
          "build_meta_model: class " + std::to_string(cls) + " has only " +
          std::to_string(rows.size()) + " correctly classified instances (need " +
          std::to_string(min_tail_count) + ")");

    std::vector<double> mean(model.latent_dim, 0.0);
    for (std::size_t r : rows) {
      const double* row = mu_latents.row(r);
      for (std::size_t j = 0; j < model.latent_dim; ++j) mean[j] += row[j];
    }
    for (double& v : mean) v /= static_cast<double>(rows.size());

    std::vector<double> dist;
    dist.reserve(rows.size());
    for (std::size_t r : rows)
      dist.push_back(
          cosine_distance(mean.data(), mu_latents.row(r), model.latent_dim));
    std::sort(dist.begin(), dist.end());

    std::size_t tail_n = static_cast<std::size_t>(
        std::ceil(tail_fraction * static_cast<double>(dist.size())));
    tail_n = std::clamp<std::size_t>(tail_n, 2, dist.size());
    const std::vector<double> tail(dist.end() - static_cast<std::ptrdiff_t>(tail_n),
                                   dist.end());
    WeibullParams wb;
    try {
      wb = fit_weibull_tail(tail);
    } catch (const std::exception& e) {
      throw std::runtime_error("build_meta_model: class " + std::to_string(cls) +
                               ": " + e.what());
    }
    model.class_ids.push_back(cls);
    model.class_means.push_back(std::move(mean));
    model.weibulls.push_back(wb);
  }
  return model;
}

double outlier_probability(const MetaRecognitionModel& model, const double* z,
                           std::size_t n) {
  if (model.empty())
    throw std::logic_error("outlier_probability: empty meta model");
  if (n != model.latent_dim)
    throw std::invalid_argument("outlier_probability: z has length " +
                                std::to_string(n) + ", expected " +
                                std::to_string(model.latent_dim));
  double best = 1.0;
  for (std::size_t c = 0; c < model.class_ids.size(); ++c) {
    const double d = cosine_distance(model.class_means[c].data(), z, n);
    best = std::min(best, weibull_cdf(model.weibulls[c], d));
  }
  return best;
}

double outlier_probability(const MetaRecognitionModel& model,
                           const std::vector<double>& z) {
  return outlier_probability(model, z.data(), z.size());
}

bool is_outlier(const MetaRecognitionModel& model, const double* z,
                std::size_t n, double omega) {
  if (omega < 0.0 || omega > 1.0)
    throw std::invalid_argument("is_outlier: omega must be in [0, 1]");
  return outlier_probability(model, z, n) > omega;
}

double empirical_quantile(std::vector<double> values, double fraction) {
  if (values.empty())
    throw std::invalid_argument("empirical_quantile: empty set");
  if (fraction <= 0.0 || fraction >= 1.0)
    throw std::invalid_argument("empirical_quantile: fraction must be in (0, 1)");
  std::sort(values.begin(), values.end());
  const std::size_t k = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(k, 1) - 1];
}

double calibrate_omega(const MetaRecognitionModel& model,
                       const Matrix& validation_mu,
                       double target_inlier_fraction) {
  if (validation_mu.rows == 0)
    throw std::invalid_argument("calibrate_omega: empty validation set");
  std::vector<double> probs;
  probs.reserve(validation_mu.rows);
  for (std::size_t i = 0; i < validation_mu.rows; ++i)
    probs.push_back(
        outlier_probability(model, validation_mu.row(i), validation_mu.cols));
  return empirical_quantile(std::move(probs), target_inlier_fraction);
}

OpensetScores openset_criteria(const JointModel& model,
                               const MetaRecognitionModel* meta,
                               const Matrix& x, std::size_t samples, Rng& rng) {
  if (samples < 1)
    throw std::invalid_argument("openset_criteria: need at least one sample");
  const std::size_t n = x.rows;
  OpensetScores out;
  out.entropy.assign(n, 0.0);
  out.recon.assign(n, 0.0);
  out.evt_prob.assign(n, 0.0);

  Matrix mu, logvar;
  model.encode(x, mu, logvar);
  Matrix std_dev = logvar;
  for (double& v : std_dev.data) v = std::exp(0.5 * v);

  const double inv_s = 1.0 / static_cast<double>(samples);
  const double inv_d = 1.0 / static_cast<double>(model.input_dim);
  for (std::size_t s = 0; s < samples; ++s) {
    Matrix z = mu;
    for (std::size_t i = 0; i < z.size(); ++i)
      z.data[i] += std_dev.data[i] * rng.normal();

    const Matrix probs = softmax_rows(model.classify(z));
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = probs.row(i);
      double h = 0.0;
      for (std::size_t j = 0; j < probs.cols; ++j)
        if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
      out.entropy[i] += h * inv_s;
    }

    const Matrix logits = model.decode_logits(z);
    for (std::size_t i = 0; i < n; ++i) {
      const double* l = logits.row(i);
      const double* t = x.row(i);
      double bce = 0.0;
      for (std::size_t j = 0; j < model.input_dim; ++j)
        bce += std::max(l[j], 0.0) - l[j] * t[j] +
               std::log1p(std::exp(-std::fabs(l[j])));
      out.recon[i] += bce * inv_d * inv_s;
    }

    if (meta) {
      for (std::size_t i = 0; i < n; ++i)
        out.evt_prob[i] +=
            outlier_probability(*meta, z.row(i), model.latent_dim) * inv_s;
    }
  }
  return out;
}

void save_meta_model(const MetaRecognitionModel& model,
                     const std::string& path) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["latent_dim"] = model.latent_dim;
  j["tail_fraction"] = model.tail_fraction;
  j["built_at_task"] = model.built_at_task;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < model.class_ids.size(); ++c) {
    nlohmann::ordered_json e;
    e["id"] = model.class_ids[c];
    e["mean"] = model.class_means[c];
    e["tau"] = model.weibulls[c].tau;
    e["kappa"] = model.weibulls[c].kappa;
    e["lambda"] = model.weibulls[c].lambda;
    classes.push_back(std::move(e));
  }
  j["classes"] = std::move(classes);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_meta_model: cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_meta_model: write failed");
}

MetaRecognitionModel load_meta_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_meta_model: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("schema", 0) != 1)
    throw std::runtime_error("load_meta_model: unsupported schema");
  MetaRecognitionModel model;
  model.latent_dim = j.at("latent_dim").get<std::size_t>();
  model.tail_fraction = j.at("tail_fraction").get<double>();
  model.built_at_task = j.at("built_at_task").get<std::size_t>();
  for (const auto& e : j.at("classes")) {
    model.class_ids.push_back(e.at("id").get<int>());
    model.class_means.push_back(e.at("mean").get<std::vector<double>>());
    WeibullParams p;
    p.tau = e.at("tau").get<double>();
    p.kappa = e.at("kappa").get<double>();
    p.lambda = e.at("lambda").get<double>();
    model.weibulls.push_back(p);
    if (model.class_means.back().size() != model.latent_dim)
      throw std::runtime_error("load_meta_model: mean length mismatch");
  }
  return model;
}

}  // namespace ocreplay::evt
