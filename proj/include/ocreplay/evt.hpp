#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ocreplay/joint_model.hpp"
#include "ocreplay/matrix.hpp"
#include "ocreplay/rng.hpp"

namespace ocreplay::evt {

struct WeibullParams {
  double tau = 0.0;     // location shift, cosine-distance units
  double kappa = 1.0;   // shape, > 0
  double lambda = 1.0;  // scale, > 0
};

// 1 - a.b / max(|a||b|, 1e-12), clamped into [0, 2].
double cosine_distance(const double* a, const double* b, std::size_t n);
double cosine_distance(const std::vector<double>& a,
                       const std::vector<double>& b);

// Maximum-likelihood Weibull fit on a sorted ascending tail of distances.
// tau sits just below the smallest tail value; kappa is solved by Newton
// iteration from kappa = 1 with a bisection fallback on [1e-3, 1e3];
// lambda follows in closed form. Throws on a degenerate (all-equal) tail
// or non-convergence.
WeibullParams fit_weibull_tail(const std::vector<double>& tail);

// 0 for d <= tau, otherwise 1 - exp(-((d - tau)/lambda)^kappa).
double weibull_cdf(const WeibullParams& p, double d);

// Per-class latent means and Weibull bounds on the distance tails of
// correctly classified data.
struct MetaRecognitionModel {
  std::size_t latent_dim = 0;
  double tail_fraction = 0.05;
  std::size_t built_at_task = 0;
  std::vector<int> class_ids;                     // ascending
  std::vector<std::vector<double>> class_means;   // aligned with class_ids
  std::vector<WeibullParams> weibulls;            // aligned with class_ids

  bool empty() const { return class_ids.empty(); }
};

// mu_latents must be encoder means. Only rows with prediction == label
// enter; a class with fewer than min_tail_count correct instances is a hard
// error naming the class. The tail per class is the largest
// max(2, ceil(tail_fraction * n_correct)) distances.
MetaRecognitionModel build_meta_model(const Matrix& mu_latents,
                                      const std::vector<int>& labels,
                                      const std::vector<int>& predictions,
                                      double tail_fraction,
                                      std::size_t built_at_task = 0,
                                      std::size_t min_tail_count = 10);

// Smallest outlier probability across all classes.
double outlier_probability(const MetaRecognitionModel& model, const double* z,
                           std::size_t n);
double outlier_probability(const MetaRecognitionModel& model,
                           const std::vector<double>& z);

// true iff outlier_probability > omega (strictly).
bool is_outlier(const MetaRecognitionModel& model, const double* z,
                std::size_t n, double omega);

// Empirical quantile of validation outlier probabilities such that exactly
// ceil(fraction * n) points satisfy omega <= omega_star.
double calibrate_omega(const MetaRecognitionModel& model,
                       const Matrix& validation_mu,
                       double target_inlier_fraction);

// ceil(fraction * n)-th smallest element of values.
double empirical_quantile(std::vector<double> values, double fraction);

// Open-set criteria for a batch of inputs: classifier predictive entropy
// (nats), reconstruction loss (nats per pixel) and EVT outlier probability,
// each averaged over `samples` posterior draws per data point.
struct OpensetScores {
  std::vector<double> entropy;
  std::vector<double> recon;
  std::vector<double> evt_prob;
};
OpensetScores openset_criteria(const JointModel& model,
                               const MetaRecognitionModel* meta,
                               const Matrix& x, std::size_t samples, Rng& rng);

// JSON export; load reproduces outlier probabilities exactly.
void save_meta_model(const MetaRecognitionModel& model,
                     const std::string& path);
MetaRecognitionModel load_meta_model(const std::string& path);

}  // namespace ocreplay::evt
