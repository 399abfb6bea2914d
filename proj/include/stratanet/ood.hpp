#pragma once

// Teacher-specific confidence estimation: class-conditional Gaussians with a
// shared pooled covariance, a background Gaussian over all fitting samples,
// Mahalanobis (MD) and Relative Mahalanobis (RMD) distances, and the derived
// in-domain confidence score with z-score standardization against the
// fitting data. MSP is the final-layer ablation alternative.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stratanet/linalg.hpp"

namespace stratanet {

struct ConfidenceScore {
  double raw = 0.0;           // -min_y RMD_y
  double standardized = 0.0;  // (raw - fit_mean) / fit_std
};

class GaussianStats {
 public:
  // reps: (representation, local class label) pairs from the held-out
  // pseudo-data of one teacher at one block. Every class in 0..n_classes-1
  // must appear; a single-sample class contributes its sample as the mean but
  // nothing to the pooled covariance. When `background` is non-empty it is
  // used to fit the background Gaussian instead of the class samples,
  // letting the background model cover the whole data distribution rather
  // than only this model's classes.
  static GaussianStats fit(const std::vector<std::pair<std::vector<double>, int>>& reps,
                           int n_classes,
                           const std::vector<std::vector<double>>& background = {});

  double md(const std::vector<double>& h, int y) const;
  double md_background(const std::vector<double>& h) const;
  double rmd(const std::vector<double>& h, int y) const;
  ConfidenceScore confidence(const std::vector<double>& h) const;

  int dim() const { return dim_; }
  int n_classes() const { return static_cast<int>(class_means_.size()); }
  const std::vector<double>& class_mean(int y) const { return class_means_[static_cast<std::size_t>(y)]; }

  nlohmann::json to_json() const;
  static GaussianStats from_json(const nlohmann::json& j);

 private:
  double raw_confidence(const std::vector<double>& h) const;

  int dim_ = 0;
  std::vector<std::vector<double>> class_means_;
  std::vector<double> cov_;  // regularized pooled covariance, row-major
  std::vector<double> bg_mean_;
  std::vector<double> bg_cov_;
  Cholesky cov_chol_, bg_chol_;
  double conf_mean_ = 0.0;
  double conf_std_ = 1.0;
};

// max softmax probability at temperature 1 over a teacher's own classes
double msp(const std::vector<double>& logits);

void save_stats(const std::vector<GaussianStats>& per_block, const std::string& path);
std::vector<GaussianStats> load_stats(const std::string& path);

}  // namespace stratanet
