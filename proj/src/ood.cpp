#include "stratanet/ood.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

namespace stratanet {

namespace {

constexpr double kStdFloor = 1e-9;  // keeps standardization defined for degenerate fits

std::vector<double> regularized(std::vector<double> cov, int d) {
  double trace = 0.0;
  for (int i = 0; i < d; ++i) trace += cov[static_cast<std::size_t>(i) * d + i];
  const double eps = 1e-3 * std::max(trace / d, 1e-12);
  for (int i = 0; i < d; ++i) cov[static_cast<std::size_t>(i) * d + i] += eps;
  return cov;
}

}  // namespace

GaussianStats GaussianStats::fit(const std::vector<std::pair<std::vector<double>, int>>& reps,
                                 int n_classes,
                                 const std::vector<std::vector<double>>& background) {
  if (reps.empty()) throw std::invalid_argument("GaussianStats::fit: no samples");
  GaussianStats s;
  s.dim_ = static_cast<int>(reps.front().first.size());
  const int d = s.dim_;
  if (d < 1) throw std::invalid_argument("GaussianStats::fit: zero-dimensional representations");

  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  s.class_means_.assign(static_cast<std::size_t>(n_classes), std::vector<double>(static_cast<std::size_t>(d), 0.0));
  for (const auto& [h, y] : reps) {
    if (static_cast<int>(h.size()) != d) throw std::invalid_argument("GaussianStats::fit: dim mismatch");
    if (y < 0 || y >= n_classes) throw std::invalid_argument("GaussianStats::fit: label out of range");
    counts[static_cast<std::size_t>(y)]++;
    for (int j = 0; j < d; ++j) s.class_means_[static_cast<std::size_t>(y)][static_cast<std::size_t>(j)] += h[static_cast<std::size_t>(j)];
  }
  for (int y = 0; y < n_classes; ++y) {
    if (counts[static_cast<std::size_t>(y)] == 0)
      throw std::runtime_error("GaussianStats::fit: class " + std::to_string(y) +
                               " absent from fitting data");
    if (counts[static_cast<std::size_t>(y)] == 1)
      std::cerr << "GaussianStats::fit: warning: class " << y
                << " has a single sample; it contributes no covariance\n";
    for (int j = 0; j < d; ++j) s.class_means_[static_cast<std::size_t>(y)][static_cast<std::size_t>(j)] /= counts[static_cast<std::size_t>(y)];
  }

  // pooled within-class covariance, shared across classes
  std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
  long denom = 0;
  for (const auto& [h, y] : reps) {
    if (counts[static_cast<std::size_t>(y)] < 2) continue;
    const auto& mu = s.class_means_[static_cast<std::size_t>(y)];
    for (int i = 0; i < d; ++i) {
      const double di = h[static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j)
        cov[static_cast<std::size_t>(i) * d + j] += di * (h[static_cast<std::size_t>(j)] - mu[static_cast<std::size_t>(j)]);
    }
  }
  for (int y = 0; y < n_classes; ++y)
    if (counts[static_cast<std::size_t>(y)] >= 2) denom += counts[static_cast<std::size_t>(y)] - 1;
  if (denom < 1) denom = 1;
  for (auto& v : cov) v /= static_cast<double>(denom);
  s.cov_ = regularized(std::move(cov), d);
  s.cov_chol_ = Cholesky::factor(s.cov_, d);

  // Background Gaussian, labels ignored. By default it covers the class
  // fitting set; an explicit background pool (e.g. samples from the whole
  // data distribution, not just this model's classes) overrides it.
  std::vector<std::vector<double>> bg_pool;
  if (background.empty()) {
    bg_pool.reserve(reps.size());
    for (const auto& [h, y] : reps) bg_pool.push_back(h);
  } else {
    for (const auto& h : background) {
      if (static_cast<int>(h.size()) != d)
        throw std::invalid_argument("GaussianStats::fit: background dim mismatch");
      bg_pool.push_back(h);
    }
  }
  s.bg_mean_.assign(static_cast<std::size_t>(d), 0.0);
  for (const auto& h : bg_pool)
    for (int j = 0; j < d; ++j) s.bg_mean_[static_cast<std::size_t>(j)] += h[static_cast<std::size_t>(j)];
  for (auto& v : s.bg_mean_) v /= static_cast<double>(bg_pool.size());
  std::vector<double> bg(static_cast<std::size_t>(d) * d, 0.0);
  for (const auto& h : bg_pool)
    for (int i = 0; i < d; ++i) {
      const double di = h[static_cast<std::size_t>(i)] - s.bg_mean_[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j)
        bg[static_cast<std::size_t>(i) * d + j] += di * (h[static_cast<std::size_t>(j)] - s.bg_mean_[static_cast<std::size_t>(j)]);
    }
  const double bg_denom = std::max<std::size_t>(bg_pool.size() - 1, 1);
  for (auto& v : bg) v /= bg_denom;
  s.bg_cov_ = regularized(std::move(bg), d);
  s.bg_chol_ = Cholesky::factor(s.bg_cov_, d);

  // z-score statistics of the raw confidence on the fitting data
  double m = 0.0, m2 = 0.0;
  for (const auto& [h, y] : reps) {
    const double c = s.raw_confidence(h);
    m += c;
    m2 += c * c;
  }
  m /= static_cast<double>(reps.size());
  m2 /= static_cast<double>(reps.size());
  s.conf_mean_ = m;
  s.conf_std_ = std::max(std::sqrt(std::max(m2 - m * m, 0.0)), kStdFloor);
  return s;
}

double GaussianStats::md(const std::vector<double>& h, int y) const {
  if (y < 0 || y >= n_classes()) throw std::invalid_argument("md: class out of range");
  if (static_cast<int>(h.size()) != dim_) throw std::invalid_argument("md: dim mismatch");
  std::vector<double> diff(h.size());
  const auto& mu = class_means_[static_cast<std::size_t>(y)];
  for (std::size_t i = 0; i < h.size(); ++i) diff[i] = h[i] - mu[i];
  return cov_chol_.quad_form(diff);
}

double GaussianStats::md_background(const std::vector<double>& h) const {
  if (static_cast<int>(h.size()) != dim_) throw std::invalid_argument("md_background: dim mismatch");
  std::vector<double> diff(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) diff[i] = h[i] - bg_mean_[i];
  return bg_chol_.quad_form(diff);
}

double GaussianStats::rmd(const std::vector<double>& h, int y) const {
  return md(h, y) - md_background(h);
}

double GaussianStats::raw_confidence(const std::vector<double>& h) const {
  double min_rmd = rmd(h, 0);
  for (int y = 1; y < n_classes(); ++y) min_rmd = std::min(min_rmd, rmd(h, y));
  return -min_rmd;
}

ConfidenceScore GaussianStats::confidence(const std::vector<double>& h) const {
  ConfidenceScore c;
  c.raw = raw_confidence(h);
  c.standardized = (c.raw - conf_mean_) / conf_std_;
  return c;
}

double msp(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("msp: empty logits");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0, top = 0.0;
  for (double v : logits) {
    const double e = std::exp(v - mx);
    z += e;
    top = std::max(top, e);
  }
  return top / z;
}

nlohmann::json GaussianStats::to_json() const {
  return {{"dim", dim_},
          {"class_means", class_means_},
          {"cov", cov_},
          {"bg_mean", bg_mean_},
          {"bg_cov", bg_cov_},
          {"conf_mean", conf_mean_},
          {"conf_std", conf_std_}};
}

GaussianStats GaussianStats::from_json(const nlohmann::json& j) {
  GaussianStats s;
  s.dim_ = j.at("dim");
  s.class_means_ = j.at("class_means").get<std::vector<std::vector<double>>>();
  s.cov_ = j.at("cov").get<std::vector<double>>();
  s.bg_mean_ = j.at("bg_mean").get<std::vector<double>>();
  s.bg_cov_ = j.at("bg_cov").get<std::vector<double>>();
  s.conf_mean_ = j.at("conf_mean");
  s.conf_std_ = j.at("conf_std");
  s.cov_chol_ = Cholesky::factor(s.cov_, s.dim_);
  s.bg_chol_ = Cholesky::factor(s.bg_cov_, s.dim_);
  return s;
}

void save_stats(const std::vector<GaussianStats>& per_block, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["blocks"] = nlohmann::json::array();
  for (const auto& s : per_block) j["blocks"].push_back(s.to_json());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_stats: cannot open " + path);
  f << j.dump() << "\n";
}

std::vector<GaussianStats> load_stats(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_stats: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_stats: unsupported format version");
  std::vector<GaussianStats> out;
  for (const auto& b : j.at("blocks")) out.push_back(GaussianStats::from_json(b));
  return out;
}

}  // namespace stratanet
