#pragma once

// Class-conditional pseudo-text generation: the base LM proposes its top-m
// next tokens, a frozen teacher classifier rescores the extended prefixes, and
// the two are combined as P_lm(x) * P_teacher(c|...,x)^gamma, renormalized
// over the m candidates. Sampling then restricts to top-k (or nucleus-p) mass.
// Sequences are decoded from a BOS prefix (token 0); stored samples exclude it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "stratanet/data.hpp"
#include "stratanet/model.hpp"
#include "stratanet/rng.hpp"

namespace stratanet {

struct SteerConfig {
  double gamma = 2.0;
  int m = 20;             // candidates kept from the LM
  int k = 5;              // top-k final sampling; ignored when nucleus_p > 0
  double nucleus_p = 0.0; // 0 disables nucleus sampling
  int min_len = 0;        // 0: decode exactly max_len tokens; else sample a
                          // per-sequence length uniformly from [min_len, max_len]
  int max_len = 32;       // decoded tokens per sample (BOS excluded)
  int n_samples = 50;     // per (teacher, class)
  double heldout_fraction = 0.25;

  void validate(int vocab_size) const {
    if (gamma < 0.0) throw std::invalid_argument("SteerConfig: gamma must be nonnegative");
    if (m < 1 || m > vocab_size) throw std::invalid_argument("SteerConfig: need 1 <= m <= vocab");
    if (nucleus_p == 0.0) {
      if (k < 1 || k > m) throw std::invalid_argument("SteerConfig: need 1 <= k <= m");
    } else if (nucleus_p <= 0.0 || nucleus_p > 1.0) {
      throw std::invalid_argument("SteerConfig: nucleus_p must lie in (0,1]");
    }
    if (max_len < 1) throw std::invalid_argument("SteerConfig: max_len must be positive");
    if (min_len < 0 || min_len > max_len)
      throw std::invalid_argument("SteerConfig: need 0 <= min_len <= max_len");
    if (n_samples < 1) throw std::invalid_argument("SteerConfig: n_samples must be positive");
    if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0)
      throw std::invalid_argument("SteerConfig: heldout_fraction must lie in (0,1)");
  }
};

struct PseudoSample {
  std::vector<int> tokens;
  int local_class = 0;  // index within the guiding teacher's label set
  int union_class = 0;
  int teacher_id = 0;
};

namespace detail {

// indices of the m largest entries, ties broken toward the lower index
inline std::vector<int> top_m_indices(const std::vector<double>& probs, int m) {
  std::vector<int> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(m));
  return idx;
}

}  // namespace detail

// Combine an LM next-token distribution with a per-candidate class probability.
// Only the top-m LM tokens can receive mass; if every reweighted score
// underflows (< 1e-30) the LM-only distribution over those m candidates is
// used instead.
inline std::vector<double> steered_distribution(const std::vector<double>& lm_probs,
                                                const std::function<double(int)>& class_prob,
                                                double gamma, int m) {
  if (m < 1 || m > static_cast<int>(lm_probs.size()))
    throw std::invalid_argument("steered_distribution: need 1 <= m <= vocab");
  const auto cand = detail::top_m_indices(lm_probs, m);
  std::vector<double> w(cand.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const double p_lm = lm_probs[static_cast<std::size_t>(cand[i])];
    const double p_cls = gamma == 0.0 ? 1.0 : std::pow(class_prob(cand[i]), gamma);
    w[i] = p_lm * p_cls;
    total += w[i];
  }
  if (total < 1e-30) {
    total = 0.0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      w[i] = lm_probs[static_cast<std::size_t>(cand[i])];
      total += w[i];
    }
  }
  if (!(total > 0.0)) throw std::runtime_error("steered_distribution: zero total mass");
  std::vector<double> out(lm_probs.size(), 0.0);
  for (std::size_t i = 0; i < cand.size(); ++i) out[static_cast<std::size_t>(cand[i])] = w[i] / total;
  return out;
}

// Zero out everything but the k most probable tokens and renormalize. k=1 is
// greedy decoding (deterministic one-hot).
inline std::vector<double> restrict_top_k(const std::vector<double>& dist, int k) {
  if (k < 1) throw std::invalid_argument("restrict_top_k: k must be positive");
  if (k >= static_cast<int>(dist.size())) return dist;
  const auto keep = detail::top_m_indices(dist, k);
  std::vector<double> out(dist.size(), 0.0);
  double total = 0.0;
  for (int i : keep) total += dist[static_cast<std::size_t>(i)];
  if (!(total > 0.0)) throw std::runtime_error("restrict_top_k: zero mass among kept tokens");
  for (int i : keep) out[static_cast<std::size_t>(i)] = dist[static_cast<std::size_t>(i)] / total;
  return out;
}

// Keep the smallest high-probability prefix whose cumulative mass reaches p.
inline std::vector<double> restrict_nucleus(const std::vector<double>& dist, double p) {
  if (p <= 0.0 || p > 1.0) throw std::invalid_argument("restrict_nucleus: p must lie in (0,1]");
  const auto order = detail::top_m_indices(dist, static_cast<int>(dist.size()));
  std::vector<double> out(dist.size(), 0.0);
  double total = 0.0;
  for (int i : order) {
    out[static_cast<std::size_t>(i)] = dist[static_cast<std::size_t>(i)];
    total += dist[static_cast<std::size_t>(i)];
    if (total >= p) break;
  }
  if (!(total > 0.0)) throw std::runtime_error("restrict_nucleus: zero mass");
  for (auto& v : out) v /= total;
  return out;
}

namespace detail {

template <typename T>
std::vector<double> softmax_values(const Tensor<T>& logits) {
  const auto& v = logits.data();
  double mx = -1e300;
  for (T x : v) mx = std::max(mx, static_cast<double>(x));
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(static_cast<double>(v[i]) - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  return out;
}

}  // namespace detail

// prefix includes the leading BOS token; the teacher scores the extension with
// BOS stripped (classifiers are trained on raw sequences).
template <typename T>
std::vector<double> steered_next_distribution(const Transformer<T>& lm,
                                              const Transformer<T>& teacher, int c_local,
                                              const std::vector<int>& prefix,
                                              const SteerConfig& cfg) {
  if (prefix.empty() || prefix.front() != 0)
    throw std::invalid_argument("steered_next_distribution: prefix must start with BOS (0)");
  if (c_local < 0 || c_local >= teacher.spec.n_classes)
    throw std::invalid_argument("steered_next_distribution: class outside teacher label set");
  NoGradGuard ng;
  const auto lm_probs = detail::softmax_values(lm.lm_next_logits(prefix));
  auto class_prob = [&](int tok) {
    std::vector<int> ext(prefix.begin() + 1, prefix.end());
    ext.push_back(tok);
    return detail::softmax_values(teacher.forward(ext).logits)[static_cast<std::size_t>(c_local)];
  };
  return steered_distribution(lm_probs, class_prob, cfg.gamma, cfg.m);
}

template <typename T>
PseudoSample sample_sequence(const Transformer<T>& lm, const Transformer<T>& teacher,
                             int c_local, const SteerConfig& cfg, Rng& rng) {
  cfg.validate(lm.spec.vocab_size);
  std::vector<int> prefix = {0};
  const int cap = std::min(cfg.max_len, std::min(lm.spec.max_len - 1, teacher.spec.max_len));
  const int len = cfg.min_len > 0 && cfg.min_len < cap
                      ? cfg.min_len + rng.uniform_int(cap - cfg.min_len + 1)
                      : cap;
  for (int t = 0; t < len; ++t) {
    auto dist = steered_next_distribution(lm, teacher, c_local, prefix, cfg);
    dist = cfg.nucleus_p > 0.0 ? restrict_nucleus(dist, cfg.nucleus_p)
                               : restrict_top_k(dist, cfg.k);
    prefix.push_back(rng.categorical(dist));
  }
  PseudoSample s;
  s.tokens.assign(prefix.begin() + 1, prefix.end());
  s.local_class = c_local;
  return s;
}

struct TransferSet {
  std::vector<PseudoSample> train;                 // pooled across teachers, union labels set
  std::vector<std::vector<PseudoSample>> heldout;  // per teacher, for confidence fitting
};

// local_to_union[i][y] maps teacher i's class y to the union label space.
// Per (teacher, class), n_samples sequences are decoded; the last
// round(n_samples * heldout_fraction) of each go to that teacher's held-out
// set, the rest into the pooled training set. Each sample owns an rng stream
// derived from (seed, teacher, class, index), so generation order is free.
template <typename T>
TransferSet build_transfer_set(const Transformer<T>& lm,
                               const std::vector<const Transformer<T>*>& teachers,
                               const std::vector<std::vector<int>>& local_to_union,
                               const SteerConfig& cfg, std::uint64_t seed) {
  if (teachers.empty()) throw std::invalid_argument("build_transfer_set: no teachers");
  if (teachers.size() != local_to_union.size())
    throw std::invalid_argument("build_transfer_set: teacher/label-map count mismatch");
  cfg.validate(lm.spec.vocab_size);
  const int n_held = std::max(1, static_cast<int>(std::llround(cfg.n_samples * cfg.heldout_fraction)));
  if (n_held >= cfg.n_samples)
    throw std::invalid_argument("build_transfer_set: heldout_fraction leaves no training samples");

  TransferSet out;
  out.heldout.resize(teachers.size());
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    const auto& tm = *teachers[i];
    if (static_cast<int>(local_to_union[i].size()) != tm.spec.n_classes)
      throw std::invalid_argument("build_transfer_set: label map size mismatch for teacher " +
                                  std::to_string(i));
    for (int c = 0; c < tm.spec.n_classes; ++c) {
      for (int idx = 0; idx < cfg.n_samples; ++idx) {
        Rng rng = Rng::fork(seed ^ 0x70736575646fULL, i, static_cast<std::uint64_t>(c),
                            static_cast<std::uint64_t>(idx));
        PseudoSample s = sample_sequence(lm, tm, c, cfg, rng);
        s.teacher_id = static_cast<int>(i);
        s.union_class = local_to_union[i][static_cast<std::size_t>(c)];
        if (idx >= cfg.n_samples - n_held)
          out.heldout[i].push_back(std::move(s));
        else
          out.train.push_back(std::move(s));
      }
    }
  }
  return out;
}

}  // namespace stratanet
