#pragma once

// Training loops for the toy transformers: AdamW with linear warmup/decay and
// global-norm gradient clipping. Single-threaded; bitwise deterministic for a
// fixed seed and config.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "stratanet/data.hpp"
#include "stratanet/model.hpp"
#include "stratanet/rng.hpp"
#include "stratanet/tensor.hpp"

namespace stratanet {

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double warmup_epochs = 2.0;
  double grad_clip = 1.0;
  double early_stop_acc = 0.0;  // stop once validation accuracy reaches this (0 = off)
};

inline double lr_factor(long step, long warmup_steps, long total_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return 1.0;
  const double frac = static_cast<double>(step - warmup_steps) /
                      static_cast<double>(total_steps - warmup_steps);
  return std::max(0.1, 1.0 - 0.9 * frac);  // linear decay to 10%
}

template <typename T>
double classifier_accuracy(const Transformer<T>& model, const std::vector<LabeledSeq>& data) {
  if (data.empty()) return 0.0;
  NoGradGuard ng;
  int correct = 0;
  for (const auto& ex : data) {
    auto f = model.forward(ex.tokens);
    const auto& lg = f.logits.data();
    int amax = 0;
    for (std::size_t j = 1; j < lg.size(); ++j)
      if (lg[j] > lg[static_cast<std::size_t>(amax)]) amax = static_cast<int>(j);
    if (amax == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Cross-entropy training of an encoder classifier. Returns final validation
// accuracy (training accuracy when valid is empty).
template <typename T>
double train_classifier(Transformer<T>& model, const std::vector<LabeledSeq>& train,
                        const std::vector<LabeledSeq>& valid, const TrainConfig& cfg, Rng& rng) {
  if (train.empty()) throw std::invalid_argument("train_classifier: empty training set");
  model.set_trainable(true);
  AdamW<T> opt(model.params(), cfg.lr, cfg.weight_decay);
  const long steps_per_epoch =
      (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = static_cast<long>(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      opt.zero_grad();
      Tensor<T> loss;
      std::vector<Tensor<T>> logit_rows;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        logit_rows.push_back(model.forward(ex.tokens).logits);
        targets.push_back(ex.label);
      }
      loss = cross_entropy_logits(stack_rows(logit_rows), targets);
      loss.backward();
      opt.clip_grad_norm(cfg.grad_clip);
      opt.set_lr(cfg.lr * lr_factor(step, warmup_steps, total_steps));
      opt.step();
      ++step;
    }
    if (cfg.early_stop_acc > 0.0 && !valid.empty()) {
      if (classifier_accuracy(model, valid) >= cfg.early_stop_acc) break;
    }
  }
  return classifier_accuracy(model, valid.empty() ? train : valid);
}

// Next-token cross-entropy over every position (inputs tokens[0..n-2],
// targets tokens[1..n-1]). Returns mean loss of the last epoch.
template <typename T>
double train_lm(Transformer<T>& model, const std::vector<std::vector<int>>& corpus,
                const TrainConfig& cfg, Rng& rng) {
  if (model.spec.kind != ModelKind::causal_lm)
    throw std::invalid_argument("train_lm: model is not a causal LM");
  if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
  model.set_trainable(true);
  AdamW<T> opt(model.params(), cfg.lr, cfg.weight_decay);
  const long steps_per_epoch =
      (static_cast<long>(corpus.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = static_cast<long>(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  double last_epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      opt.zero_grad();
      Tensor<T> batch_loss = Tensor<T>::scalar(T(0));
      int n_in_batch = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& seq = corpus[order[i]];
        if (seq.size() < 2) continue;
        std::vector<int> inputs(seq.begin(), seq.end() - 1);
        std::vector<int> targets(seq.begin() + 1, seq.end());
        auto f = model.forward(inputs);
        batch_loss = add(batch_loss, cross_entropy_logits(f.logits, targets));
        ++n_in_batch;
      }
      if (n_in_batch == 0) continue;
      auto loss = scale(batch_loss, 1.0 / n_in_batch);
      loss.backward();
      opt.clip_grad_norm(cfg.grad_clip);
      opt.set_lr(cfg.lr * lr_factor(step, warmup_steps, total_steps));
      opt.step();
      epoch_loss += loss.item();
      ++epoch_batches;
      ++step;
    }
    last_epoch_loss = epoch_batches > 0 ? epoch_loss / static_cast<double>(epoch_batches) : 0.0;
  }
  return last_epoch_loss;
}

}  // namespace stratanet
