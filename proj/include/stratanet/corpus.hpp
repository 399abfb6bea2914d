#pragma once

// Synthetic text-classification tasks at desk scale. Each class mixes a
// Dirichlet-perturbed unigram topic (disjoint dominant-token sets across
// classes) with a bigram successor grammar shared by all classes, so class
// evidence accumulates along a prefix while the sequence structure stays
// learnable by an unconditional LM.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stratanet/data.hpp"
#include "stratanet/rng.hpp"

namespace stratanet {

struct TaskSpec {
  int n_classes = 4;
  int vocab_size = 64;  // token 0 is reserved as BOS
  int min_len = 12;
  int max_len = 24;
  int dominant_tokens_per_class = 8;
  double dominant_mass = 0.75;     // topic probability mass on the dominant set
  double dirichlet_alpha = 2.0;    // perturbation of within-set topic weights
  double bigram_weight = 0.35;     // mix of shared bigram grammar vs class topic
  int n_train_per_class = 300;
  int n_valid_per_class = 60;
  int n_test_per_class = 100;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json& j);
};

// Per-class next-token distributions, derivable from (spec) alone.
struct TaskModel {
  TaskSpec spec;
  std::vector<std::vector<double>> topics;  // n_classes x vocab (index 0 unused)
  std::vector<int> successor;               // shared grammar: preferred next token

  // P(next | prev, class); prev == 0 means sequence start
  std::vector<double> next_distribution(int prev, int cls) const;
  std::vector<int> sample_sequence(int cls, Rng& rng) const;
};

struct Task {
  TaskSpec spec;
  LoggedSplit train;
  std::vector<LabeledSeq> valid;
  std::vector<LabeledSeq> test;
};

TaskModel build_task_model(const TaskSpec& spec);
Task make_task(const TaskSpec& spec);

// ---- teacher label subsets over the union label set ----

enum class OverlapMode { disjoint, partial };

struct LabelAssignment {
  // union_classes[i] lists teacher i's labels as union indices, ascending;
  // a teacher's local label j corresponds to union_classes[i][j]
  std::vector<std::vector<int>> union_classes;
  int n_union = 0;

  int n_teachers() const { return static_cast<int>(union_classes.size()); }
  int local_index(int teacher, int union_label) const;  // -1 when not covered
};

LabelAssignment assign_labels(int n_union, int k_teachers, OverlapMode mode);

// Filter to one teacher's subset with labels re-indexed into 0..c_i-1.
std::vector<LabeledSeq> teacher_view(const std::vector<LabeledSeq>& data,
                                     const LabelAssignment& assign, int teacher);

// ---- transfer-text baselines ----

// Uniformly random token sequences over 1..vocab_size-1 (the R baseline).
std::vector<std::vector<int>> random_text(int vocab_size, int min_len, int max_len, int n,
                                          std::uint64_t seed);

// Unlabeled sequences drawn from another task's generative process (the CD
// baseline).
std::vector<std::vector<int>> cross_domain_text(const TaskSpec& other, int n, std::uint64_t seed);

// A cross-domain variant of a task: same shape, different topic assignment.
TaskSpec make_cross_domain_spec(const TaskSpec& base);

void save_task_manifest(const TaskSpec& spec, const LabelAssignment& assign,
                        const std::string& path);

}  // namespace stratanet
