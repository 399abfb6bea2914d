#pragma once

// End-to-end orchestration: train the specialist teachers and the base LM,
// generate the steered pseudo-data transfer set, fit per-block confidence
// models, train the student under the selected method, and evaluate on the
// union label space. Baselines and ablations share cached artifacts.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stratanet/amalgam.hpp"
#include "stratanet/corpus.hpp"
#include "stratanet/generator.hpp"
#include "stratanet/model.hpp"
#include "stratanet/ood.hpp"
#include "stratanet/training.hpp"

namespace stratanet {

inline constexpr int kConfigVersion = 1;

// method ids, in reporting order
extern const std::vector<std::string> kMethods;
bool method_valid(const std::string& method);

struct ExperimentConfig {
  TaskSpec task;
  std::string overlap = "disjoint";  // or "partial"
  int k_teachers = 2;
  std::vector<int> teacher_layers = {2, 2};
  std::vector<int> teacher_d_model = {32, 32};
  int n_heads = 2;
  int student_layers = 2;
  int student_d_model = 32;
  int lm_layers = 2;
  int lm_d_model = 32;
  int lm_corpus_size = 320;
  SteerConfig steer;
  double lambda = 0.65;
  double tau = 0.75;
  double teacher_acc_threshold = 0.9;
  int baseline_text_n = 0;  // 0: match the pseudo-data training-set size
  TrainConfig teacher_train;
  TrainConfig lm_train;
  TrainConfig student_train;
  std::string method = "stratanet";
  std::uint64_t seed = 1;

  OverlapMode overlap_mode() const;
  void validate() const;
  nlohmann::json to_json() const;
  // strict: unknown keys and version mismatches are rejected
  static ExperimentConfig from_json(const nlohmann::json& j);
};

enum class ConfidenceSource { rmd, md, msp };
ConfidenceSource confidence_source_for(const std::string& method);

// Per-teacher confidence models fitted on held-out pseudo-data: one Gaussian
// model per block plus standardization stats for the alternative scores.
struct TeacherConf {
  std::vector<GaussianStats> blocks;
  std::vector<std::pair<double, double>> md_norm;  // per block: mean/std of -min_y MD_y
  std::pair<double, double> msp_norm{0.0, 1.0};    // final-logit max softmax prob

  nlohmann::json to_json() const;
  static TeacherConf from_json(const nlohmann::json& j);
};

void save_confidence(const std::vector<TeacherConf>& conf, const std::string& path);
std::vector<TeacherConf> load_confidence(const std::string& path);

struct Artifacts {
  Task task;
  LabelAssignment assign;
  std::vector<Transformerf> teachers;
  std::vector<double> teacher_valid_acc;
  Transformerf lm;
  TransferSet transfer;
  std::vector<TeacherConf> conf;
  std::vector<std::vector<std::pair<int, int>>> teacher_parts;  // per teacher block ranges
  int n_blocks = 0;
};

struct MethodResult {
  std::string method;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
  nlohmann::json extras;
};

// ---- stages ----

// Teachers trained on their label-filtered splits; aborts with a diagnostic if
// any misses cfg.teacher_acc_threshold on its validation view.
std::vector<Transformerf> train_teachers(const ExperimentConfig& cfg, const Task& task,
                                         const LabelAssignment& assign,
                                         std::vector<double>* valid_acc = nullptr);

// Unconditional base LM trained on fresh unlabeled sequences from the task's
// generative process (BOS-prefixed); never touches the labeled splits.
Transformerf train_base_lm(const ExperimentConfig& cfg);

TransferSet generate_transfer(const ExperimentConfig& cfg, const Transformerf& lm,
                              const std::vector<Transformerf>& teachers,
                              const LabelAssignment& assign);

std::vector<TeacherConf> fit_confidence(const ExperimentConfig& cfg,
                                        const std::vector<Transformerf>& teachers,
                                        const std::vector<std::vector<std::pair<int, int>>>& parts,
                                        const TransferSet& transfer);

// All of the above in dependency order.
Artifacts prepare_artifacts(const ExperimentConfig& cfg);

// Standardized block confidence of one forwarded sample under the chosen score.
double block_confidence(const TeacherConf& tc, ConfidenceSource source, int block,
                        const std::vector<double>& rep, const std::vector<double>& final_logits);

// The trained artifacts of one student run (fusion head is untouched for
// methods that never use it).
struct TrainedStudent {
  Transformerf model;
  AmalgamNet<float> net;
};

// Trains (where the method requires it) and evaluates on the union test split.
// Never reads the task's train split. When `out` is given, the trained student
// and fusion head are stored there for checkpointing.
MethodResult run_method(const ExperimentConfig& cfg, Artifacts& art, TrainedStudent* out = nullptr);

// Final-block OOD separability per teacher on the real test split: AUROC of
// each score with in-domain = the teacher's own classes.
nlohmann::json ood_report(const ExperimentConfig& cfg, const Artifacts& art);

// Inference-only baselines.
double ensemble_accuracy(const std::vector<Transformerf>& teachers, const LabelAssignment& assign,
                         const std::vector<LabeledSeq>& test);
double best_teacher_accuracy(const std::vector<Transformerf>& teachers,
                             const LabelAssignment& assign, const std::vector<LabeledSeq>& test);

// Runs the listed methods over the listed seeds, reusing per-seed artifacts.
// Returns {"records": [per run], "summary": {method: {mean, std, n}}}.
nlohmann::json run_benchmark(const ExperimentConfig& base, const std::vector<std::string>& methods,
                             const std::vector<std::uint64_t>& seeds);

}  // namespace stratanet
