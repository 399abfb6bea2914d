#include "stratanet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>

#include "stratanet/metrics.hpp"

namespace stratanet {

const std::vector<std::string> kMethods = {
    "stratanet",    "stratanet_mul", "stratanet_noST", "md_conf",      "msp_conf",
    "vanilla_ka_R", "vanilla_ka_CD", "ensemble",       "teacher_only"};

bool method_valid(const std::string& method) {
  return std::find(kMethods.begin(), kMethods.end(), method) != kMethods.end();
}

ConfidenceSource confidence_source_for(const std::string& method) {
  if (method == "md_conf") return ConfidenceSource::md;
  if (method == "msp_conf") return ConfidenceSource::msp;
  return ConfidenceSource::rmd;
}

// ---- config ----

OverlapMode ExperimentConfig::overlap_mode() const {
  if (overlap == "disjoint") return OverlapMode::disjoint;
  if (overlap == "partial") return OverlapMode::partial;
  throw std::invalid_argument("ExperimentConfig: unknown overlap mode '" + overlap + "'");
}

void ExperimentConfig::validate() const {
  task.validate();
  overlap_mode();
  if (!method_valid(method)) throw std::invalid_argument("ExperimentConfig: unknown method '" + method + "'");
  if (k_teachers < 1) throw std::invalid_argument("ExperimentConfig: need at least one teacher");
  if (static_cast<int>(teacher_layers.size()) != k_teachers ||
      static_cast<int>(teacher_d_model.size()) != k_teachers)
    throw std::invalid_argument("ExperimentConfig: per-teacher lists must have k_teachers entries");
  if (student_layers < 1 || student_d_model < 1 || lm_layers < 1 || lm_d_model < 1 || n_heads < 1)
    throw std::invalid_argument("ExperimentConfig: bad model dimensions");
  for (int i = 0; i < k_teachers; ++i) {
    if (teacher_layers[static_cast<std::size_t>(i)] < student_layers)
      throw std::invalid_argument("ExperimentConfig: student must not be deeper than any teacher");
    if (teacher_d_model[static_cast<std::size_t>(i)] % n_heads != 0)
      throw std::invalid_argument("ExperimentConfig: teacher width not divisible by n_heads");
  }
  if (student_d_model % n_heads != 0 || lm_d_model % n_heads != 0)
    throw std::invalid_argument("ExperimentConfig: width not divisible by n_heads");
  if (lm_corpus_size < 1) throw std::invalid_argument("ExperimentConfig: lm_corpus_size must be positive");
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("ExperimentConfig: lambda outside [0,1]");
  if (!(tau > 0.0)) throw std::invalid_argument("ExperimentConfig: tau must be positive");
  if (teacher_acc_threshold < 0.0 || teacher_acc_threshold > 1.0)
    throw std::invalid_argument("ExperimentConfig: teacher_acc_threshold outside [0,1]");
  if (steer.max_len > task.max_len)
    throw std::invalid_argument("ExperimentConfig: steer.max_len exceeds task.max_len");
  steer.validate(task.vocab_size);
}

namespace {

nlohmann::json steer_to_json(const SteerConfig& s) {
  return {{"gamma", s.gamma},     {"m", s.m},
          {"k", s.k},             {"nucleus_p", s.nucleus_p},
          {"min_len", s.min_len}, {"max_len", s.max_len},
          {"n_samples", s.n_samples},
          {"heldout_fraction", s.heldout_fraction}};
}

nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"warmup_epochs", t.warmup_epochs},
          {"grad_clip", t.grad_clip},
          {"early_stop_acc", t.early_stop_acc}};
}

void check_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!reference.contains(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

template <typename V>
void maybe(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

SteerConfig steer_from_json(const nlohmann::json& j) {
  SteerConfig s;
  check_keys(j, steer_to_json(s), "steer");
  maybe(j, "gamma", s.gamma);
  maybe(j, "m", s.m);
  maybe(j, "k", s.k);
  maybe(j, "nucleus_p", s.nucleus_p);
  maybe(j, "min_len", s.min_len);
  maybe(j, "max_len", s.max_len);
  maybe(j, "n_samples", s.n_samples);
  maybe(j, "heldout_fraction", s.heldout_fraction);
  return s;
}

TrainConfig train_from_json(const nlohmann::json& j, const std::string& where) {
  TrainConfig t;
  check_keys(j, train_to_json(t), where);
  maybe(j, "epochs", t.epochs);
  maybe(j, "batch_size", t.batch_size);
  maybe(j, "lr", t.lr);
  maybe(j, "weight_decay", t.weight_decay);
  maybe(j, "warmup_epochs", t.warmup_epochs);
  maybe(j, "grad_clip", t.grad_clip);
  maybe(j, "early_stop_acc", t.early_stop_acc);
  return t;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  return {{"version", kConfigVersion},
          {"task", task.to_json()},
          {"overlap", overlap},
          {"k_teachers", k_teachers},
          {"teacher_layers", teacher_layers},
          {"teacher_d_model", teacher_d_model},
          {"n_heads", n_heads},
          {"student_layers", student_layers},
          {"student_d_model", student_d_model},
          {"lm_layers", lm_layers},
          {"lm_d_model", lm_d_model},
          {"lm_corpus_size", lm_corpus_size},
          {"steer", steer_to_json(steer)},
          {"lambda", lambda},
          {"tau", tau},
          {"teacher_acc_threshold", teacher_acc_threshold},
          {"baseline_text_n", baseline_text_n},
          {"teacher_train", train_to_json(teacher_train)},
          {"lm_train", train_to_json(lm_train)},
          {"student_train", train_to_json(student_train)},
          {"method", method},
          {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  check_keys(j, c.to_json(), "config");
  if (!j.contains("version") || j.at("version").get<int>() != kConfigVersion)
    throw std::invalid_argument("config: missing or unsupported version (expected " +
                                std::to_string(kConfigVersion) + ")");
  if (j.contains("task")) {
    check_keys(j.at("task"), c.task.to_json(), "task");
    nlohmann::json t = c.task.to_json();
    t.update(j.at("task"));
    c.task = TaskSpec::from_json(t);
  }
  maybe(j, "overlap", c.overlap);
  maybe(j, "k_teachers", c.k_teachers);
  maybe(j, "teacher_layers", c.teacher_layers);
  maybe(j, "teacher_d_model", c.teacher_d_model);
  maybe(j, "n_heads", c.n_heads);
  maybe(j, "student_layers", c.student_layers);
  maybe(j, "student_d_model", c.student_d_model);
  maybe(j, "lm_layers", c.lm_layers);
  maybe(j, "lm_d_model", c.lm_d_model);
  maybe(j, "lm_corpus_size", c.lm_corpus_size);
  if (j.contains("steer")) c.steer = steer_from_json(j.at("steer"));
  maybe(j, "lambda", c.lambda);
  maybe(j, "tau", c.tau);
  maybe(j, "teacher_acc_threshold", c.teacher_acc_threshold);
  maybe(j, "baseline_text_n", c.baseline_text_n);
  if (j.contains("teacher_train")) c.teacher_train = train_from_json(j.at("teacher_train"), "teacher_train");
  if (j.contains("lm_train")) c.lm_train = train_from_json(j.at("lm_train"), "lm_train");
  if (j.contains("student_train")) c.student_train = train_from_json(j.at("student_train"), "student_train");
  maybe(j, "method", c.method);
  maybe(j, "seed", c.seed);
  c.validate();
  return c;
}

// ---- stages ----

namespace {

constexpr std::uint64_t kTagTeacher = 0x7465616368;
constexpr std::uint64_t kTagLm = 0x6c6d;
constexpr std::uint64_t kTagStudent = 0x73747564;
constexpr std::uint64_t kTagFusion = 0x66757365;

ModelSpec teacher_spec(const ExperimentConfig& cfg, int i, int n_classes) {
  ModelSpec s;
  s.vocab_size = cfg.task.vocab_size;
  s.max_len = cfg.task.max_len;
  s.n_layers = cfg.teacher_layers[static_cast<std::size_t>(i)];
  s.d_model = cfg.teacher_d_model[static_cast<std::size_t>(i)];
  s.n_heads = cfg.n_heads;
  s.n_classes = n_classes;
  return s;
}

std::vector<double> to_doubles(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace

std::vector<Transformerf> train_teachers(const ExperimentConfig& cfg, const Task& task,
                                         const LabelAssignment& assign,
                                         std::vector<double>* valid_acc) {
  std::vector<Transformerf> out;
  if (valid_acc) valid_acc->clear();
  const auto& train = task.train.view();
  for (int i = 0; i < assign.n_teachers(); ++i) {
    auto my_train = teacher_view(train, assign, i);
    auto my_valid = teacher_view(task.valid, assign, i);
    Rng rng = Rng::fork(cfg.seed, kTagTeacher, static_cast<std::uint64_t>(i));
    auto model = Transformerf::init(
        teacher_spec(cfg, i, static_cast<int>(assign.union_classes[static_cast<std::size_t>(i)].size())), rng);
    TrainConfig tc = cfg.teacher_train;
    if (tc.early_stop_acc == 0.0) tc.early_stop_acc = std::min(0.99, cfg.teacher_acc_threshold + 0.05);
    const double acc = train_classifier(model, my_train, my_valid, tc, rng);
    if (acc < cfg.teacher_acc_threshold)
      throw std::runtime_error("train_teachers: teacher " + std::to_string(i) +
                               " reached only " + std::to_string(acc) +
                               " validation accuracy (threshold " +
                               std::to_string(cfg.teacher_acc_threshold) + ")");
    model.set_trainable(false);
    if (valid_acc) valid_acc->push_back(acc);
    out.push_back(std::move(model));
  }
  return out;
}

Transformerf train_base_lm(const ExperimentConfig& cfg) {
  TaskModel gen = build_task_model(cfg.task);
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < cfg.lm_corpus_size; ++i) {
    Rng rng = Rng::fork(cfg.seed, kTagLm, static_cast<std::uint64_t>(i));
    const int cls = i % cfg.task.n_classes;
    std::vector<int> seq = {0};
    for (int tok : gen.sample_sequence(cls, rng)) seq.push_back(tok);
    corpus.push_back(std::move(seq));
  }
  ModelSpec s;
  s.vocab_size = cfg.task.vocab_size;
  s.max_len = cfg.task.max_len + 1;  // room for the BOS prefix
  s.n_layers = cfg.lm_layers;
  s.d_model = cfg.lm_d_model;
  s.n_heads = cfg.n_heads;
  s.kind = ModelKind::causal_lm;
  Rng rng = Rng::fork(cfg.seed, kTagLm, 0xffffffff);
  auto lm = Transformerf::init(s, rng);
  train_lm(lm, corpus, cfg.lm_train, rng);
  lm.set_trainable(false);
  return lm;
}

TransferSet generate_transfer(const ExperimentConfig& cfg, const Transformerf& lm,
                              const std::vector<Transformerf>& teachers,
                              const LabelAssignment& assign) {
  std::vector<const Transformerf*> ptrs;
  for (const auto& t : teachers) ptrs.push_back(&t);
  return build_transfer_set(lm, ptrs, assign.union_classes, cfg.steer, cfg.seed);
}

std::vector<TeacherConf> fit_confidence(const ExperimentConfig& cfg,
                                        const std::vector<Transformerf>& teachers,
                                        const std::vector<std::vector<std::pair<int, int>>>& parts,
                                        const TransferSet& transfer) {
  NoGradGuard ng;
  std::vector<TeacherConf> out;
  const int n_blocks = cfg.student_layers;
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    const auto& heldout = transfer.heldout[i];
    if (heldout.empty())
      throw std::runtime_error("fit_confidence: no held-out pseudo-data for teacher " +
                               std::to_string(i));
    std::vector<std::vector<std::pair<std::vector<double>, int>>> reps(
        static_cast<std::size_t>(n_blocks));
    // The background Gaussian sees every teacher's held-out samples (all
    // encoded by teacher i), so it models the whole transfer distribution
    // rather than only teacher i's own classes.
    std::vector<std::vector<std::vector<double>>> bg(static_cast<std::size_t>(n_blocks));
    std::vector<std::vector<double>> msp_scores;
    for (std::size_t j = 0; j < transfer.heldout.size(); ++j) {
      for (const auto& s : transfer.heldout[j]) {
        auto f = teachers[i].forward(s.tokens);
        auto blocks = block_reps<float>(f, parts[i]);
        for (int b = 0; b < n_blocks; ++b) {
          auto rep = to_doubles(blocks[static_cast<std::size_t>(b)].data());
          if (j == i)
            reps[static_cast<std::size_t>(b)].push_back({rep, s.local_class});
          bg[static_cast<std::size_t>(b)].push_back(std::move(rep));
        }
        if (j == i) msp_scores.push_back({msp(to_doubles(f.logits.data()))});
      }
    }
    TeacherConf tc;
    const int n_classes = teachers[i].spec.n_classes;
    for (int b = 0; b < n_blocks; ++b) {
      tc.blocks.push_back(GaussianStats::fit(reps[static_cast<std::size_t>(b)], n_classes,
                                             bg[static_cast<std::size_t>(b)]));
      std::vector<double> raw_md;
      for (const auto& [h, y] : reps[static_cast<std::size_t>(b)]) {
        double mn = tc.blocks.back().md(h, 0);
        for (int c = 1; c < n_classes; ++c) mn = std::min(mn, tc.blocks.back().md(h, c));
        raw_md.push_back(-mn);
      }
      tc.md_norm.push_back({mean(raw_md), std::max(stddev(raw_md), 1e-9)});
    }
    std::vector<double> flat;
    for (const auto& v : msp_scores) flat.push_back(v[0]);
    tc.msp_norm = {mean(flat), std::max(stddev(flat), 1e-9)};
    out.push_back(std::move(tc));
  }
  return out;
}

nlohmann::json TeacherConf::to_json() const {
  nlohmann::json blocks_j = nlohmann::json::array();
  for (const auto& b : blocks) blocks_j.push_back(b.to_json());
  nlohmann::json md_j = nlohmann::json::array();
  for (const auto& [m, s] : md_norm) md_j.push_back({m, s});
  return {{"blocks", blocks_j},
          {"md_norm", md_j},
          {"msp_norm", {msp_norm.first, msp_norm.second}}};
}

TeacherConf TeacherConf::from_json(const nlohmann::json& j) {
  TeacherConf tc;
  for (const auto& b : j.at("blocks")) tc.blocks.push_back(GaussianStats::from_json(b));
  for (const auto& p : j.at("md_norm")) tc.md_norm.push_back({p.at(0), p.at(1)});
  tc.msp_norm = {j.at("msp_norm").at(0), j.at("msp_norm").at(1)};
  return tc;
}

void save_confidence(const std::vector<TeacherConf>& conf, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["teachers"] = nlohmann::json::array();
  for (const auto& tc : conf) j["teachers"].push_back(tc.to_json());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_confidence: cannot open " + path);
  f << j.dump() << "\n";
}

std::vector<TeacherConf> load_confidence(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_confidence: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_confidence: unsupported format version");
  std::vector<TeacherConf> out;
  for (const auto& t : j.at("teachers")) out.push_back(TeacherConf::from_json(t));
  return out;
}

Artifacts prepare_artifacts(const ExperimentConfig& cfg) {
  cfg.validate();
  Artifacts art;
  TaskSpec ts = cfg.task;
  ts.seed = cfg.seed;  // the run seed governs every stage
  art.task = make_task(ts);
  art.assign = assign_labels(cfg.task.n_classes, cfg.k_teachers, cfg.overlap_mode());
  art.teachers = train_teachers(cfg, art.task, art.assign, &art.teacher_valid_acc);
  art.lm = train_base_lm(cfg);
  art.transfer = generate_transfer(cfg, art.lm, art.teachers, art.assign);
  art.n_blocks = cfg.student_layers;
  for (int i = 0; i < cfg.k_teachers; ++i)
    art.teacher_parts.push_back(partition(cfg.teacher_layers[static_cast<std::size_t>(i)], art.n_blocks));
  art.conf = fit_confidence(cfg, art.teachers, art.teacher_parts, art.transfer);
  return art;
}

double block_confidence(const TeacherConf& tc, ConfidenceSource source, int block,
                        const std::vector<double>& rep, const std::vector<double>& final_logits) {
  const auto& stats = tc.blocks[static_cast<std::size_t>(block)];
  switch (source) {
    case ConfidenceSource::rmd:
      return stats.confidence(rep).standardized;
    case ConfidenceSource::md: {
      double mn = stats.md(rep, 0);
      for (int c = 1; c < stats.n_classes(); ++c) mn = std::min(mn, stats.md(rep, c));
      const auto& [m, s] = tc.md_norm[static_cast<std::size_t>(block)];
      return (-mn - m) / s;
    }
    case ConfidenceSource::msp:
      return (msp(final_logits) - tc.msp_norm.first) / tc.msp_norm.second;
  }
  throw std::logic_error("block_confidence: unreachable");
}

// ---- student training ----

namespace {

// Frozen-teacher context of one training sample, computed once: the teacher
// block representations, their standardized confidences, and the soft target.
struct CachedSample {
  std::vector<int> tokens;
  std::vector<std::vector<Tensor<float>>> reps;  // [teacher][block], constants
  std::vector<std::vector<double>> conf;         // [teacher][block]
  std::vector<double> mixture;                   // union-space target row
};

std::vector<CachedSample> build_cache(const ExperimentConfig& cfg, const Artifacts& art,
                                      ConfidenceSource source,
                                      const std::vector<std::vector<int>>& sequences,
                                      bool equal_weights) {
  NoGradGuard ng;
  std::vector<CachedSample> out;
  out.reserve(sequences.size());
  for (const auto& tokens : sequences) {
    CachedSample cs;
    cs.tokens = tokens;
    std::vector<std::vector<double>> teacher_logits;
    std::vector<double> final_conf;
    for (std::size_t i = 0; i < art.teachers.size(); ++i) {
      auto f = art.teachers[i].forward(tokens);
      auto blocks = block_reps<float>(f, art.teacher_parts[i]);
      const auto logits = to_doubles(f.logits.data());
      std::vector<Tensor<float>> reps;
      std::vector<double> confs;
      for (int b = 0; b < art.n_blocks; ++b) {
        auto data = blocks[static_cast<std::size_t>(b)].data();
        const int d = static_cast<int>(data.size());
        reps.push_back(Tensor<float>::from_data({d}, std::move(data)));
        confs.push_back(block_confidence(art.conf[i], source, b,
                                         to_doubles(reps.back().data()), logits));
      }
      cs.reps.push_back(std::move(reps));
      cs.conf.push_back(std::move(confs));
      final_conf.push_back(equal_weights ? 0.0 : cs.conf.back().back());
      teacher_logits.push_back(logits);
    }
    cs.mixture = mixture_target(teacher_logits, final_conf, art.assign.union_classes,
                                art.assign.n_union, cfg.tau);
    out.push_back(std::move(cs));
  }
  return out;
}

// Joint optimization of the student and (when block matching is active) the
// fusion head, minimizing lambda * block loss + (1 - lambda) * soft-target KL.
void train_student(const ExperimentConfig& cfg, const Artifacts& art, const std::string& method,
                   Transformerf& student, AmalgamNet<float>& net,
                   const std::vector<CachedSample>& data, Rng& rng) {
  const bool with_blocks = method != "vanilla_ka_R" && method != "vanilla_ka_CD";
  const double lambda = with_blocks ? cfg.lambda : 0.0;
  const bool use_amal = with_blocks && lambda > 0.0;
  const bool use_out = lambda < 1.0;
  const auto student_part = partition(cfg.student_layers, art.n_blocks);
  const TrainConfig& tc = cfg.student_train;

  student.set_trainable(true);
  std::vector<Tensor<float>> params = student.params();
  if (use_amal) {
    net.set_trainable(true);
    for (auto& p : net.params()) params.push_back(p);
  }
  AdamW<float> opt(params, tc.lr, tc.weight_decay);
  const long steps_per_epoch = (static_cast<long>(data.size()) + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = steps_per_epoch * tc.epochs;
  const long warmup_steps = static_cast<long>(tc.warmup_epochs * static_cast<double>(steps_per_epoch));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      opt.zero_grad();
      std::vector<std::vector<Tensor<float>>> proj, targets;
      std::vector<std::vector<double>> mixture_rows;
      std::vector<Tensor<float>> student_logits;
      for (std::size_t n = start; n < end; ++n) {
        const auto& cs = data[order[n]];
        auto f = student.forward(cs.tokens);
        if (use_out) {
          mixture_rows.push_back(cs.mixture);
          student_logits.push_back(f.logits);
        }
        if (use_amal) {
          auto sblocks = block_reps<float>(f, student_part);
          std::vector<Tensor<float>> p_row, t_row;
          for (int b = 0; b < art.n_blocks; ++b) {
            std::vector<Tensor<float>> z;
            for (std::size_t i = 0; i < cs.reps.size(); ++i) {
              const auto& h = cs.reps[i][static_cast<std::size_t>(b)];
              const double c = cs.conf[i][static_cast<std::size_t>(b)];
              z.push_back(method == "stratanet_mul" ? net.enrich_mul(static_cast<int>(i), b, h, c)
                                                    : net.enrich(static_cast<int>(i), b, h, c));
            }
            std::vector<double> bconf;
            for (const auto& crow : cs.conf) bconf.push_back(crow[static_cast<std::size_t>(b)]);
            t_row.push_back(method == "stratanet_noST" ? net.fuse_linear(z, bconf)
                                                       : net.st_amalg(z));
            p_row.push_back(net.project(b, sblocks[static_cast<std::size_t>(b)]));
          }
          proj.push_back(std::move(p_row));
          targets.push_back(std::move(t_row));
        }
      }
      Tensor<float> loss;
      // The block-matching term sums squared errors over d_a dimensions while
      // the soft-target term is a KL in nats; normalizing the former by d_a
      // (with a fixed gain so it competes with the KL term at moderate lambda)
      // lets lambda blend the two meaningfully.
      constexpr double kAmalGain = 8.0;
      const double amal_scale = kAmalGain / static_cast<double>(net.cfg.width());
      if (use_amal && use_out)
        loss = total_loss(scale(amal_loss(proj, targets), amal_scale),
                          out_loss(mixture_rows, student_logits, cfg.tau), lambda);
      else if (use_amal)
        loss = scale(amal_loss(proj, targets), amal_scale);
      else
        loss = out_loss(mixture_rows, student_logits, cfg.tau);
      loss.backward();
      opt.clip_grad_norm(tc.grad_clip);
      opt.set_lr(tc.lr * lr_factor(step, warmup_steps, total_steps));
      opt.step();
      ++step;
    }
  }
  student.set_trainable(false);
}

}  // namespace

double ensemble_accuracy(const std::vector<Transformerf>& teachers, const LabelAssignment& assign,
                         const std::vector<LabeledSeq>& test) {
  if (test.empty()) throw std::invalid_argument("ensemble_accuracy: empty test set");
  NoGradGuard ng;
  int correct = 0;
  for (const auto& ex : test) {
    std::vector<double> score(static_cast<std::size_t>(assign.n_union), 0.0);
    std::vector<int> owners(static_cast<std::size_t>(assign.n_union), 0);
    for (std::size_t i = 0; i < teachers.size(); ++i) {
      const auto logits = teachers[i].forward(ex.tokens).logits.data();
      const auto& classes = assign.union_classes[i];
      for (std::size_t c = 0; c < classes.size(); ++c) {
        score[static_cast<std::size_t>(classes[c])] += static_cast<double>(logits[c]);
        owners[static_cast<std::size_t>(classes[c])]++;
      }
    }
    int best = -1;
    double best_score = 0.0;
    for (int u = 0; u < assign.n_union; ++u) {
      if (owners[static_cast<std::size_t>(u)] == 0) continue;
      const double s = score[static_cast<std::size_t>(u)] / owners[static_cast<std::size_t>(u)];
      if (best < 0 || s > best_score) {
        best = u;
        best_score = s;
      }
    }
    if (best == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double best_teacher_accuracy(const std::vector<Transformerf>& teachers,
                             const LabelAssignment& assign, const std::vector<LabeledSeq>& test) {
  if (test.empty()) throw std::invalid_argument("best_teacher_accuracy: empty test set");
  NoGradGuard ng;
  double best = 0.0;
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    int correct = 0;
    for (const auto& ex : test) {
      const auto logits = teachers[i].forward(ex.tokens).logits.data();
      int amax = 0;
      for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[static_cast<std::size_t>(amax)]) amax = static_cast<int>(c);
      if (assign.union_classes[i][static_cast<std::size_t>(amax)] == ex.label) ++correct;
    }
    best = std::max(best, static_cast<double>(correct) / static_cast<double>(test.size()));
  }
  return best;
}

MethodResult run_method(const ExperimentConfig& cfg, Artifacts& art, TrainedStudent* out) {
  if (!method_valid(cfg.method))
    throw std::invalid_argument("run_method: unknown method '" + cfg.method + "'");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t train_accesses_before = art.task.train.access_count();

  MethodResult res;
  res.method = cfg.method;
  res.extras["seed"] = cfg.seed;
  res.extras["teacher_valid_acc"] = art.teacher_valid_acc;

  if (cfg.method == "teacher_only") {
    res.accuracy = best_teacher_accuracy(art.teachers, art.assign, art.task.test);
  } else if (cfg.method == "ensemble") {
    res.accuracy = ensemble_accuracy(art.teachers, art.assign, art.task.test);
  } else {
    ModelSpec ss;
    ss.vocab_size = cfg.task.vocab_size;
    ss.max_len = cfg.task.max_len;
    ss.n_layers = cfg.student_layers;
    ss.d_model = cfg.student_d_model;
    ss.n_heads = cfg.n_heads;
    ss.n_classes = art.assign.n_union;
    Rng srng = Rng::fork(cfg.seed, kTagStudent);
    auto student = Transformerf::init(ss, srng);

    AmalgamConfig ac;
    ac.teacher_dims = cfg.teacher_d_model;
    ac.d_student = cfg.student_d_model;
    ac.n_blocks = art.n_blocks;
    ac.n_heads = cfg.n_heads;
    ac.lambda = cfg.lambda;
    ac.tau = cfg.tau;
    Rng frng = Rng::fork(cfg.seed, kTagFusion);
    auto net = AmalgamNet<float>::init(ac, frng);

    std::vector<std::vector<int>> sequences;
    const bool vanilla = cfg.method == "vanilla_ka_R" || cfg.method == "vanilla_ka_CD";
    if (vanilla) {
      const int n = cfg.baseline_text_n > 0 ? cfg.baseline_text_n
                                            : static_cast<int>(art.transfer.train.size());
      sequences = cfg.method == "vanilla_ka_R"
                      ? random_text(cfg.task.vocab_size, cfg.task.min_len,
                                    std::min(cfg.task.max_len, cfg.steer.max_len), n,
                                    cfg.seed ^ 0x52414e44)
                      : cross_domain_text(make_cross_domain_spec(cfg.task), n,
                                          cfg.seed ^ 0x43444f4d);
    } else {
      for (const auto& s : art.transfer.train) sequences.push_back(s.tokens);
    }
    auto cache = build_cache(cfg, art, confidence_source_for(cfg.method), sequences, vanilla);
    train_student(cfg, art, cfg.method, student, net, cache, srng);
    res.accuracy = classifier_accuracy(student, art.task.test);
    res.extras["n_student_train"] = sequences.size();
    if (out) {
      out->model = std::move(student);
      out->net = std::move(net);
    }
  }

  res.extras["train_split_accesses_during_run"] =
      art.task.train.access_count() - train_accesses_before;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

nlohmann::json ood_report(const ExperimentConfig& cfg, const Artifacts& art) {
  NoGradGuard ng;
  nlohmann::json out = nlohmann::json::array();
  const int last = art.n_blocks - 1;
  for (std::size_t i = 0; i < art.teachers.size(); ++i) {
    std::vector<double> in_rmd, out_rmd, in_md, out_md, in_msp, out_msp;
    for (const auto& ex : art.task.test) {
      auto f = art.teachers[i].forward(ex.tokens);
      auto blocks = block_reps<float>(f, art.teacher_parts[i]);
      const auto rep = to_doubles(blocks[static_cast<std::size_t>(last)].data());
      const auto logits = to_doubles(f.logits.data());
      const bool in_domain = art.assign.local_index(static_cast<int>(i), ex.label) >= 0;
      auto& rmd_v = in_domain ? in_rmd : out_rmd;
      auto& md_v = in_domain ? in_md : out_md;
      auto& msp_v = in_domain ? in_msp : out_msp;
      rmd_v.push_back(block_confidence(art.conf[i], ConfidenceSource::rmd, last, rep, logits));
      md_v.push_back(block_confidence(art.conf[i], ConfidenceSource::md, last, rep, logits));
      msp_v.push_back(block_confidence(art.conf[i], ConfidenceSource::msp, last, rep, logits));
    }
    out.push_back({{"teacher", i},
                   {"auroc_rmd", auroc(in_rmd, out_rmd)},
                   {"auroc_md", auroc(in_md, out_md)},
                   {"auroc_msp", auroc(in_msp, out_msp)}});
  }
  return out;
}

nlohmann::json run_benchmark(const ExperimentConfig& base, const std::vector<std::string>& methods,
                             const std::vector<std::uint64_t>& seeds) {
  if (methods.empty() || seeds.empty())
    throw std::invalid_argument("run_benchmark: need at least one method and one seed");
  nlohmann::json records = nlohmann::json::array();
  std::map<std::string, std::vector<double>> by_method;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base;
    cfg.seed = seed;
    Artifacts art = prepare_artifacts(cfg);
    for (const auto& method : methods) {
      cfg.method = method;
      auto res = run_method(cfg, art);
      by_method[method].push_back(res.accuracy);
      records.push_back({{"method", method},
                         {"seed", seed},
                         {"accuracy", res.accuracy},
                         {"wall_seconds", res.wall_seconds},
                         {"extras", res.extras}});
    }
  }
  nlohmann::json summary;
  for (const auto& [method, accs] : by_method)
    summary[method] = {{"mean", mean(accs)}, {"std", stddev(accs)}, {"n", accs.size()}};
  return {{"records", records}, {"summary", summary}};
}

}  // namespace stratanet
