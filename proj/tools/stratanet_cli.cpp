// Command-line driver: wires JSON run configs to the pipeline stages and
// writes every artifact under a run directory. Batch operation only.
//
// Exit codes: 0 success, 2 invalid config, 3 missing prerequisite artifact,
// 1 any other failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stratanet/pipeline.hpp"

using namespace stratanet;
namespace fs = std::filesystem;

namespace {

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<double> lambda;
  std::optional<double> gamma;
  std::optional<int> k_teachers;
  std::string lambda_list;  // sweep only, comma separated
  std::string k_list;       // sweep only, comma separated
  bool emit_plots = false;
};

void add_common(CLI::App* cmd, Options& opt) {
  cmd->add_option("--config", opt.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--out", opt.out_dir, "run directory for artifacts");
  cmd->add_option("--seed", opt.seed, "override the config seed");
  cmd->add_option("--method", opt.method, "override the config method");
  cmd->add_option("--lambda", opt.lambda, "override the block-loss weight");
  cmd->add_option("--gamma", opt.gamma, "override the steering strength");
  cmd->add_option("--k-teachers", opt.k_teachers, "override the teacher count");
}

ExperimentConfig load_config(const Options& opt) {
  std::ifstream f(opt.config_path);
  if (!f) throw std::invalid_argument("cannot open config " + opt.config_path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, true, true);  // allow comments
  auto cfg = ExperimentConfig::from_json(j);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.method) cfg.method = *opt.method;
  if (opt.lambda) cfg.lambda = *opt.lambda;
  if (opt.gamma) cfg.steer.gamma = *opt.gamma;
  if (opt.k_teachers) {
    cfg.k_teachers = *opt.k_teachers;
    // replicate the last configured teacher shape for any extra teachers
    cfg.teacher_layers.resize(static_cast<std::size_t>(cfg.k_teachers),
                              cfg.teacher_layers.empty() ? 2 : cfg.teacher_layers.back());
    cfg.teacher_d_model.resize(static_cast<std::size_t>(cfg.k_teachers),
                               cfg.teacher_d_model.empty() ? 32 : cfg.teacher_d_model.back());
  }
  cfg.validate();
  return cfg;
}

std::string path_in(const Options& opt, const std::string& name) {
  return (fs::path(opt.out_dir) / name).string();
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifact("missing prerequisite artifact: " + path);
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << j.dump(2) << "\n";
}

Task rebuild_task(const ExperimentConfig& cfg) {
  TaskSpec ts = cfg.task;
  ts.seed = cfg.seed;
  return make_task(ts);
}

std::vector<Transformerf> load_teachers(const ExperimentConfig& cfg, const Options& opt) {
  std::vector<Transformerf> out;
  for (int i = 0; i < cfg.k_teachers; ++i) {
    const std::string base = "teacher" + std::to_string(i);
    require_file(path_in(opt, base + ".json"));
    require_file(path_in(opt, base + ".bin"));
    out.push_back(load_model<float>(opt.out_dir, base));
    out.back().set_trainable(false);
  }
  return out;
}

std::vector<double> parse_list(const std::string& csv, const char* what) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  if (out.empty()) throw std::invalid_argument(std::string("empty value list for ") + what);
  return out;
}

// minimal static line chart, x in [0,1] of the value range
void write_svg_line(const std::vector<double>& xs, const std::vector<double>& ys,
                    const std::string& x_label, const std::string& path) {
  const int w = 480, h = 320, pad = 48;
  double x0 = xs.front(), x1 = xs.back(), y0 = 0.0, y1 = 1.0;
  if (x1 == x0) x1 = x0 + 1.0;
  auto px = [&](double x) { return pad + (x - x0) / (x1 - x0) * (w - 2 * pad); };
  auto py = [&](double y) { return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad); };
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<line x1='" << pad << "' y1='" << h - pad << "' x2='" << w - pad << "' y2='" << h - pad
    << "' stroke='black'/>\n";
  f << "<line x1='" << pad << "' y1='" << pad << "' x2='" << pad << "' y2='" << h - pad
    << "' stroke='black'/>\n";
  f << "<text x='" << w / 2 << "' y='" << h - 12 << "' text-anchor='middle' font-size='12'>"
    << x_label << "</text>\n";
  f << "<text x='14' y='" << h / 2 << "' font-size='12' transform='rotate(-90 14 " << h / 2
    << ")' text-anchor='middle'>accuracy</text>\n";
  f << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
  for (std::size_t i = 0; i < xs.size(); ++i) f << px(xs[i]) << "," << py(ys[i]) << " ";
  f << "'/>\n";
  for (std::size_t i = 0; i < xs.size(); ++i)
    f << "<circle cx='" << px(xs[i]) << "' cy='" << py(ys[i]) << "' r='3' fill='steelblue'/>\n";
  f << "</svg>\n";
}

// ---- commands ----

int cmd_train_teachers(const Options& opt) {
  auto cfg = load_config(opt);
  fs::create_directories(opt.out_dir);
  write_json(cfg.to_json(), path_in(opt, "config.resolved.json"));
  Task task = rebuild_task(cfg);
  auto assign = assign_labels(cfg.task.n_classes, cfg.k_teachers, cfg.overlap_mode());
  save_task_manifest(cfg.task, assign, path_in(opt, "task.json"));
  std::vector<double> accs;
  auto teachers = train_teachers(cfg, task, assign, &accs);
  for (std::size_t i = 0; i < teachers.size(); ++i)
    save_model(teachers[i], opt.out_dir, "teacher" + std::to_string(i));
  auto lm = train_base_lm(cfg);
  save_model(lm, opt.out_dir, "lm");
  write_json({{"teacher_valid_acc", accs}, {"k_teachers", cfg.k_teachers}},
             path_in(opt, "teachers_meta.json"));
  std::cout << "trained " << teachers.size() << " teachers and the base LM -> " << opt.out_dir
            << "\n";
  return 0;
}

int cmd_generate(const Options& opt) {
  auto cfg = load_config(opt);
  auto teachers = load_teachers(cfg, opt);
  require_file(path_in(opt, "lm.json"));
  auto lm = load_model<float>(opt.out_dir, "lm");
  lm.set_trainable(false);
  auto assign = assign_labels(cfg.task.n_classes, cfg.k_teachers, cfg.overlap_mode());
  auto transfer = generate_transfer(cfg, lm, teachers, assign);

  std::vector<LabeledSeq> train;
  for (const auto& s : transfer.train) train.push_back({s.tokens, s.union_class});
  save_labeled_seqs(train, path_in(opt, "pseudo_train.txt"));
  for (std::size_t i = 0; i < transfer.heldout.size(); ++i) {
    std::vector<LabeledSeq> held;  // local labels, for per-teacher confidence fitting
    for (const auto& s : transfer.heldout[i]) held.push_back({s.tokens, s.local_class});
    save_labeled_seqs(held, path_in(opt, "pseudo_heldout_t" + std::to_string(i) + ".txt"));
  }
  nlohmann::json tj;
  tj["n_train"] = train.size();
  tj["n_heldout_per_teacher"] = transfer.heldout.front().size();
  tj["steer"] = {{"gamma", cfg.steer.gamma},
                 {"m", cfg.steer.m},
                 {"k", cfg.steer.k},
                 {"nucleus_p", cfg.steer.nucleus_p},
                 {"max_len", cfg.steer.max_len},
                 {"n_samples", cfg.steer.n_samples},
                 {"heldout_fraction", cfg.steer.heldout_fraction}};
  write_json(tj, path_in(opt, "transfer.json"));
  std::cout << "generated " << train.size() << " pseudo-samples -> " << opt.out_dir << "\n";
  return 0;
}

// rebuilds the in-memory artifact bundle from checkpoints (without the LM)
Artifacts load_artifacts(const ExperimentConfig& cfg, const Options& opt, bool need_conf) {
  Artifacts art;
  art.task = rebuild_task(cfg);
  art.assign = assign_labels(cfg.task.n_classes, cfg.k_teachers, cfg.overlap_mode());
  art.teachers = load_teachers(cfg, opt);
  art.n_blocks = cfg.student_layers;
  for (int i = 0; i < cfg.k_teachers; ++i)
    art.teacher_parts.push_back(
        partition(cfg.teacher_layers[static_cast<std::size_t>(i)], art.n_blocks));
  require_file(path_in(opt, "pseudo_train.txt"));
  for (const auto& ex : load_labeled_seqs(path_in(opt, "pseudo_train.txt"))) {
    PseudoSample s;
    s.tokens = ex.tokens;
    s.union_class = ex.label;
    art.transfer.train.push_back(std::move(s));
  }
  art.transfer.heldout.resize(static_cast<std::size_t>(cfg.k_teachers));
  for (int i = 0; i < cfg.k_teachers; ++i) {
    const std::string p = path_in(opt, "pseudo_heldout_t" + std::to_string(i) + ".txt");
    require_file(p);
    for (const auto& ex : load_labeled_seqs(p)) {
      PseudoSample s;
      s.tokens = ex.tokens;
      s.local_class = ex.label;
      s.teacher_id = i;
      art.transfer.heldout[static_cast<std::size_t>(i)].push_back(std::move(s));
    }
  }
  if (need_conf) {
    require_file(path_in(opt, "confidence.json"));
    art.conf = load_confidence(path_in(opt, "confidence.json"));
  }
  return art;
}

int cmd_fit_ood(const Options& opt) {
  auto cfg = load_config(opt);
  auto art = load_artifacts(cfg, opt, false);
  art.conf = fit_confidence(cfg, art.teachers, art.teacher_parts, art.transfer);
  save_confidence(art.conf, path_in(opt, "confidence.json"));
  write_json(ood_report(cfg, art), path_in(opt, "ood_report.json"));
  std::cout << "fitted confidence models for " << art.conf.size() << " teachers -> "
            << opt.out_dir << "\n";
  return 0;
}

int cmd_train_student(const Options& opt) {
  auto cfg = load_config(opt);
  auto art = load_artifacts(cfg, opt, true);
  TrainedStudent trained;
  auto res = run_method(cfg, art, &trained);
  if (cfg.method != "ensemble" && cfg.method != "teacher_only") {
    save_model(trained.model, opt.out_dir, "student");
    save_amalgam(trained.net, opt.out_dir, "fusion");
  }
  write_json({{"method", res.method},
              {"accuracy", res.accuracy},
              {"wall_seconds", res.wall_seconds},
              {"extras", res.extras}},
             path_in(opt, "train_result.json"));
  std::cout << res.method << " test accuracy " << res.accuracy << "\n";
  return 0;
}

int cmd_evaluate(const Options& opt) {
  auto cfg = load_config(opt);
  require_file(path_in(opt, "student.json"));
  auto student = load_model<float>(opt.out_dir, "student");
  student.set_trainable(false);
  Task task = rebuild_task(cfg);
  const double acc = classifier_accuracy(student, task.test);
  // byte-identical across repeated runs: no timing, fixed key order
  write_json({{"accuracy", acc},
              {"config_version", kConfigVersion},
              {"method", cfg.method},
              {"n_test", task.test.size()},
              {"seed", cfg.seed}},
             path_in(opt, "result.json"));
  std::cout << "test accuracy " << acc << "\n";
  return 0;
}

int cmd_ablate(const Options& opt) {
  auto cfg = load_config(opt);
  fs::create_directories(opt.out_dir);
  auto art = prepare_artifacts(cfg);
  auto res = run_method(cfg, art);
  nlohmann::json row = {{"method", res.method},
                        {"seed", cfg.seed},
                        {"accuracy", res.accuracy},
                        {"wall_seconds", res.wall_seconds},
                        {"extras", res.extras}};
  write_json(row, path_in(opt, "ablate_" + res.method + ".json"));
  std::ofstream rec(path_in(opt, "report.jsonl"), std::ios::app);
  rec << row.dump() << "\n";
  std::cout << res.method << " test accuracy " << res.accuracy << "\n";
  return 0;
}

int cmd_sweep(const Options& opt) {
  auto cfg = load_config(opt);
  fs::create_directories(opt.out_dir);
  if (!opt.lambda_list.empty()) {
    const auto values = parse_list(opt.lambda_list, "--lambda-values");
    auto art = prepare_artifacts(cfg);
    nlohmann::json rows = nlohmann::json::array();
    std::vector<double> ys;
    for (double v : values) {
      ExperimentConfig c = cfg;
      c.lambda = v;
      auto res = run_method(c, art);
      rows.push_back({{"lambda", v}, {"accuracy", res.accuracy}});
      ys.push_back(res.accuracy);
      std::cout << "lambda " << v << " accuracy " << res.accuracy << "\n";
    }
    write_json({{"sweep", "lambda"}, {"method", cfg.method}, {"rows", rows}},
               path_in(opt, "sweep_lambda.json"));
    if (opt.emit_plots) write_svg_line(values, ys, "lambda", path_in(opt, "sweep_lambda.svg"));
    return 0;
  }
  if (!opt.k_list.empty()) {
    const auto values = parse_list(opt.k_list, "--k-values");
    nlohmann::json rows = nlohmann::json::array();
    std::vector<double> xs, ys;
    for (double v : values) {
      ExperimentConfig c = cfg;
      c.k_teachers = static_cast<int>(v);
      c.teacher_layers.resize(static_cast<std::size_t>(c.k_teachers),
                              c.teacher_layers.empty() ? 2 : c.teacher_layers.back());
      c.teacher_d_model.resize(static_cast<std::size_t>(c.k_teachers),
                               c.teacher_d_model.empty() ? 32 : c.teacher_d_model.back());
      c.validate();
      auto art = prepare_artifacts(c);
      auto res = run_method(c, art);
      const double ens = ensemble_accuracy(art.teachers, art.assign, art.task.test);
      rows.push_back(
          {{"k_teachers", c.k_teachers}, {"accuracy", res.accuracy}, {"ensemble", ens}});
      xs.push_back(v);
      ys.push_back(res.accuracy);
      std::cout << "k " << c.k_teachers << " accuracy " << res.accuracy << " ensemble " << ens
                << "\n";
    }
    write_json({{"sweep", "k_teachers"}, {"method", cfg.method}, {"rows", rows}},
               path_in(opt, "sweep_teachers.json"));
    if (opt.emit_plots) write_svg_line(xs, ys, "teachers", path_in(opt, "sweep_teachers.svg"));
    return 0;
  }
  throw std::invalid_argument("sweep: pass --lambda-values or --k-values");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-free multi-teacher knowledge amalgamation at desk scale"};
  app.set_help_all_flag("--help-all", "print help for every command");
  app.require_subcommand(1);
  Options opt;

  auto* c_teach = app.add_subcommand("train-teachers", "train the specialist teachers and base LM");
  auto* c_gen = app.add_subcommand("generate", "decode the steered pseudo-data transfer set");
  auto* c_ood = app.add_subcommand("fit-ood", "fit per-block confidence models on held-out pseudo-data");
  auto* c_student = app.add_subcommand("train-student", "train the student under the configured method");
  auto* c_eval = app.add_subcommand("evaluate", "score a student checkpoint on the union test split");
  auto* c_ablate = app.add_subcommand("ablate", "full in-memory run of one method");
  auto* c_sweep = app.add_subcommand("sweep", "sweep lambda or the teacher count");
  for (auto* c : {c_teach, c_gen, c_ood, c_student, c_eval, c_ablate, c_sweep}) add_common(c, opt);
  c_sweep->add_option("--lambda-values", opt.lambda_list, "comma-separated lambda sweep values");
  c_sweep->add_option("--k-values", opt.k_list, "comma-separated teacher-count sweep values");
  c_sweep->add_flag("--emit-plots", opt.emit_plots, "write SVG charts next to the sweep results");

  CLI11_PARSE(app, argc, argv);
  try {
    if (c_teach->parsed()) return cmd_train_teachers(opt);
    if (c_gen->parsed()) return cmd_generate(opt);
    if (c_ood->parsed()) return cmd_fit_ood(opt);
    if (c_student->parsed()) return cmd_train_student(opt);
    if (c_eval->parsed()) return cmd_evaluate(opt);
    if (c_ablate->parsed()) return cmd_ablate(opt);
    if (c_sweep->parsed()) return cmd_sweep(opt);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
