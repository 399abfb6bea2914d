#include "stratanet/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace stratanet {

namespace {

// Marsaglia-Tsang gamma sampler (alpha >= 1 via boost for alpha < 1).
double sample_gamma(double alpha, Rng& rng) {
  if (alpha < 1.0) {
    const double u = rng.uniform();
    return sample_gamma(alpha + 1.0, rng) * std::pow(u, 1.0 / alpha);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::string seq_key(const std::vector<int>& tokens) {
  std::string k;
  for (int t : tokens) {
    k += std::to_string(t);
    k += ',';
  }
  return k;
}

}  // namespace

void TaskSpec::validate() const {
  if (n_classes < 2) throw std::invalid_argument("TaskSpec: n_classes < 2");
  if (min_len < 2 || max_len < min_len) throw std::invalid_argument("TaskSpec: bad length range");
  if (n_classes * dominant_tokens_per_class > vocab_size - 1)
    throw std::invalid_argument("TaskSpec: vocab too small for requested class separation");
  if (!(dominant_mass > 0.0 && dominant_mass < 1.0))
    throw std::invalid_argument("TaskSpec: dominant_mass must be in (0,1)");
  if (!(bigram_weight >= 0.0 && bigram_weight < 1.0))
    throw std::invalid_argument("TaskSpec: bigram_weight must be in [0,1)");
  if (n_train_per_class < 1 || n_test_per_class < 1)
    throw std::invalid_argument("TaskSpec: empty splits");
}

nlohmann::json TaskSpec::to_json() const {
  return {{"n_classes", n_classes},
          {"vocab_size", vocab_size},
          {"min_len", min_len},
          {"max_len", max_len},
          {"dominant_tokens_per_class", dominant_tokens_per_class},
          {"dominant_mass", dominant_mass},
          {"dirichlet_alpha", dirichlet_alpha},
          {"bigram_weight", bigram_weight},
          {"n_train_per_class", n_train_per_class},
          {"n_valid_per_class", n_valid_per_class},
          {"n_test_per_class", n_test_per_class},
          {"seed", seed}};
}

TaskSpec TaskSpec::from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.n_classes = j.at("n_classes");
  s.vocab_size = j.at("vocab_size");
  s.min_len = j.at("min_len");
  s.max_len = j.at("max_len");
  s.dominant_tokens_per_class = j.at("dominant_tokens_per_class");
  s.dominant_mass = j.at("dominant_mass");
  s.dirichlet_alpha = j.at("dirichlet_alpha");
  s.bigram_weight = j.at("bigram_weight");
  s.n_train_per_class = j.at("n_train_per_class");
  s.n_valid_per_class = j.at("n_valid_per_class");
  s.n_test_per_class = j.at("n_test_per_class");
  s.seed = j.at("seed");
  s.validate();
  return s;
}

TaskModel build_task_model(const TaskSpec& spec) {
  spec.validate();
  TaskModel m;
  m.spec = spec;
  const int v = spec.vocab_size;

  // dominant sets: disjoint contiguous chunks over a seed-shuffled token order
  std::vector<int> order;
  for (int t = 1; t < v; ++t) order.push_back(t);
  Rng shuffle_rng = Rng::fork(spec.seed, 0x746f6b656e);
  shuffle_rng.shuffle(order);

  m.topics.assign(static_cast<std::size_t>(spec.n_classes), std::vector<double>(static_cast<std::size_t>(v), 0.0));
  for (int c = 0; c < spec.n_classes; ++c) {
    Rng trng = Rng::fork(spec.seed, 0x746f706963, static_cast<std::uint64_t>(c));
    auto& topic = m.topics[static_cast<std::size_t>(c)];
    const int d = spec.dominant_tokens_per_class;
    std::vector<double> weights(static_cast<std::size_t>(d));
    double wsum = 0.0;
    for (int j = 0; j < d; ++j) {
      weights[static_cast<std::size_t>(j)] = sample_gamma(spec.dirichlet_alpha, trng);
      wsum += weights[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < d; ++j)
      topic[static_cast<std::size_t>(order[static_cast<std::size_t>(c * d + j)])] =
          spec.dominant_mass * weights[static_cast<std::size_t>(j)] / wsum;
    const double rest = (1.0 - spec.dominant_mass) / static_cast<double>(v - 1 - d);
    for (int t = 1; t < v; ++t)
      if (topic[static_cast<std::size_t>(t)] == 0.0) topic[static_cast<std::size_t>(t)] = rest;
  }

  // shared successor grammar: a fixed permutation of 1..v-1
  std::vector<int> succ_order = order;
  Rng grng = Rng::fork(spec.seed, 0x6772616d6d6172);
  grng.shuffle(succ_order);
  m.successor.assign(static_cast<std::size_t>(v), 0);
  for (std::size_t i = 0; i + 1 < succ_order.size(); ++i)
    m.successor[static_cast<std::size_t>(succ_order[i])] = succ_order[i + 1];
  m.successor[static_cast<std::size_t>(succ_order.back())] = succ_order.front();
  return m;
}

std::vector<double> TaskModel::next_distribution(int prev, int cls) const {
  const int v = spec.vocab_size;
  if (cls < 0 || cls >= spec.n_classes) throw std::invalid_argument("next_distribution: bad class");
  std::vector<double> dist(static_cast<std::size_t>(v), 0.0);
  const auto& topic = topics[static_cast<std::size_t>(cls)];
  const double bw = prev > 0 ? spec.bigram_weight : 0.0;
  for (int t = 1; t < v; ++t) dist[static_cast<std::size_t>(t)] = (1.0 - bw) * topic[static_cast<std::size_t>(t)];
  if (prev > 0) {
    // grammar mass: mostly the preferred successor, a little spread
    const int nxt = successor[static_cast<std::size_t>(prev)];
    dist[static_cast<std::size_t>(nxt)] += bw * 0.8;
    const double spread = bw * 0.2 / static_cast<double>(v - 1);
    for (int t = 1; t < v; ++t) dist[static_cast<std::size_t>(t)] += spread;
  }
  return dist;
}

std::vector<int> TaskModel::sample_sequence(int cls, Rng& rng) const {
  const int len = spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
  std::vector<int> seq;
  int prev = 0;
  for (int t = 0; t < len; ++t) {
    const int tok = rng.categorical(next_distribution(prev, cls));
    seq.push_back(tok);
    prev = tok;
  }
  return seq;
}

Task make_task(const TaskSpec& spec) {
  TaskModel model = build_task_model(spec);
  std::set<std::string> seen;

  auto sample_split = [&](int per_class, std::uint64_t split_tag) {
    std::vector<LabeledSeq> out;
    for (int c = 0; c < spec.n_classes; ++c) {
      for (int i = 0; i < per_class; ++i) {
        Rng rng = Rng::fork(spec.seed, split_tag, static_cast<std::uint64_t>(c),
                            static_cast<std::uint64_t>(i));
        LabeledSeq ex;
        ex.label = c;
        ex.tokens = model.sample_sequence(c, rng);
        // splits must be disjoint: resample on collision
        int guard = 0;
        while (seen.count(seq_key(ex.tokens)) && guard++ < 64)
          ex.tokens = model.sample_sequence(c, rng);
        seen.insert(seq_key(ex.tokens));
        out.push_back(std::move(ex));
      }
    }
    return out;
  };

  Task task;
  task.spec = spec;
  task.train = LoggedSplit(sample_split(spec.n_train_per_class, 1));
  task.valid = sample_split(spec.n_valid_per_class, 2);
  task.test = sample_split(spec.n_test_per_class, 3);
  return task;
}

int LabelAssignment::local_index(int teacher, int union_label) const {
  const auto& subset = union_classes[static_cast<std::size_t>(teacher)];
  for (std::size_t j = 0; j < subset.size(); ++j)
    if (subset[j] == union_label) return static_cast<int>(j);
  return -1;
}

LabelAssignment assign_labels(int n_union, int k_teachers, OverlapMode mode) {
  if (k_teachers < 1) throw std::invalid_argument("assign_labels: need at least one teacher");
  LabelAssignment a;
  a.n_union = n_union;
  if (mode == OverlapMode::disjoint) {
    if (n_union < 2 * k_teachers)
      throw std::invalid_argument("assign_labels: need |Y| >= 2K for disjoint subsets");
    // first (n mod K) subsets take the larger share
    const int base = n_union / k_teachers;
    const int extra = n_union % k_teachers;
    int next = 0;
    for (int i = 0; i < k_teachers; ++i) {
      const int size = base + (i < extra ? 1 : 0);
      std::vector<int> subset;
      for (int j = 0; j < size; ++j) subset.push_back(next++);
      a.union_classes.push_back(std::move(subset));
    }
  } else {
    // contiguous chunks where adjacent subsets share one label
    if (n_union < k_teachers + 1)
      throw std::invalid_argument("assign_labels: infeasible partial split");
    const int chunk = (n_union - 1 + k_teachers - 1) / k_teachers + 1;  // with overlap 1
    for (int i = 0; i < k_teachers; ++i) {
      int start = i * (chunk - 1);
      int end = std::min(n_union, start + chunk);
      if (end - start < 2) {
        start = n_union - 2;
        end = n_union;
      }
      std::vector<int> subset;
      for (int j = start; j < end; ++j) subset.push_back(j);
      a.union_classes.push_back(std::move(subset));
    }
  }
  return a;
}

std::vector<LabeledSeq> teacher_view(const std::vector<LabeledSeq>& data,
                                     const LabelAssignment& assign, int teacher) {
  std::vector<LabeledSeq> out;
  for (const auto& ex : data) {
    const int local = assign.local_index(teacher, ex.label);
    if (local < 0) continue;
    out.push_back({ex.tokens, local});
  }
  return out;
}

std::vector<std::vector<int>> random_text(int vocab_size, int min_len, int max_len, int n,
                                          std::uint64_t seed) {
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::fork(seed, 0x72616e646f6d, static_cast<std::uint64_t>(i));
    const int len = min_len + rng.uniform_int(max_len - min_len + 1);
    std::vector<int> seq;
    for (int t = 0; t < len; ++t) seq.push_back(1 + rng.uniform_int(vocab_size - 1));
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<std::vector<int>> cross_domain_text(const TaskSpec& other, int n, std::uint64_t seed) {
  TaskModel model = build_task_model(other);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::fork(seed, 0x63726f7373, static_cast<std::uint64_t>(i));
    const int cls = rng.uniform_int(other.n_classes);
    out.push_back(model.sample_sequence(cls, rng));
  }
  return out;
}

TaskSpec make_cross_domain_spec(const TaskSpec& base) {
  TaskSpec cd = base;
  cd.seed = base.seed ^ 0x5cd5cd5cd5cd5cdULL;  // different topics and grammar
  return cd;
}

void save_task_manifest(const TaskSpec& spec, const LabelAssignment& assign,
                        const std::string& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["task"] = spec.to_json();
  j["label_assignment"] = assign.union_classes;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_task_manifest: cannot open " + path);
  f << j.dump(2) << "\n";
}

void save_labeled_seqs(const std::vector<LabeledSeq>& data, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_labeled_seqs: cannot open " + path);
  for (const auto& ex : data) {
    f << ex.label << '\t';
    for (std::size_t i = 0; i < ex.tokens.size(); ++i)
      f << ex.tokens[i] << (i + 1 < ex.tokens.size() ? " " : "");
    f << '\n';
  }
}

std::vector<LabeledSeq> load_labeled_seqs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_labeled_seqs: cannot open " + path);
  std::vector<LabeledSeq> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("load_labeled_seqs: malformed line");
    LabeledSeq ex;
    ex.label = std::stoi(line.substr(0, tab));
    std::istringstream ss(line.substr(tab + 1));
    int tok;
    while (ss >> tok) ex.tokens.push_back(tok);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace stratanet
