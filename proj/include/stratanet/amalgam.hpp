#pragma once

// Knowledge-amalgamation head: per-teacher block partitioning, linear
// enrichment of block embeddings with their confidence scores, a single
// attention+FFN fusion pass over a learnable aggregation token plus the K
// enriched teacher vectors (order-invariant: the fusion sequence carries no
// positional information), per-block student projections, and the training
// losses (block-matching squared error, confidence-weighted soft-target KL,
// and their convex combination).

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stratanet/model.hpp"
#include "stratanet/tensor.hpp"

namespace stratanet {

// Contiguous near-equal split of layers 0..n_layers-1 into n_blocks ranges
// (inclusive endpoints); the first (n_layers mod n_blocks) ranges get the
// extra layer.
inline std::vector<std::pair<int, int>> partition(int n_layers, int n_blocks) {
  if (n_blocks < 1 || n_layers < n_blocks)
    throw std::invalid_argument("partition: need n_layers >= n_blocks >= 1");
  const int base = n_layers / n_blocks, extra = n_layers % n_blocks;
  std::vector<std::pair<int, int>> out;
  int start = 0;
  for (int b = 0; b < n_blocks; ++b) {
    const int len = base + (b < extra ? 1 : 0);
    out.push_back({start, start + len - 1});
    start += len;
  }
  return out;
}

// Pooled per-block representations of one forward pass: mean over tokens per
// layer, then mean over the block's layers.
template <typename T>
std::vector<Tensor<T>> block_reps(const typename Transformer<T>::Forward& f,
                                  const std::vector<std::pair<int, int>>& part) {
  std::vector<Tensor<T>> out;
  for (const auto& [lo, hi] : part) {
    if (lo < 0 || hi >= static_cast<int>(f.layer_states.size()) || lo > hi)
      throw std::invalid_argument("block_reps: partition outside layer range");
    std::vector<Tensor<T>> pooled;
    for (int l = lo; l <= hi; ++l)
      pooled.push_back(pool_layer(f.layer_states[static_cast<std::size_t>(l)]));
    out.push_back(pool_block(pooled));
  }
  return out;
}

struct AmalgamConfig {
  std::vector<int> teacher_dims;  // hidden width per teacher
  int d_student = 0;
  int d_a = 0;         // fusion width; 0 defaults to d_student
  int n_blocks = 0;    // == student layer count
  int n_heads = 2;
  int ffn_hidden = 0;  // 0 defaults to 2*d_a
  bool share_across_blocks = false;  // one enrichment map per teacher instead of per (teacher, block)
  double lambda = 0.65;
  double tau = 0.75;

  int width() const { return d_a > 0 ? d_a : d_student; }
  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * width(); }

  void validate() const {
    if (teacher_dims.empty()) throw std::invalid_argument("AmalgamConfig: no teachers");
    for (int d : teacher_dims)
      if (d < 1) throw std::invalid_argument("AmalgamConfig: bad teacher width");
    if (d_student < 1 || n_blocks < 1 || n_heads < 1)
      throw std::invalid_argument("AmalgamConfig: bad dimensions");
    if (width() % n_heads != 0)
      throw std::invalid_argument("AmalgamConfig: width not divisible by n_heads");
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("AmalgamConfig: lambda outside [0,1]");
    if (!(tau > 0.0)) throw std::invalid_argument("AmalgamConfig: tau must be positive");
  }

  nlohmann::json to_json() const {
    return {{"teacher_dims", teacher_dims}, {"d_student", d_student},
            {"d_a", d_a},                   {"n_blocks", n_blocks},
            {"n_heads", n_heads},           {"ffn_hidden", ffn_hidden},
            {"share_across_blocks", share_across_blocks},
            {"lambda", lambda},             {"tau", tau}};
  }

  static AmalgamConfig from_json(const nlohmann::json& j) {
    AmalgamConfig c;
    c.teacher_dims = j.at("teacher_dims").get<std::vector<int>>();
    c.d_student = j.at("d_student");
    c.d_a = j.at("d_a");
    c.n_blocks = j.at("n_blocks");
    c.n_heads = j.at("n_heads");
    c.ffn_hidden = j.at("ffn_hidden");
    c.share_across_blocks = j.at("share_across_blocks");
    c.lambda = j.at("lambda");
    c.tau = j.at("tau");
    c.validate();
    return c;
  }
};

template <typename T>
struct AmalgamNet {
  struct Enricher {
    Tensor<T> f_w, f_b;  // teacher width -> fusion width
    Tensor<T> g_w, g_b;  // scalar confidence -> fusion width
  };

  AmalgamConfig cfg;
  std::vector<std::vector<Enricher>> enrichers;  // [teacher][block] (or [teacher][0] when shared)
  Tensor<T> e_amalg;
  Tensor<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;  // fusion attention
  Tensor<T> ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;  // fusion FFN
  Tensor<T> lin_w, lin_b;  // linear fusion used by the no-attention ablation
  std::vector<Tensor<T>> p_w, p_b;  // per-block student projections

  static AmalgamNet init(const AmalgamConfig& cfg, Rng& rng) {
    cfg.validate();
    AmalgamNet n;
    n.cfg = cfg;
    const int da = cfg.width(), ff = cfg.ffn();
    auto ones = [](int k) {
      return Tensor<T>::from_data({k}, std::vector<T>(static_cast<std::size_t>(k), T(1)), true);
    };
    const int blocks_per_teacher = cfg.share_across_blocks ? 1 : cfg.n_blocks;
    for (int di : cfg.teacher_dims) {
      std::vector<Enricher> per_block;
      for (int b = 0; b < blocks_per_teacher; ++b) {
        Enricher e;
        e.f_w = Tensor<T>::randn({di, da}, rng, 0.06);
        e.f_b = Tensor<T>::zeros({da}, true);
        e.g_w = Tensor<T>::randn({da}, rng, 0.06);
        e.g_b = Tensor<T>::zeros({da}, true);
        per_block.push_back(std::move(e));
      }
      n.enrichers.push_back(std::move(per_block));
    }
    n.e_amalg = Tensor<T>::randn({da}, rng, 0.05);
    n.ln1_g = ones(da);
    n.ln1_b = Tensor<T>::zeros({da}, true);
    n.w_qkv = Tensor<T>::randn({da, 3 * da}, rng, 0.06);
    n.b_qkv = Tensor<T>::zeros({3 * da}, true);
    n.w_o = Tensor<T>::randn({da, da}, rng, 0.06);
    n.b_o = Tensor<T>::zeros({da}, true);
    n.ln2_g = ones(da);
    n.ln2_b = Tensor<T>::zeros({da}, true);
    n.w_ff1 = Tensor<T>::randn({da, ff}, rng, 0.06);
    n.b_ff1 = Tensor<T>::zeros({ff}, true);
    n.w_ff2 = Tensor<T>::randn({ff, da}, rng, 0.06);
    n.b_ff2 = Tensor<T>::zeros({da}, true);
    n.lin_w = Tensor<T>::randn({da, da}, rng, 0.06);
    n.lin_b = Tensor<T>::zeros({da}, true);
    for (int b = 0; b < cfg.n_blocks; ++b) {
      n.p_w.push_back(Tensor<T>::randn({cfg.d_student, da}, rng, 0.06));
      n.p_b.push_back(Tensor<T>::zeros({da}, true));
    }
    return n;
  }

  const Enricher& enricher(int teacher, int block) const {
    if (teacher < 0 || teacher >= static_cast<int>(enrichers.size()))
      throw std::invalid_argument("enricher: teacher index out of range");
    if (block < 0 || block >= cfg.n_blocks)
      throw std::invalid_argument("enricher: block index out of range");
    return enrichers[static_cast<std::size_t>(teacher)]
                    [cfg.share_across_blocks ? 0 : static_cast<std::size_t>(block)];
  }

  Tensor<T> linear_f(int teacher, int block, const Tensor<T>& h) const {
    const auto& e = enricher(teacher, block);
    return row(add(matmul(stack_rows<T>({h}), e.f_w), e.f_b), 0);
  }

  // z = f(h) + g(C): confidence enters through its own linear map
  Tensor<T> enrich(int teacher, int block, const Tensor<T>& h, double confidence) const {
    const auto& e = enricher(teacher, block);
    auto g_out = add(scale(e.g_w, confidence), e.g_b);
    return add(linear_f(teacher, block, h), g_out);
  }

  // ablation: z = C * f(h), confidence as a plain multiplier
  Tensor<T> enrich_mul(int teacher, int block, const Tensor<T>& h, double confidence) const {
    return scale(linear_f(teacher, block, h), confidence);
  }

  // One self-attention + FFN pass over [aggregation token, z_1 .. z_K]; the
  // output is the transformed first row. No positional information is added,
  // so the result is invariant to teacher order.
  Tensor<T> st_amalg(const std::vector<Tensor<T>>& z) const {
    if (z.empty()) throw std::invalid_argument("st_amalg: empty teacher list");
    const int da = cfg.width(), nh = cfg.n_heads, hd = da / nh;
    std::vector<Tensor<T>> seq = {e_amalg};
    for (const auto& zi : z) seq.push_back(zi);
    Tensor<T> x = stack_rows(seq);
    auto xn = layer_norm(x, ln1_g, ln1_b);
    auto qkv = add(matmul(xn, w_qkv), b_qkv);
    std::vector<Tensor<T>> heads;
    for (int h = 0; h < nh; ++h) {
      auto q = slice_cols(qkv, h * hd, hd);
      auto k = slice_cols(qkv, da + h * hd, hd);
      auto v = slice_cols(qkv, 2 * da + h * hd, hd);
      auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
      heads.push_back(matmul(softmax(scores), v));
    }
    x = add(x, add(matmul(concat_cols(heads), w_o), b_o));
    auto xn2 = layer_norm(x, ln2_g, ln2_b);
    x = add(x, add(matmul(gelu(add(matmul(xn2, w_ff1), b_ff1)), w_ff2), b_ff2));
    return row(x, 0);
  }

  // ablation: linear layer over the confidence-softmax-weighted sum of the
  // enriched teacher vectors
  Tensor<T> fuse_linear(const std::vector<Tensor<T>>& z,
                        const std::vector<double>& confidences) const {
    if (z.empty()) throw std::invalid_argument("fuse_linear: empty teacher list");
    if (z.size() != confidences.size())
      throw std::invalid_argument("fuse_linear: confidence count mismatch");
    double mx = confidences[0];
    for (double c : confidences) mx = std::max(mx, c);
    std::vector<double> w(confidences.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = std::exp(confidences[i] - mx);
      total += w[i];
    }
    Tensor<T> s = scale(z[0], w[0] / total);
    for (std::size_t i = 1; i < z.size(); ++i) s = add(s, scale(z[i], w[i] / total));
    return row(add(matmul(stack_rows<T>({s}), lin_w), lin_b), 0);
  }

  Tensor<T> project(int block, const Tensor<T>& student_rep) const {
    if (block < 0 || block >= cfg.n_blocks)
      throw std::invalid_argument("project: block index out of range");
    return row(add(matmul(stack_rows<T>({student_rep}), p_w[static_cast<std::size_t>(block)]),
                   p_b[static_cast<std::size_t>(block)]),
               0);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < enrichers.size(); ++i)
      for (std::size_t b = 0; b < enrichers[i].size(); ++b) {
        const std::string p = "t" + std::to_string(i) + ".b" + std::to_string(b) + ".";
        out.emplace_back(p + "f_w", enrichers[i][b].f_w);
        out.emplace_back(p + "f_b", enrichers[i][b].f_b);
        out.emplace_back(p + "g_w", enrichers[i][b].g_w);
        out.emplace_back(p + "g_b", enrichers[i][b].g_b);
      }
    out.emplace_back("e_amalg", e_amalg);
    out.emplace_back("ln1_g", ln1_g);
    out.emplace_back("ln1_b", ln1_b);
    out.emplace_back("w_qkv", w_qkv);
    out.emplace_back("b_qkv", b_qkv);
    out.emplace_back("w_o", w_o);
    out.emplace_back("b_o", b_o);
    out.emplace_back("ln2_g", ln2_g);
    out.emplace_back("ln2_b", ln2_b);
    out.emplace_back("w_ff1", w_ff1);
    out.emplace_back("b_ff1", b_ff1);
    out.emplace_back("w_ff2", w_ff2);
    out.emplace_back("b_ff2", b_ff2);
    out.emplace_back("lin_w", lin_w);
    out.emplace_back("lin_b", lin_b);
    for (std::size_t b = 0; b < p_w.size(); ++b) {
      out.emplace_back("p" + std::to_string(b) + "_w", p_w[b]);
      out.emplace_back("p" + std::to_string(b) + "_b", p_b[b]);
    }
    return out;
  }

  std::vector<Tensor<T>> params() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& t : params()) t.node()->requires_grad = trainable;
    for (auto& t : params())
      if (trainable && t.grad().size() != t.numel()) t.grad().assign(t.numel(), T(0));
  }
};

// ---- losses ----

// Mean over the batch of the summed per-block squared distances between the
// projected student representations and their amalgamated targets.
template <typename T>
Tensor<T> amal_loss(const std::vector<std::vector<Tensor<T>>>& student_proj,
                    const std::vector<std::vector<Tensor<T>>>& targets) {
  if (student_proj.empty() || student_proj.size() != targets.size())
    throw std::invalid_argument("amal_loss: batch size mismatch");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t n = 0; n < student_proj.size(); ++n) {
    if (student_proj[n].size() != targets[n].size() || student_proj[n].empty())
      throw std::invalid_argument("amal_loss: block count mismatch");
    for (std::size_t b = 0; b < student_proj[n].size(); ++b)
      total = add(total, squared_norm(sub(student_proj[n][b], targets[n][b])));
  }
  return scale(total, 1.0 / static_cast<double>(student_proj.size()));
}

// Softmax weights over the per-teacher confidence scores of one sample.
inline std::vector<double> teacher_weights(const std::vector<double>& confidences) {
  if (confidences.empty()) throw std::invalid_argument("teacher_weights: empty");
  double mx = confidences[0];
  for (double c : confidences) mx = std::max(mx, c);
  std::vector<double> w(confidences.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(confidences[i] - mx);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  double check = 0.0;
  for (double v : w) check += v;
  if (std::abs(check - 1.0) > 1e-6) throw std::runtime_error("teacher_weights: weights not normalized");
  return w;
}

// Softmax of a teacher's own-class logits at temperature tau, embedded into
// the union simplex with zero mass outside its label set.
inline std::vector<double> embed_union(const std::vector<double>& logits,
                                       const std::vector<int>& local_to_union, int n_union,
                                       double tau) {
  if (logits.size() != local_to_union.size())
    throw std::invalid_argument("embed_union: label map size mismatch");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / tau);
    z += p[i];
  }
  std::vector<double> out(static_cast<std::size_t>(n_union), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const int u = local_to_union[i];
    if (u < 0 || u >= n_union) throw std::invalid_argument("embed_union: union index out of range");
    out[static_cast<std::size_t>(u)] += p[i] / z;
  }
  return out;
}

// Confidence-weighted mixture of the teachers' tempered distributions for one
// sample, over the union label space.
inline std::vector<double> mixture_target(const std::vector<std::vector<double>>& teacher_logits,
                                          const std::vector<double>& confidences,
                                          const std::vector<std::vector<int>>& local_to_union,
                                          int n_union, double tau) {
  if (teacher_logits.size() != confidences.size() ||
      teacher_logits.size() != local_to_union.size() || teacher_logits.empty())
    throw std::invalid_argument("mixture_target: teacher count mismatch");
  const auto w = teacher_weights(confidences);
  std::vector<double> mix(static_cast<std::size_t>(n_union), 0.0);
  for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
    const auto p = embed_union(teacher_logits[i], local_to_union[i], n_union, tau);
    for (std::size_t u = 0; u < mix.size(); ++u) mix[u] += w[i] * p[u];
  }
  return mix;
}

// KL(mixture target || tempered student), scaled by tau^2 and averaged over
// the batch. Targets are constants; gradients flow only into the student.
template <typename T>
Tensor<T> out_loss(const std::vector<std::vector<double>>& mixture_rows,
                   const std::vector<Tensor<T>>& student_logits, double tau) {
  if (mixture_rows.empty() || mixture_rows.size() != student_logits.size())
    throw std::invalid_argument("out_loss: batch size mismatch");
  const int n_union = static_cast<int>(mixture_rows.front().size());
  std::vector<T> target_data;
  target_data.reserve(mixture_rows.size() * static_cast<std::size_t>(n_union));
  for (const auto& r : mixture_rows) {
    if (static_cast<int>(r.size()) != n_union)
      throw std::invalid_argument("out_loss: ragged mixture rows");
    for (double v : r) target_data.push_back(static_cast<T>(v));
  }
  auto target = Tensor<T>::from_data({static_cast<int>(mixture_rows.size()), n_union},
                                     std::move(target_data));
  auto student = softmax(stack_rows(student_logits), tau);
  return scale(kl_divergence(target, student), tau * tau);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& amal, const Tensor<T>& out, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("total_loss: lambda outside [0,1]");
  return add(scale(amal, lambda), scale(out, 1.0 - lambda));
}

// ---- checkpoint I/O (same manifest + raw array convention as the models) ----

template <typename T>
void save_amalgam(const AmalgamNet<T>& n, const std::string& dir, const std::string& name) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["name"] = name;
  manifest["config"] = n.cfg.to_json();
  manifest["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  nlohmann::json arrays = nlohmann::json::array();
  std::ofstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("save_amalgam: cannot open " + dir + "/" + name + ".bin");
  for (auto& [pname, t] : n.named_params()) {
    arrays.push_back({{"name", pname}, {"shape", t.shape()}});
    bin.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  manifest["arrays"] = arrays;
  std::ofstream mf(dir + "/" + name + ".json");
  if (!mf) throw std::runtime_error("save_amalgam: cannot open " + dir + "/" + name + ".json");
  mf << manifest.dump(2) << "\n";
}

template <typename T>
AmalgamNet<T> load_amalgam(const std::string& dir, const std::string& name) {
  std::ifstream mf(dir + "/" + name + ".json");
  if (!mf) throw std::runtime_error("load_amalgam: missing " + dir + "/" + name + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_amalgam: unsupported format version");
  const std::string want = sizeof(T) == 4 ? "f32" : "f64";
  if (manifest.at("dtype").get<std::string>() != want)
    throw std::runtime_error("load_amalgam: dtype mismatch");
  AmalgamConfig cfg = AmalgamConfig::from_json(manifest.at("config"));
  Rng rng(0);
  AmalgamNet<T> n = AmalgamNet<T>::init(cfg, rng);
  std::ifstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_amalgam: missing " + dir + "/" + name + ".bin");
  auto named = n.named_params();
  std::size_t idx = 0;
  for (const auto& rec : manifest.at("arrays")) {
    if (idx >= named.size() || rec.at("name") != named[idx].first)
      throw std::runtime_error("load_amalgam: manifest/parameter order mismatch");
    auto& t = named[idx].second;
    if (rec.at("shape").get<std::vector<int>>() != t.shape())
      throw std::runtime_error("load_amalgam: shape mismatch for " + named[idx].first);
    bin.read(reinterpret_cast<char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!bin) throw std::runtime_error("load_amalgam: truncated weight file");
    ++idx;
  }
  if (idx != named.size()) throw std::runtime_error("load_amalgam: missing arrays");
  return n;
}

}  // namespace stratanet
