#pragma once

// Minimal pre-norm transformer used three ways: encoder classifier (teachers,
// student), causal LM (generator base), and the per-layer hidden-state source
// for OOD scoring and block-wise amalgamation. Classification reads a linear
// head over the mean-pooled, final-norm token states.

#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stratanet/rng.hpp"
#include "stratanet/tensor.hpp"

namespace stratanet {

enum class ModelKind { classifier, causal_lm };

struct ModelSpec {
  int vocab_size = 0;
  int max_len = 0;
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int n_classes = 0;  // 0 for causal_lm
  int ffn_hidden = 0; // defaults to 2*d_model
  ModelKind kind = ModelKind::classifier;

  void validate() const {
    if (vocab_size < 2 || max_len < 1 || n_layers < 1 || d_model < 1 || n_heads < 1)
      throw std::invalid_argument("ModelSpec: bad dimensions");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("ModelSpec: d_model not divisible by n_heads");
    if (kind == ModelKind::classifier && n_classes < 2)
      throw std::invalid_argument("ModelSpec: classifier needs n_classes >= 2");
  }

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d_model; }
  int head_dim() const { return kind == ModelKind::classifier ? n_classes : vocab_size; }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"max_len", max_len},   {"n_layers", n_layers},
            {"d_model", d_model},       {"n_heads", n_heads},   {"n_classes", n_classes},
            {"ffn_hidden", ffn_hidden},
            {"kind", kind == ModelKind::classifier ? "classifier" : "causal_lm"}};
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.vocab_size = j.at("vocab_size");
    s.max_len = j.at("max_len");
    s.n_layers = j.at("n_layers");
    s.d_model = j.at("d_model");
    s.n_heads = j.at("n_heads");
    s.n_classes = j.at("n_classes");
    s.ffn_hidden = j.at("ffn_hidden");
    s.kind = j.at("kind") == "classifier" ? ModelKind::classifier : ModelKind::causal_lm;
    s.validate();
    return s;
  }
};

template <typename T>
struct Transformer {
  struct Layer {
    Tensor<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    Tensor<T> ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
  };

  ModelSpec spec;
  Tensor<T> tok_emb, pos_emb;
  std::vector<Layer> layers;
  Tensor<T> lnf_g, lnf_b, w_head, b_head;

  static Transformer init(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    Transformer m;
    m.spec = spec;
    const int d = spec.d_model, f = spec.ffn(), h = spec.head_dim();
    auto ones = [](int n) {
      return Tensor<T>::from_data({n}, std::vector<T>(static_cast<std::size_t>(n), T(1)), true);
    };
    m.tok_emb = Tensor<T>::randn({spec.vocab_size, d}, rng, 0.05);
    m.pos_emb = Tensor<T>::randn({spec.max_len, d}, rng, 0.05);
    for (int l = 0; l < spec.n_layers; ++l) {
      Layer lay;
      lay.ln1_g = ones(d);
      lay.ln1_b = Tensor<T>::zeros({d}, true);
      lay.w_qkv = Tensor<T>::randn({d, 3 * d}, rng, 0.06);
      lay.b_qkv = Tensor<T>::zeros({3 * d}, true);
      lay.w_o = Tensor<T>::randn({d, d}, rng, 0.06);
      lay.b_o = Tensor<T>::zeros({d}, true);
      lay.ln2_g = ones(d);
      lay.ln2_b = Tensor<T>::zeros({d}, true);
      lay.w_ff1 = Tensor<T>::randn({d, f}, rng, 0.06);
      lay.b_ff1 = Tensor<T>::zeros({f}, true);
      lay.w_ff2 = Tensor<T>::randn({f, d}, rng, 0.06);
      lay.b_ff2 = Tensor<T>::zeros({d}, true);
      m.layers.push_back(std::move(lay));
    }
    m.lnf_g = ones(d);
    m.lnf_b = Tensor<T>::zeros({d}, true);
    m.w_head = Tensor<T>::randn({d, h}, rng, 0.02);
    m.b_head = Tensor<T>::zeros({h}, true);
    return m;
  }

  struct Forward {
    std::vector<Tensor<T>> layer_states;  // n_layers entries, each [S, d_model]
    Tensor<T> logits;                     // classifier: [n_classes]; lm: [S, vocab]
  };

  // Shared encoder trunk; classifier attends bidirectionally, LM causally.
  Forward forward(const std::vector<int>& tokens) const {
    const int s = static_cast<int>(tokens.size());
    if (s < 1) throw std::invalid_argument("forward: empty sequence");
    if (s > spec.max_len) throw std::invalid_argument("forward: sequence longer than max_len");
    for (int id : tokens)
      if (id < 0 || id >= spec.vocab_size) throw std::invalid_argument("forward: token id out of range");
    const bool causal = spec.kind == ModelKind::causal_lm;
    const int d = spec.d_model, nh = spec.n_heads, hd = d / nh;

    std::vector<int> pos(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) pos[static_cast<std::size_t>(i)] = i;
    Tensor<T> x = add(embedding(tok_emb, tokens), embedding(pos_emb, pos));

    Forward out;
    for (const Layer& lay : layers) {
      auto xn = layer_norm(x, lay.ln1_g, lay.ln1_b);
      auto qkv = add(matmul(xn, lay.w_qkv), lay.b_qkv);
      std::vector<Tensor<T>> heads;
      for (int h = 0; h < nh; ++h) {
        auto q = slice_cols(qkv, h * hd, hd);
        auto k = slice_cols(qkv, d + h * hd, hd);
        auto v = slice_cols(qkv, 2 * d + h * hd, hd);
        auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
        auto attn = softmax(scores, 1.0, causal);
        heads.push_back(matmul(attn, v));
      }
      auto att_out = add(matmul(concat_cols(heads), lay.w_o), lay.b_o);
      x = add(x, att_out);
      auto xn2 = layer_norm(x, lay.ln2_g, lay.ln2_b);
      auto ff = add(matmul(gelu(add(matmul(xn2, lay.w_ff1), lay.b_ff1)), lay.w_ff2), lay.b_ff2);
      x = add(x, ff);
      out.layer_states.push_back(x);
    }
    auto xf = layer_norm(x, lnf_g, lnf_b);
    if (spec.kind == ModelKind::classifier) {
      auto pooled = stack_rows<T>({mean_rows(xf)});
      out.logits = row(add(matmul(pooled, w_head), b_head), 0);
    } else {
      out.logits = add(matmul(xf, w_head), b_head);
    }
    return out;
  }

  // Next-token logits after the last position.
  Tensor<T> lm_next_logits(const std::vector<int>& tokens) const {
    if (spec.kind != ModelKind::causal_lm) throw std::invalid_argument("lm_next_logits: not a causal LM");
    auto f = forward(tokens);
    return row(f.logits, static_cast<int>(tokens.size()) - 1);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lay = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1_g", lay.ln1_g);
      out.emplace_back(p + "ln1_b", lay.ln1_b);
      out.emplace_back(p + "w_qkv", lay.w_qkv);
      out.emplace_back(p + "b_qkv", lay.b_qkv);
      out.emplace_back(p + "w_o", lay.w_o);
      out.emplace_back(p + "b_o", lay.b_o);
      out.emplace_back(p + "ln2_g", lay.ln2_g);
      out.emplace_back(p + "ln2_b", lay.ln2_b);
      out.emplace_back(p + "w_ff1", lay.w_ff1);
      out.emplace_back(p + "b_ff1", lay.b_ff1);
      out.emplace_back(p + "w_ff2", lay.w_ff2);
      out.emplace_back(p + "b_ff2", lay.b_ff2);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    out.emplace_back("w_head", w_head);
    out.emplace_back("b_head", b_head);
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

// ---- pooling ----

// Mean over token positions of one layer's states: [S, d] -> [d].
template <typename T>
Tensor<T> pool_layer(const Tensor<T>& states) {
  return mean_rows(states);
}

// Elementwise mean of pooled layer vectors within a block.
template <typename T>
Tensor<T> pool_block(const std::vector<Tensor<T>>& layer_reps) {
  if (layer_reps.empty()) throw std::invalid_argument("pool_block: empty block");
  return mean_rows(stack_rows(layer_reps));
}

// ---- checkpoint I/O: manifest json + raw little-endian arrays ----

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_model(const Transformer<T>& m, const std::string& dir, const std::string& name) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["name"] = name;
  manifest["spec"] = m.spec.to_json();
  manifest["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  nlohmann::json arrays = nlohmann::json::array();
  std::ofstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("save_model: cannot open " + dir + "/" + name + ".bin");
  for (auto& [pname, t] : m.named_params()) {
    arrays.push_back({{"name", pname}, {"shape", t.shape()}});
    bin.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  manifest["arrays"] = arrays;
  std::ofstream mf(dir + "/" + name + ".json");
  if (!mf) throw std::runtime_error("save_model: cannot open " + dir + "/" + name + ".json");
  mf << manifest.dump(2) << "\n";
}

template <typename T>
Transformer<T> load_model(const std::string& dir, const std::string& name) {
  std::ifstream mf(dir + "/" + name + ".json");
  if (!mf) throw std::runtime_error("load_model: missing " + dir + "/" + name + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_model: unsupported format version");
  const std::string want = sizeof(T) == 4 ? "f32" : "f64";
  if (manifest.at("dtype").get<std::string>() != want)
    throw std::runtime_error("load_model: dtype mismatch");
  ModelSpec spec = ModelSpec::from_json(manifest.at("spec"));
  Rng rng(0);
  Transformer<T> m = Transformer<T>::init(spec, rng);
  std::ifstream bin(dir + "/" + name + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_model: missing " + dir + "/" + name + ".bin");
  auto named = m.named_params();
  std::size_t idx = 0;
  for (const auto& rec : manifest.at("arrays")) {
    if (idx >= named.size() || rec.at("name") != named[idx].first)
      throw std::runtime_error("load_model: manifest/parameter order mismatch");
    auto& t = named[idx].second;
    if (rec.at("shape").get<std::vector<int>>() != t.shape())
      throw std::runtime_error("load_model: shape mismatch for " + named[idx].first);
    bin.read(reinterpret_cast<char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!bin) throw std::runtime_error("load_model: truncated weight file");
    ++idx;
  }
  if (idx != named.size()) throw std::runtime_error("load_model: missing arrays");
  return m;
}

using Transformerf = Transformer<float>;
using Transformerd = Transformer<double>;

}  // namespace stratanet
