#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <vector>

#include "stratanet/model.hpp"
#include "stratanet/training.hpp"
#include "testutil.hpp"

using namespace stratanet;

namespace {

ModelSpec tiny_classifier_spec(int n_classes = 2) {
  ModelSpec s;
  s.vocab_size = 24;
  s.max_len = 16;
  s.n_layers = 2;
  s.d_model = 16;
  s.n_heads = 2;
  s.n_classes = n_classes;
  s.kind = ModelKind::classifier;
  return s;
}

ModelSpec tiny_lm_spec(int vocab = 8) {
  ModelSpec s;
  s.vocab_size = vocab;
  s.max_len = 16;
  s.n_layers = 2;
  s.d_model = 16;
  s.n_heads = 2;
  s.kind = ModelKind::causal_lm;
  return s;
}

}  // namespace

TEST_CASE("classifier near-uniform at init, averaged over seeds") {
  double acc = 0.0;
  const int n_seeds = 100;
  for (int seed = 0; seed < n_seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 1);
    auto m = Transformer<double>::init(tiny_classifier_spec(), rng);
    std::vector<int> tokens = {1, 5, 9, 13};
    NoGradGuard ng;
    auto probs = softmax(m.forward(tokens).logits);
    acc += probs.data()[0];
  }
  const double mean_p0 = acc / n_seeds;
  CHECK(mean_p0 > 0.3);
  CHECK(mean_p0 < 0.7);
}

TEST_CASE("classifier forward deterministic, layer states well-formed") {
  Rng rng(3);
  auto m = Transformer<double>::init(tiny_classifier_spec(), rng);
  std::vector<int> tokens = {2, 4, 6};
  NoGradGuard ng;
  auto a = m.forward(tokens);
  auto b = m.forward(tokens);
  CHECK(a.logits.data() == b.logits.data());
  CHECK(a.layer_states.size() == 2);
  for (auto& st : a.layer_states) {
    CHECK(st.shape() == std::vector<int>{3, 16});
    CHECK(st.all_finite());
  }
  CHECK(a.logits.all_finite());
}

TEST_CASE("sequence length boundaries and id range") {
  Rng rng(3);
  auto m = Transformer<double>::init(tiny_classifier_spec(), rng);
  NoGradGuard ng;
  std::vector<int> at_max(16, 1);
  CHECK_NOTHROW(m.forward(at_max));
  std::vector<int> over_max(17, 1);
  CHECK_THROWS(m.forward(over_max));
  CHECK_THROWS(m.forward({}));
  CHECK_THROWS(m.forward({0, 24}));
}

TEST_CASE("causal LM: future tokens never change past logits") {
  Rng rng(17);
  auto m = Transformer<double>::init(tiny_lm_spec(), rng);
  NoGradGuard ng;
  std::vector<int> tokens = {0, 1, 2, 3, 4, 5};
  auto f1 = m.forward(tokens);
  std::vector<int> perturbed = {0, 1, 2, 7, 7, 7};
  auto f2 = m.forward(perturbed);
  // positions 0..2 share prefixes
  for (int t = 0; t < 3; ++t)
    for (int v = 0; v < 8; ++v)
      CHECK(f1.logits.data()[static_cast<std::size_t>(t * 8 + v)] ==
            doctest::Approx(f2.logits.data()[static_cast<std::size_t>(t * 8 + v)]).epsilon(1e-12));
  // identical prefixes give identical next-token logits
  auto n1 = m.lm_next_logits({0, 1, 2});
  auto n2 = m.lm_next_logits({0, 1, 2});
  CHECK(n1.data() == n2.data());
  CHECK(static_cast<int>(n1.numel()) == 8);
}

TEST_CASE("pool_layer: identity, symmetry, column-mean oracle") {
  auto single = Tensord::from_data({1, 4}, {1.0, -2.0, 3.0, 4.0});
  auto p = pool_layer(single);
  CHECK(p.data() == std::vector<double>{1.0, -2.0, 3.0, 4.0});

  auto sym = Tensord::from_data({2, 3}, {1.0, -2.0, 5.0, -1.0, 2.0, -5.0});
  auto z = pool_layer(sym);
  for (double v : z.data()) CHECK(v == doctest::Approx(0.0));

  Rng rng(5);
  std::vector<double> m(5 * 8);
  for (auto& v : m) v = rng.uniform(-2, 2);
  auto pooled = pool_layer(Tensord::from_data({5, 8}, m));
  for (int j = 0; j < 8; ++j) {
    double s = 0;
    for (int i = 0; i < 5; ++i) s += m[static_cast<std::size_t>(i * 8 + j)];
    CHECK(pooled.data()[static_cast<std::size_t>(j)] == doctest::Approx(s / 5.0).epsilon(1e-12));
  }
}

TEST_CASE("pool_block mirrors pool_layer semantics") {
  auto v = Tensord::from_data({3}, {1.0, 2.0, 3.0});
  auto one = pool_block<double>({v});
  CHECK(one.data() == v.data());

  auto neg = Tensord::from_data({3}, {-1.0, -2.0, -3.0});
  auto zero = pool_block<double>({v, neg});
  for (double x : zero.data()) CHECK(x == doctest::Approx(0.0));

  auto w = Tensord::from_data({3}, {4.0, 0.0, 2.0});
  auto mean = pool_block<double>({v, w});
  CHECK(mean.data()[0] == doctest::Approx(2.5));
  CHECK(mean.data()[1] == doctest::Approx(1.0));
  CHECK(mean.data()[2] == doctest::Approx(2.5));

  // block of identical layers pools to that layer's vector
  auto same = pool_block<double>({v, v, v});
  for (int i = 0; i < 3; ++i) CHECK(same.data()[static_cast<std::size_t>(i)] == doctest::Approx(v.data()[static_cast<std::size_t>(i)]));

  CHECK_THROWS(pool_block<double>({}));
}

TEST_CASE("toy LM learns a deterministic 2-symbol grammar") {
  // alternating grammar: 0 (start) -> 1 -> 2 -> 1 -> 2 ...
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < 64; ++i) {
    std::vector<int> seq = {0};
    int len = 8 + (i % 6);
    for (int t = 0; t < len; ++t) seq.push_back(t % 2 == 0 ? 1 : 2);
    corpus.push_back(seq);
  }
  Rng rng(21);
  auto lm = Transformer<double>::init(tiny_lm_spec(4), rng);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  Rng trng(22);
  train_lm(lm, corpus, cfg, trng);

  NoGradGuard ng;
  int correct = 0, total = 0;
  std::vector<int> prefix = {0};
  for (int t = 0; t < 12; ++t) {
    int expect = t % 2 == 0 ? 1 : 2;
    auto logits = lm.lm_next_logits(prefix);
    int amax = 0;
    for (int v = 1; v < 4; ++v)
      if (logits.data()[static_cast<std::size_t>(v)] > logits.data()[static_cast<std::size_t>(amax)]) amax = v;
    if (amax == expect) ++correct;
    ++total;
    prefix.push_back(expect);
  }
  CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("teacher reaches 90% on a separable toy task") {
  // class 0 draws tokens from 1..8, class 1 from 12..19
  auto make_split = [](int n, std::uint64_t seed) {
    std::vector<LabeledSeq> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
      LabeledSeq ex;
      ex.label = i % 2;
      int len = 6 + rng.uniform_int(5);
      for (int t = 0; t < len; ++t)
        ex.tokens.push_back(ex.label == 0 ? 1 + rng.uniform_int(8) : 12 + rng.uniform_int(8));
      out.push_back(ex);
    }
    return out;
  };
  auto train = make_split(120, 31);
  auto test = make_split(60, 32);

  Rng rng(33);
  auto m = Transformer<double>::init(tiny_classifier_spec(), rng);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  cfg.lr = 1e-3;
  cfg.early_stop_acc = 0.98;
  Rng trng(34);
  train_classifier(m, train, test, cfg, trng);
  CHECK(classifier_accuracy(m, test) >= 0.90);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Rng rng(77);
  auto m = Transformer<float>::init(tiny_classifier_spec(3), rng);
  auto dir = std::filesystem::temp_directory_path() / "stratanet_ckpt_test";
  std::filesystem::create_directories(dir);
  save_model(m, dir.string(), "model");
  auto loaded = load_model<float>(dir.string(), "model");
  auto a = m.named_params();
  auto b = loaded.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data() == b[i].second.data());  // bitwise
  }
  CHECK_THROWS(load_model<double>(dir.string(), "model"));  // dtype mismatch
  std::filesystem::remove_all(dir);
}

TEST_CASE("full model gradient check (float64)") {
  ModelSpec spec;
  spec.vocab_size = 10;
  spec.max_len = 8;
  spec.n_layers = 1;
  spec.d_model = 8;
  spec.n_heads = 2;
  spec.n_classes = 3;
  spec.kind = ModelKind::classifier;
  Rng rng(55);
  auto m = Transformer<double>::init(spec, rng);
  std::vector<int> tokens = {1, 4, 7, 2};

  auto make_loss = [&] {
    auto f = m.forward(tokens);
    return cross_entropy_logits(stack_rows<double>({f.logits}), {2});
  };
  auto res = testutil::grad_check(m.params(), make_loss, 1e-4, 20);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("lm gradient check (float64)") {
  ModelSpec spec = tiny_lm_spec(6);
  spec.n_layers = 1;
  spec.d_model = 8;
  spec.n_heads = 2;
  Rng rng(56);
  auto m = Transformer<double>::init(spec, rng);
  std::vector<int> inputs = {0, 2, 4};
  std::vector<int> targets = {2, 4, 1};
  auto make_loss = [&] { return cross_entropy_logits(m.forward(inputs).logits, targets); };
  auto res = testutil::grad_check(m.params(), make_loss, 1e-4, 20);
  CHECK(res.max_rel_err < 1e-4);
}
