#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stratanet/amalgam.hpp"
#include "stratanet/rng.hpp"
#include "testutil.hpp"

using namespace stratanet;

namespace {

AmalgamConfig small_cfg(std::vector<int> dims = {3, 5}) {
  AmalgamConfig cfg;
  cfg.teacher_dims = std::move(dims);
  cfg.d_student = 6;
  cfg.d_a = 4;
  cfg.n_blocks = 2;
  cfg.n_heads = 2;
  return cfg;
}

Tensor<double> vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor<double>::from_data({n}, std::move(v));
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("layer partitioning: even, remainder-first, singleton, errors") {
  using P = std::vector<std::pair<int, int>>;
  CHECK(partition(6, 3) == P{{0, 1}, {2, 3}, {4, 5}});
  CHECK(partition(8, 3) == P{{0, 2}, {3, 5}, {6, 7}});
  CHECK(partition(3, 3) == P{{0, 0}, {1, 1}, {2, 2}});
  CHECK(partition(5, 1) == P{{0, 4}});
  CHECK_THROWS(partition(2, 3));
  CHECK_THROWS(partition(4, 0));
}

TEST_CASE("enrichment: bias-only at zero weights, confidence path, hand oracle") {
  Rng rng(3);
  auto net = AmalgamNet<double>::init(small_cfg(), rng);

  // zero the f/g weights of one enricher: output must reduce to the two biases
  auto& e = net.enrichers[0][1];
  for (auto& v : e.f_w.data()) v = 0.0;
  for (auto& v : e.g_w.data()) v = 0.0;
  e.f_b.data() = {0.1, 0.2, 0.3, 0.4};
  e.g_b.data() = {1.0, 2.0, 3.0, 4.0};
  auto z = net.enrich(0, 1, vec({5.0, -2.0, 7.0}), 3.5);
  CHECK(max_abs_diff(z.data(), {1.1, 2.2, 3.3, 4.4}) < 1e-12);

  // C = 0: the confidence map contributes only its bias
  Rng rng2(5);
  auto net2 = AmalgamNet<double>::init(small_cfg(), rng2);
  auto h = vec({0.3, -1.2, 0.8});
  auto z0 = net2.enrich(0, 0, h, 0.0);
  auto fh = net2.linear_f(0, 0, h);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(z0.data()[j] == doctest::Approx(fh.data()[j] + net2.enrichers[0][0].g_b.data()[j]).epsilon(1e-12));

  // full hand arithmetic at d_i=3, d_a=4
  const auto& en = net2.enrichers[0][0];
  const double C = -1.7;
  auto zc = net2.enrich(0, 0, h, C);
  for (int j = 0; j < 4; ++j) {
    double want = en.f_b.data()[static_cast<std::size_t>(j)] +
                  C * en.g_w.data()[static_cast<std::size_t>(j)] +
                  en.g_b.data()[static_cast<std::size_t>(j)];
    for (int i = 0; i < 3; ++i)
      want += h.data()[static_cast<std::size_t>(i)] * en.f_w.data()[static_cast<std::size_t>(i) * 4 + j];
    CHECK(zc.data()[static_cast<std::size_t>(j)] == doctest::Approx(want).epsilon(1e-12));
  }

  // multiplicative ablation: z = C * f(h)
  auto zm = net2.enrich_mul(0, 0, h, 2.5);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(zm.data()[j] == doctest::Approx(2.5 * fh.data()[j]).epsilon(1e-12));
  auto zm0 = net2.enrich_mul(0, 0, h, 0.0);
  for (double v : zm0.data()) CHECK(v == 0.0);
}

TEST_CASE("fusion is invariant to teacher order and deterministic") {
  Rng rng(7);
  auto cfg = small_cfg({4, 4, 4});
  auto net = AmalgamNet<double>::init(cfg, rng);
  std::vector<Tensor<double>> z = {vec({1.0, -0.5, 0.2, 0.9}), vec({0.1, 2.0, -1.0, 0.4}),
                                   vec({-0.7, 0.3, 0.8, -0.2})};
  auto base = net.st_amalg(z).data();
  const std::vector<std::vector<int>> perms = {{1, 0, 2}, {2, 1, 0}, {1, 2, 0}, {2, 0, 1}};
  for (const auto& p : perms) {
    std::vector<Tensor<double>> zp;
    for (int i : p) zp.push_back(z[static_cast<std::size_t>(i)]);
    CHECK(max_abs_diff(net.st_amalg(zp).data(), base) < 1e-6);
  }

  // K=1: pure function of (token, z), recomputation identical
  auto a = net.st_amalg({z[0]}).data();
  auto b = net.st_amalg({z[0]}).data();
  CHECK(a == b);

  // K=2 with duplicated input equals its own swap
  auto dup1 = net.st_amalg({z[0], z[0]}).data();
  std::vector<Tensor<double>> swapped = {z[0], z[0]};
  CHECK(max_abs_diff(net.st_amalg(swapped).data(), dup1) < 1e-12);

  CHECK_THROWS(net.st_amalg({}));
}

TEST_CASE("linear-fusion ablation weights teachers by confidence softmax") {
  Rng rng(9);
  auto net = AmalgamNet<double>::init(small_cfg({4, 4}), rng);
  std::vector<Tensor<double>> z = {vec({1.0, 2.0, 3.0, 4.0}), vec({-1.0, 0.0, 1.0, 2.0})};

  // equal confidences: linear map of the plain average
  auto out = net.fuse_linear(z, {0.7, 0.7});
  auto avg = vec({0.0, 1.0, 2.0, 3.0});
  auto want = row(add(matmul(stack_rows<double>({avg}), net.lin_w), net.lin_b), 0);
  CHECK(max_abs_diff(out.data(), want.data()) < 1e-9);

  // saturated gap: first teacher dominates
  auto sat = net.fuse_linear(z, {30.0, -30.0});
  auto want1 = row(add(matmul(stack_rows<double>({z[0]}), net.lin_w), net.lin_b), 0);
  CHECK(max_abs_diff(sat.data(), want1.data()) < 1e-9);

  CHECK_THROWS(net.fuse_linear({}, {}));
  CHECK_THROWS(net.fuse_linear(z, {1.0}));
}

TEST_CASE("block-matching loss: zero, analytic, batch-mean oracle") {
  auto zero = amal_loss<double>({{vec({1.0, 2.0})}}, {{vec({1.0, 2.0})}});
  CHECK(zero.item() == doctest::Approx(0.0));

  auto one = amal_loss<double>({{vec({3.0, 4.0})}}, {{vec({0.0, 0.0})}});
  CHECK(one.item() == doctest::Approx(25.0).epsilon(1e-12));

  // two samples, two blocks, hand-computed mean
  std::vector<std::vector<Tensor<double>>> proj = {{vec({1.0, 0.0}), vec({0.0, 2.0})},
                                                   {vec({1.0, 1.0}), vec({2.0, 2.0})}};
  std::vector<std::vector<Tensor<double>>> targ = {{vec({0.0, 0.0}), vec({0.0, 0.0})},
                                                   {vec({1.0, 0.0}), vec({0.0, 2.0})}};
  // sample 0: 1 + 4; sample 1: 1 + 4 -> mean 5
  CHECK(amal_loss(proj, targ).item() == doctest::Approx(5.0).epsilon(1e-12));

  CHECK_THROWS(amal_loss<double>({{vec({1.0})}}, {{vec({1.0}), vec({2.0})}}));
  CHECK_THROWS(amal_loss<double>({}, {}));
}

TEST_CASE("mixture target: embedding, weighting, validity") {
  // embedding: zero mass outside the teacher's label set, normalized inside
  auto p = embed_union({2.0, 0.5}, {1, 3}, 5, 1.0);
  CHECK(p[0] == 0.0);
  CHECK(p[2] == 0.0);
  CHECK(p[4] == 0.0);
  CHECK(p[1] + p[3] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[1] > p[3]);

  // saturated confidences pick one teacher
  auto mix = mixture_target({{5.0, 1.0}, {0.0, 3.0}}, {10.0, -10.0}, {{0, 1}, {2, 3}}, 4, 1.0);
  auto solo = embed_union({5.0, 1.0}, {0, 1}, 4, 1.0);
  CHECK(max_abs_diff(mix, solo) < 1e-6);

  // equal weights, hand-computed union mixture
  auto even = mixture_target({{1.0, -1.0}, {0.5, 0.5}}, {0.0, 0.0}, {{0, 1}, {2, 3}}, 4, 1.0);
  const double e2 = std::exp(2.0);
  CHECK(even[0] == doctest::Approx(0.5 * e2 / (e2 + 1.0)).epsilon(1e-12));
  CHECK(even[1] == doctest::Approx(0.5 * 1.0 / (e2 + 1.0)).epsilon(1e-12));
  CHECK(even[2] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(even[3] == doctest::Approx(0.25).epsilon(1e-12));

  // validity: rows sum to 1; zero mass only where every teacher is absent
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    auto m = mixture_target({{rng.normal(), rng.normal()}, {rng.normal(), rng.normal()}},
                            {rng.normal(), rng.normal()}, {{0, 1}, {1, 2}}, 4, 0.75);
    double s = 0.0;
    for (double v : m) s += v;
    CHECK(std::abs(s - 1.0) < 1e-6);
    CHECK(m[0] > 0.0);
    CHECK(m[1] > 0.0);
    CHECK(m[2] > 0.0);
    CHECK(m[3] == 0.0);  // no teacher owns class 3
  }
}

TEST_CASE("soft-target loss: zero at match, hand oracle, temperature scaling") {
  const double tau = 0.75;
  // one teacher covering the whole union, student logits identical
  std::vector<double> logits = {1.2, -0.3, 0.8};
  auto target = mixture_target({logits}, {0.0}, {{0, 1, 2}}, 3, tau);
  auto student = Tensor<double>::from_data({3}, logits);
  CHECK(out_loss<double>({target}, {student}, tau).item() == doctest::Approx(0.0).epsilon(1e-9));

  // hand-computed KL for a mismatched student, including the tau^2 factor
  std::vector<double> s_logits = {0.2, 0.9, -0.5};
  double zs = 0.0;
  std::vector<double> q(3);
  for (int j = 0; j < 3; ++j) zs += std::exp(s_logits[static_cast<std::size_t>(j)] / tau);
  for (int j = 0; j < 3; ++j) q[static_cast<std::size_t>(j)] = std::exp(s_logits[static_cast<std::size_t>(j)] / tau) / zs;
  double kl = 0.0;
  for (int j = 0; j < 3; ++j)
    kl += target[static_cast<std::size_t>(j)] * std::log(target[static_cast<std::size_t>(j)] / q[static_cast<std::size_t>(j)]);
  auto got = out_loss<double>({target}, {Tensor<double>::from_data({3}, s_logits)}, tau);
  CHECK(got.item() == doctest::Approx(kl * tau * tau).epsilon(1e-9));
  CHECK(got.item() >= 0.0);

  CHECK_THROWS(out_loss<double>({}, {}, tau));
  CHECK_THROWS(out_loss<double>({target, target}, {student}, tau));
}

TEST_CASE("combined loss is the exact convex combination") {
  auto a = Tensor<double>::scalar(2.0);
  auto b = Tensor<double>::scalar(4.0);
  CHECK(total_loss(a, b, 0.0).item() == doctest::Approx(4.0));
  CHECK(total_loss(a, b, 1.0).item() == doctest::Approx(2.0));
  CHECK(total_loss(a, b, 0.65).item() == doctest::Approx(2.7).epsilon(1e-12));
  CHECK_THROWS(total_loss(a, b, -0.1));
  CHECK_THROWS(total_loss(a, b, 1.1));
}

TEST_CASE("gradients flow through every trainable piece; constants get none") {
  Rng rng(13);
  auto cfg = small_cfg({3, 5});
  auto net = AmalgamNet<double>::init(cfg, rng);
  net.set_trainable(true);

  // frozen teacher block representations
  auto h00 = vec({0.4, -0.2, 0.9});
  auto h10 = vec({1.0, 0.3, -0.6, 0.2, 0.5});
  auto h01 = vec({-0.3, 0.7, 0.1});
  auto h11 = vec({0.2, -0.9, 0.4, 0.6, -0.1});
  // trainable student-side inputs
  auto s0 = Tensor<double>::randn({cfg.d_student}, rng, 0.5);
  auto s1 = Tensor<double>::randn({cfg.d_student}, rng, 0.5);
  auto s_logits = Tensor<double>::randn({3}, rng, 0.5);
  auto target = mixture_target({{1.0, -0.5}, {0.3, 0.8}}, {0.2, -0.4}, {{0, 1}, {1, 2}}, 3, 0.75);

  auto make_loss = [&]() {
    auto z0 = net.st_amalg({net.enrich(0, 0, h00, 0.3), net.enrich(1, 0, h10, -0.7)});
    auto z1 = net.st_amalg({net.enrich(0, 1, h01, 1.1), net.enrich(1, 1, h11, 0.2)});
    auto amal = amal_loss<double>({{net.project(0, s0), net.project(1, s1)}}, {{z0, z1}});
    auto out = out_loss<double>({target}, {s_logits}, 0.75);
    return total_loss(amal, out, 0.65);
  };

  auto params = net.params();
  params.push_back(s0);
  params.push_back(s1);
  params.push_back(s_logits);
  auto res = testutil::grad_check(params, make_loss, 1e-4, 6);
  CAPTURE(res.worst);
  CHECK(res.max_rel_err < 1e-4);

  // the frozen teacher inputs never accumulate gradient
  auto loss = make_loss();
  loss.backward();
  CHECK(h00.grad().empty());
  CHECK(h11.grad().empty());
}

TEST_CASE("shared-enricher mode reuses one map per teacher") {
  Rng rng(17);
  auto cfg = small_cfg();
  cfg.share_across_blocks = true;
  auto net = AmalgamNet<double>::init(cfg, rng);
  auto h = vec({0.1, 0.2, 0.3});
  CHECK(net.enrich(0, 0, h, 0.5).data() == net.enrich(0, 1, h, 0.5).data());
  CHECK(net.enrichers[0].size() == 1);

  auto plain = AmalgamNet<double>::init(small_cfg(), rng);
  CHECK(plain.enrichers[0].size() == 2);
}

TEST_CASE("fusion head round-trips through the checkpoint format") {
  Rng rng(19);
  auto net = AmalgamNet<double>::init(small_cfg(), rng);
  save_amalgam(net, "/tmp", "amalgam_rt_test");
  auto back = load_amalgam<double>("/tmp", "amalgam_rt_test");
  auto a = net.named_params();
  auto b = back.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data() == b[i].second.data());  // bit-exact
  }
  CHECK_THROWS(load_amalgam<float>("/tmp", "amalgam_rt_test"));  // dtype mismatch
  CHECK_THROWS(load_amalgam<double>("/tmp", "amalgam_rt_missing"));
}

TEST_CASE("config validation") {
  auto cfg = small_cfg();
  cfg.validate();
  cfg.lambda = 1.2;
  CHECK_THROWS(cfg.validate());
  cfg = small_cfg();
  cfg.tau = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = small_cfg();
  cfg.d_a = 5;  // not divisible by n_heads=2
  CHECK_THROWS(cfg.validate());
  cfg = small_cfg();
  cfg.teacher_dims.clear();
  CHECK_THROWS(cfg.validate());
}
