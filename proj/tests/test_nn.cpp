#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "smdk/model.hpp"
#include "testutil.hpp"

using namespace smdk;
using namespace smdk::testutil;

namespace {

ModelConfig tiny_cfg(Method method) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_experts = 4;
  cfg.vocab = 11;
  cfg.seq_len = 6;
  cfg.method = method;
  return cfg;
}

AttentionParams averaging_attention(int d) {
  AttentionParams p;
  p.wq = Tensor::zeros({d, d});
  p.wk = Tensor::zeros({d, d});
  std::vector<double> eye(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = 1.0;
  p.wv = Tensor::from({d, d}, eye);
  p.wo = Tensor::from({d, d}, eye);
  p.bq = Tensor::zeros({d});
  p.bk = Tensor::zeros({d});
  p.bv = Tensor::zeros({d});
  p.bo = Tensor::zeros({d});
  return p;
}

}  // namespace

TEST_CASE("attention with zero scores averages the causal prefix") {
  const int d = 4;
  AttentionParams p = averaging_attention(d);
  Tensor x = Tensor::from({2, d}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor y = causal_attention(x, p, 2);
  // Row 0 sees only itself; row 1 averages rows 0 and 1.
  for (int c = 0; c < d; ++c) {
    CHECK(y.at(0, c) == doctest::Approx(x.at(0, c)).epsilon(1e-12));
    CHECK(y.at(1, c) ==
          doctest::Approx(0.5 * (x.at(0, c) + x.at(1, c))).epsilon(1e-12));
  }
}

TEST_CASE("causal attention ignores future tokens") {
  RngStream rng(3, "attn-init");
  AttentionParams p = AttentionParams::init(12, rng);
  RngStream xs(4, "x");
  Tensor x1 = Tensor::randn({5, 12}, xs, 1.0);

  auto vals = x1.values();
  vals[4 * 12 + 3] += 10.0;  // perturb the last position only
  Tensor x2 = Tensor::from({5, 12}, vals);

  Tensor y1 = causal_attention(x1, p, 3);
  Tensor y2 = causal_attention(x2, p, 3);
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < 12; ++c)
      CHECK(y1.at(t, c) == doctest::Approx(y2.at(t, c)).epsilon(1e-12));
  double last_diff = 0;
  for (int c = 0; c < 12; ++c)
    last_diff += std::abs(y1.at(4, c) - y2.at(4, c));
  CHECK(last_diff > 1e-6);
}

TEST_CASE("model-level causality") {
  Model m = Model::init(tiny_cfg(Method::kSmoeDropout), 5);
  std::vector<int> t1 = {1, 2, 3, 4, 5, 6};
  std::vector<int> t2 = {1, 2, 3, 4, 5, 9};
  ForwardCtx c1, c2;
  c1.training = c2.training = false;
  Tensor y1 = m.forward(t1, c1);
  Tensor y2 = m.forward(t2, c2);
  for (int t = 0; t < 5; ++t)
    for (int v = 0; v < m.cfg.vocab; ++v)
      CHECK(y1.at(t, v) == doctest::Approx(y2.at(t, v)).epsilon(1e-12));
}

TEST_CASE("core trainable parameter count matches across all methods") {
  const Method methods[] = {Method::kDenseDropout, Method::kConcrete,
                            Method::kDropBlock,    Method::kSmoeLearned,
                            Method::kThor,         Method::kSmoeDropout};
  int64_t expected = -1;
  for (Method method : methods) {
    Model m = Model::init(tiny_cfg(method), 7);
    if (expected < 0) expected = m.trainable_param_count();
    CHECK(m.trainable_param_count() == expected);
  }

  // Identical seed means identical core weights, modulized or not.
  Model dense = Model::init(tiny_cfg(Method::kDenseDropout), 7);
  Model moe = Model::init(tiny_cfg(Method::kSmoeDropout), 7);
  CHECK(dense.tok_emb.checksum() == moe.tok_emb.checksum());
  CHECK(dense.layers[0].attn.wq.checksum() == moe.layers[0].attn.wq.checksum());
  CHECK(dense.layers[0].mlp.w1.at(0, 5) == moe.layers[0].experts.experts[0].w1.at(0, 5));
}

TEST_CASE("router and concrete parameters are accounted separately") {
  Model moe = Model::init(tiny_cfg(Method::kSmoeDropout), 7);
  ModelConfig cfg = tiny_cfg(Method::kSmoeDropout);
  CHECK(moe.router_param_count() ==
        int64_t(cfg.n_layers) * cfg.d_model * cfg.n_experts);
  CHECK(moe.aux_param_count() == 0);

  Model con = Model::init(tiny_cfg(Method::kConcrete), 7);
  CHECK(con.router_param_count() == 0);
  CHECK(con.aux_param_count() == cfg.n_layers);  // one p_logit per layer

  Model dense = Model::init(tiny_cfg(Method::kDenseDropout), 7);
  CHECK(dense.router_param_count() == 0);
}

TEST_CASE("moe layer mask controls which layers hold experts") {
  ModelConfig cfg = tiny_cfg(Method::kSmoeDropout);
  cfg.moe_layer_mask = {0, 1};
  Model m = Model::init(cfg, 9);
  CHECK_FALSE(m.layers[0].is_moe);
  CHECK(m.layers[1].is_moe);
  CHECK(m.layers[0].mlp.w1.defined());
  CHECK_FALSE(m.frozen_routers[0].g.defined());
  CHECK(m.frozen_routers[1].g.defined());
}

TEST_CASE("named tensors are unique, ordered, and cover the router") {
  Model m = Model::init(tiny_cfg(Method::kSmoeDropout), 13);
  auto named = m.named_tensors();
  std::set<std::string> names;
  for (auto& [name, t] : named) {
    CHECK(t.defined());
    CHECK(names.insert(name).second);
  }
  CHECK(names.count("tok_emb") == 1);
  CHECK(names.count("layer.0.router.g") == 1);
  CHECK(names.count("layer.1.expert.3.w2") == 1);
  CHECK(names.count("layer.0.expert.b2") == 1);
  CHECK(names.count("w_out") == 1);
}

TEST_CASE("end-to-end gradients through a 2-layer moe model") {
  ModelConfig cfg = tiny_cfg(Method::kSmoeDropout);
  Model m = Model::init(cfg, 17);
  std::vector<int> tokens = rand_tokens(cfg.seq_len, cfg.vocab, 18);
  std::vector<int> targets = rand_tokens(cfg.seq_len, cfg.vocab, 19);

  auto f = [&] {
    ForwardCtx ctx;
    ctx.training = false;  // full k so selection cannot flip under perturbation
    return cross_entropy(m.forward(tokens, ctx), targets);
  };
  CHECK(gradcheck(f, m.trainable_tensors(), 1e-5) < 1e-3);
}

TEST_CASE("method name round trip") {
  for (const char* name : {"dense_dropout", "concrete", "dropblock",
                           "smoe_learned", "thor", "smoe_dropout"})
    CHECK(method_to_string(method_from_string(name)) == name);
  CHECK_THROWS_AS(method_from_string("bogus"), ValueError);
}

TEST_CASE("model config validation") {
  ModelConfig bad = tiny_cfg(Method::kSmoeDropout);
  bad.d_ff = 30;  // not divisible by n_experts
  CHECK_THROWS_AS(bad.validate(), ValueError);
  ModelConfig heads = tiny_cfg(Method::kSmoeDropout);
  heads.n_heads = 3;
  CHECK_THROWS_AS(heads.validate(), ValueError);
}
