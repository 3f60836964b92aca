#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "smdk/config.hpp"
#include "smdk/eval.hpp"
#include "testutil.hpp"

using namespace smdk;
using namespace smdk::testutil;

namespace {

ModelConfig eval_cfg(Method method = Method::kSmoeDropout) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_experts = 8;
  cfg.seq_len = 16;
  cfg.method = method;
  return cfg;
}

Checkpoint make_ckpt(const ModelConfig& cfg, uint64_t seed) {
  Model m = Model::init(cfg, seed);
  return Checkpoint::from_model(m, 0, "");
}

}  // namespace

TEST_CASE("flops are affine in k and the expert term halves at N/2") {
  ModelConfig cfg = eval_cfg();
  const int n = cfg.n_experts, seq = cfg.seq_len;
  int64_t d1 = count_flops(cfg, 2, seq) - count_flops(cfg, 1, seq);
  for (int k = 2; k < n; ++k)
    CHECK(count_flops(cfg, k + 1, seq) - count_flops(cfg, k, seq) == d1);

  // Per-expert cost from the analytic formula; the expert term at k = N is
  // exactly twice the expert term at k = N/2.
  int64_t h = cfg.d_ff / n;
  int64_t per_expert = cfg.n_layers * (4 * int64_t(cfg.d_model) * h + h);
  CHECK(d1 == per_expert);
  CHECK(count_flops(cfg, n, seq) - count_flops(cfg, n / 2, seq) ==
        (n / 2) * per_expert);
}

TEST_CASE("full-k moe flops exceed dense by exactly the router cost") {
  ModelConfig moe = eval_cfg(Method::kSmoeDropout);
  ModelConfig dense = eval_cfg(Method::kDenseDropout);
  int64_t router = int64_t(moe.n_layers) * 2 * moe.d_model * moe.n_experts;
  CHECK(count_flops(moe, moe.n_experts, moe.seq_len) -
            count_flops(dense, 0, dense.seq_len) ==
        router);
}

TEST_CASE("activated parameter count matches the live model") {
  ModelConfig cfg = eval_cfg();
  Model m = Model::init(cfg, 3);
  CHECK(activated_param_count(cfg, cfg.n_experts) ==
        m.trainable_param_count() + m.router_param_count());

  int64_t h = cfg.d_ff / cfg.n_experts;
  int64_t per_expert = cfg.n_layers * (int64_t(cfg.d_model) * h + h + h * cfg.d_model);
  for (int k = 1; k < cfg.n_experts; ++k)
    CHECK(activated_param_count(cfg, k + 1) - activated_param_count(cfg, k) ==
          per_expert);

  // THOR has no router at all.
  ModelConfig thor = eval_cfg(Method::kThor);
  CHECK(activated_param_count(cfg, 2) - activated_param_count(thor, 2) ==
        int64_t(cfg.n_layers) * cfg.d_model * cfg.n_experts);
}

TEST_CASE("slimmable sweep: sorted entries, pure, proper CSV") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 5);
  auto data = make_corpus(2048, 5);
  uint64_t before = ckpt.payload_checksum();

  EvalReport rep = slimmable_sweep(ckpt, data, {8, 1, 4}, 4);
  CHECK(ckpt.payload_checksum() == before);
  REQUIRE(rep.entries.size() == 3);
  CHECK(rep.entries[0].k == 1);
  CHECK(rep.entries[1].k == 4);
  CHECK(rep.entries[2].k == 8);
  CHECK(rep.method == "smoe_dropout");

  std::string csv = rep.to_csv();
  CHECK(csv.rfind("method,seed,k,activated_params,flops_per_token,val_bpc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  CHECK_THROWS_AS(slimmable_sweep(ckpt, data, {9}, 4), ValueError);
  CHECK_THROWS_AS(slimmable_sweep(ckpt, data, {0}, 4), ValueError);
}

TEST_CASE("sweep bpc at each k matches a direct evaluation") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 7);
  auto data = make_corpus(2048, 7);
  EvalReport rep = slimmable_sweep(ckpt, data, {2, 8}, 4);
  CHECK(rep.entries[0].val_bpc == bpc(ckpt, data, 2, 1.0, 4));
  CHECK(rep.entries[1].val_bpc == bpc(ckpt, data, 8, 1.0, 4));
}

TEST_CASE("expert votes sum to tokens times k and are near-uniform at init") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 9);
  auto data = make_corpus(16384, 9);
  const int k = 2;
  VoteTally tally = vote_experts(ckpt, data, k, 0);
  REQUIRE(tally.counts.size() == 2);
  CHECK(tally.k_used == k);
  CHECK(tally.tokens_seen > 500);
  for (const auto& layer : tally.counts) {
    int64_t total = 0;
    for (int64_t c : layer) {
      total += c;
      // Routing on real activations is skewed but never starves an expert
      // at initialization.
      CHECK(c > 0);
    }
    CHECK(total == tally.tokens_seen * k);
  }

  Checkpoint dense = make_ckpt(eval_cfg(Method::kDenseDropout), 9);
  CHECK_THROWS_AS(vote_experts(dense, data, 1, 4), ValueError);
}

TEST_CASE("select_subnetwork with m = N is the identity") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 11);
  auto data = make_corpus(2048, 11);
  VoteTally tally = vote_experts(ckpt, data, 2, 4);
  Checkpoint same = select_subnetwork(ckpt, tally, cfg.n_experts);
  CHECK(same.payload_checksum() == ckpt.payload_checksum());
  CHECK(bpc(same, data, 4, 1.0, 4) == bpc(ckpt, data, 4, 1.0, 4));
}

TEST_CASE("select_subnetwork keeps the most voted experts") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 13);
  auto data = make_corpus(4096, 13);
  const int m = 3;
  VoteTally tally = vote_experts(ckpt, data, 2, 0);
  Checkpoint sub = select_subnetwork(ckpt, tally, m);

  CHECK(sub.model_cfg.n_experts == m);
  CHECK(sub.model_cfg.d_ff == m * (cfg.d_ff / cfg.n_experts));
  Model sm = sub.to_model();
  CHECK(sm.layers[0].experts.n() == m);
  // The submodel evaluates standalone at any k <= m.
  double b = bpc(sub, data, m, 0.2, 4);
  CHECK(std::isfinite(b));

  CHECK_THROWS_AS(select_subnetwork(ckpt, tally, 0), ValueError);
  CHECK_THROWS_AS(select_subnetwork(ckpt, tally, cfg.n_experts + 1), ValueError);
}

TEST_CASE("sweep svg plot is written") {
  ModelConfig cfg = eval_cfg();
  Checkpoint ckpt = make_ckpt(cfg, 15);
  auto data = make_corpus(2048, 15);
  EvalReport rep = slimmable_sweep(ckpt, data, {1, 8}, 2);
  std::string path = "/tmp/smdk_test_sweep.svg";
  write_sweep_svg(rep, path);
  std::ifstream f(path);
  std::string body((std::istreambuf_iterator<char>(f)), {});
  CHECK(body.find("<svg") != std::string::npos);
  CHECK(body.find("polyline") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("distillation runs and alpha=1 ignores the teacher") {
  ModelConfig tcfg = eval_cfg();
  Checkpoint teacher = make_ckpt(tcfg, 17);
  auto data = make_corpus(8192, 17);

  ModelConfig scfg = tcfg;
  scfg.n_experts = 1;
  scfg.d_ff = tcfg.d_ff / tcfg.n_experts;

  DistillConfig dc;
  dc.steps = 6;
  dc.batch = 2;
  dc.seed = 17;
  DistillResult res = distill(teacher, scfg, data, dc);
  CHECK(res.ce_loss_log.size() == 6);
  CHECK(res.kl_loss_log.size() == 6);
  CHECK(res.checkpoint.model_cfg.n_experts == 1);
  for (double v : res.kl_loss_log) CHECK(v >= 0.0);

  DistillConfig pure = dc;
  pure.alpha = 1.0;
  DistillResult scratch = distill(teacher, scfg, data, pure);
  // Different objective, different endpoint.
  CHECK(scratch.checkpoint.payload_checksum() != res.checkpoint.payload_checksum());

  // Warm start from an existing student checkpoint.
  DistillConfig warm = dc;
  warm.steps = 2;
  DistillResult warm_res = distill(teacher, scfg, data, warm, &res.checkpoint);
  CHECK(warm_res.ce_loss_log.size() == 2);
}

TEST_CASE("distillation is deterministic") {
  ModelConfig tcfg = eval_cfg();
  Checkpoint teacher = make_ckpt(tcfg, 19);
  auto data = make_corpus(4096, 19);
  ModelConfig scfg = tcfg;
  scfg.n_experts = 2;
  scfg.d_ff = 8;
  DistillConfig dc;
  dc.steps = 3;
  dc.batch = 2;
  dc.seed = 23;
  DistillResult a = distill(teacher, scfg, data, dc);
  DistillResult b = distill(teacher, scfg, data, dc);
  CHECK(a.checkpoint.payload_checksum() == b.checkpoint.payload_checksum());
  CHECK(a.ce_loss_log == b.ce_loss_log);
}
