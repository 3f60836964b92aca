#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "smdk/config.hpp"
#include "smdk/training.hpp"
#include "testutil.hpp"

using namespace smdk;
using namespace smdk::testutil;

namespace {

TrainConfig tiny_train_cfg(Method method, uint64_t seed, int steps) {
  TrainConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.d_ff = 32;
  cfg.model.n_experts = 4;
  cfg.model.seq_len = 16;
  cfg.model.method = method;
  cfg.steps = steps;
  cfg.batch = 2;
  cfg.seed = seed;
  cfg.ksched = KSchedule::linear(1, 4, std::max(1, steps));
  cfg.val_max_windows = 4;
  return cfg;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/smdk_test_") + stem;
}

}  // namespace

TEST_CASE("adam first update has magnitude lr in every coordinate") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  p.zero_grad();
  accumulate_grad(p, {0.2, -0.1, 0.4});
  std::vector<Tensor> params{p};
  AdamState adam(params);
  const double lr = 1e-3;
  adam.step(params, lr, Optimizer::kAdam, 0.9, 0.999, 1e-8, 0.0, 1);
  // With bias correction, step 1 moves by lr * g/|g| up to the eps term.
  CHECK(p.values()[0] == doctest::Approx(1.0 - lr).epsilon(1e-6));
  CHECK(p.values()[1] == doctest::Approx(-2.0 + lr).epsilon(1e-6));
  CHECK(p.values()[2] == doctest::Approx(0.5 - lr).epsilon(1e-6));
}

TEST_CASE("adam leaves parameters with zero gradient untouched") {
  Tensor p = Tensor::from({2}, {3.0, 4.0}, true);
  std::vector<Tensor> params{p};
  AdamState adam(params);
  adam.step(params, 1e-2, Optimizer::kAdam, 0.9, 0.999, 1e-8, 0.0, 1);
  CHECK(p.values()[0] == 3.0);
  CHECK(p.values()[1] == 4.0);
}

TEST_CASE("adamw decouples weight decay from the gradient") {
  Tensor pa = Tensor::from({1}, {2.0}, true);
  Tensor pw = Tensor::from({1}, {2.0}, true);
  pa.zero_grad();
  pw.zero_grad();
  std::vector<Tensor> a{pa}, w{pw};
  AdamState sa(a), sw(w);
  // No gradient signal: plain adam stands still, adamw shrinks the weight.
  sa.step(a, 1e-2, Optimizer::kAdam, 0.9, 0.999, 1e-8, 0.0, 1);
  sw.step(w, 1e-2, Optimizer::kAdamW, 0.9, 0.999, 1e-8, 0.1, 1);
  CHECK(pa.values()[0] == 2.0);
  CHECK(pw.values()[0] == doctest::Approx(2.0 * (1.0 - 1e-2 * 0.1)).epsilon(1e-12));
}

TEST_CASE("batch iterator splits train and validation without overlap") {
  auto corpus = make_corpus(4096, 3);
  const int seq = 16;
  BatchIterator it(corpus, seq, 2, 0.25, 7);
  CHECK(it.train_len() == size_t(4096 * 0.75));

  // Every training window fits strictly inside the training prefix.
  size_t seen = 0;
  std::set<std::vector<int>> unique_inputs;
  for (size_t i = 0; i + 1 < it.train_window_count() / 2; ++i) {
    Batch b = it.next();
    for (auto& in : b.inputs) {
      CHECK(in.size() == size_t(seq));
      unique_inputs.insert(in);
      ++seen;
    }
  }
  CHECK(unique_inputs.size() == seen);  // no repeats inside one epoch

  auto vw = it.val_windows(0);
  CHECK(!vw.empty());
  for (auto& [in, tg] : vw) {
    CHECK(in.size() == size_t(seq));
    CHECK(tg.size() == size_t(seq));
    // Targets are the inputs shifted by one byte.
    for (int i = 0; i + 1 < seq; ++i) CHECK(tg[i] == in[i + 1]);
  }
  CHECK(it.val_windows(3).size() == 3);
}

TEST_CASE("batch iterator shuffling is seed-deterministic") {
  auto corpus = make_corpus(2048, 5);
  BatchIterator a(corpus, 16, 2, 0.1, 11), b(corpus, 16, 2, 0.1, 11);
  for (int i = 0; i < 20; ++i) {
    Batch ba = a.next(), bb = b.next();
    CHECK(ba.inputs == bb.inputs);
  }
  BatchIterator c(corpus, 16, 2, 0.1, 12);
  bool differs = false;
  BatchIterator d(corpus, 16, 2, 0.1, 11);
  for (int i = 0; i < 20 && !differs; ++i)
    differs = d.next().inputs != c.next().inputs;
  CHECK(differs);
}

TEST_CASE("checkpoint round trip is bitwise stable") {
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 21, 1);
  Model m = Model::init(cfg.model, cfg.seed);
  Checkpoint ck = Checkpoint::from_model(m, 42, "echo-text");
  std::string path = temp_path("roundtrip.ckpt");
  ck.save(path);
  Checkpoint re = Checkpoint::load(path);

  CHECK(re.step == 42);
  CHECK(re.config_echo == "echo-text");
  CHECK(re.init_seed == 21);
  CHECK(re.payload_checksum() == ck.payload_checksum());
  REQUIRE(re.tensors.size() == ck.tensors.size());
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(re.tensors[i].first == ck.tensors[i].first);
    CHECK(re.tensors[i].second == ck.tensors[i].second);
  }

  // save(load(x)) is byte-identical to save(x).
  std::string path2 = temp_path("roundtrip2.ckpt");
  re.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
  CHECK(s1.substr(0, 4) == "SMDK");
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint loader rejects corruption and bad versions") {
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 23, 1);
  Model m = Model::init(cfg.model, cfg.seed);
  Checkpoint ck = Checkpoint::from_model(m, 0, "");
  std::string path = temp_path("corrupt.ckpt");
  ck.save(path);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();

  // Flip one payload byte.
  std::string flipped = bytes;
  flipped[flipped.size() - 5] ^= 0x40;
  std::ofstream(path, std::ios::binary).write(flipped.data(), flipped.size());
  CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);

  // Version bump (bytes 4..7 little-endian).
  std::string versioned = bytes;
  versioned[4] = 2;
  std::ofstream(path, std::ios::binary).write(versioned.data(), versioned.size());
  CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);

  // Wrong magic.
  std::string magic = bytes;
  magic[0] = 'X';
  std::ofstream(path, std::ios::binary).write(magic.data(), magic.size());
  CHECK_THROWS_AS(Checkpoint::load(path), CheckpointError);

  CHECK_THROWS_AS(Checkpoint::load("/tmp/definitely_missing.ckpt"),
                  CheckpointError);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint to_model reproduces the saved weights") {
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 29, 1);
  Model m = Model::init(cfg.model, cfg.seed);
  Checkpoint ck = Checkpoint::from_model(m, 0, "");
  Model r = ck.to_model();
  auto a = m.named_tensors(), b = r.named_tensors();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    // Values pass through float32 exactly once in both directions.
    const auto& av = a[i].second.values();
    const auto& bv = b[i].second.values();
    for (size_t j = 0; j < av.size(); ++j)
      CHECK(float(av[j]) == float(bv[j]));
  }
  CHECK(r.router_checksum() == Checkpoint::from_model(r, 0, "").to_model().router_checksum());
}

TEST_CASE("zero-step training returns the initialization") {
  auto corpus = make_corpus(2048, 7);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 31, 0);
  TrainResult res = train(cfg, corpus);
  Checkpoint init = Checkpoint::from_model(Model::init(cfg.model, cfg.seed), 0, "");
  CHECK(res.checkpoint.payload_checksum() == init.payload_checksum());
  CHECK(res.log.empty());
}

TEST_CASE("training is bitwise deterministic") {
  auto corpus = make_corpus(4096, 9);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 33, 12);
  TrainResult a = train(cfg, corpus);
  TrainResult b = train(cfg, corpus);
  CHECK(a.checkpoint.payload_checksum() == b.checkpoint.payload_checksum());
  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i)
    CHECK(log_row_csv(a.log[i]) == log_row_csv(b.log[i]));
}

TEST_CASE("training reduces the loss on a learnable corpus") {
  auto corpus = make_corpus(8192, 11);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 35, 150);
  cfg.lr0 = 1e-3;
  TrainResult res = train(cfg, corpus);
  double first = res.log.front().train_loss_nats;
  double last = res.log.back().train_loss_nats;
  CHECK(last < first - 0.5);
}

TEST_CASE("step log format") {
  CHECK(log_csv_header() == "step,k,lr,train_loss_nats,val_bpc@k,val_bpc@N");
  LogRow row;
  row.step = 3;
  row.k = 2;
  row.lr = 0.5;
  row.train_loss_nats = 1.25;
  std::string no_val = log_row_csv(row);
  CHECK(no_val == "3,2,0.5,1.25,,");
  row.val_bpc_at_k = 2.5;
  row.val_bpc_at_n = 2.25;
  CHECK(log_row_csv(row) == "3,2,0.5,1.25,2.5,2.25");
}

TEST_CASE("untrained model sits at 8 bpc on bytes") {
  auto corpus = make_corpus(8192, 13);
  ModelConfig mc = tiny_train_cfg(Method::kSmoeDropout, 37, 1).model;
  Model m = Model::init(mc, 37);
  Checkpoint ck = Checkpoint::from_model(m, 0, "");
  double b = bpc(ck, corpus, mc.n_experts, 0.2, 8);
  CHECK(b == doctest::Approx(8.0).epsilon(0.1 / 8.0));
}

TEST_CASE("bpc equals mean cross entropy over ln 2") {
  auto corpus = make_corpus(4096, 15);
  ModelConfig mc = tiny_train_cfg(Method::kSmoeDropout, 39, 1).model;
  Model m = Model::init(mc, 39);
  Checkpoint ck = Checkpoint::from_model(m, 0, "");
  const int k = 2;
  double b = bpc(ck, corpus, k, 0.25, 6);

  // Independent recomputation over the same validation windows.
  Model m2 = ck.to_model();
  BatchIterator it(corpus, mc.seq_len, 1, 0.25, ck.init_seed);
  double nats = 0;
  int64_t count = 0;
  for (auto& [in, tg] : it.val_windows(6)) {
    ForwardCtx ctx;
    ctx.k = k;
    ctx.training = false;
    nats += cross_entropy(m2.forward(in, ctx), tg).item() * double(in.size());
    count += int64_t(in.size());
  }
  CHECK(b * std::log(2.0) == doctest::Approx(nats / double(count)).epsilon(1e-9));
}

TEST_CASE("frozen router is bitwise unchanged by training") {
  auto corpus = make_corpus(4096, 17);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 41, 25);
  uint64_t before = Model::init(cfg.model, cfg.seed).router_checksum();
  TrainResult res = train(cfg, corpus);
  CHECK(res.checkpoint.to_model().router_checksum() == before);
}

TEST_CASE("learned router does move during training") {
  auto corpus = make_corpus(4096, 19);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeLearned, 43, 25);
  cfg.ksched = KSchedule::constant(2, cfg.steps);
  uint64_t before = Model::init(cfg.model, cfg.seed).router_checksum();
  TrainResult res = train(cfg, corpus);
  CHECK(res.checkpoint.to_model().router_checksum() != before);
}

TEST_CASE("every method trains end to end for a few steps") {
  auto corpus = make_corpus(4096, 21);
  const Method methods[] = {Method::kDenseDropout, Method::kConcrete,
                            Method::kDropBlock,    Method::kSmoeLearned,
                            Method::kThor,         Method::kSmoeDropout};
  for (Method method : methods) {
    TrainConfig cfg = tiny_train_cfg(method, 45, 4);
    TrainResult res = train(cfg, corpus);
    CHECK(res.log.size() == 4);
    for (const auto& row : res.log) CHECK(std::isfinite(row.train_loss_nats));
  }
}

TEST_CASE("non-finite loss raises a numeric error carrying the config") {
  auto corpus = make_corpus(2048, 23);
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 47, 5);
  cfg.lr0 = 1e300;  // guaranteed overflow on the next forward pass
  cfg.config_echo = "echo-for-debugging";
  try {
    train(cfg, corpus);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("step") != std::string::npos);
    CHECK(msg.find("echo-for-debugging") != std::string::npos);
  }
}

TEST_CASE("train config validation catches mismatched schedules") {
  TrainConfig cfg = tiny_train_cfg(Method::kSmoeDropout, 49, 10);
  cfg.ksched = KSchedule::linear(1, 4, 99);
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = tiny_train_cfg(Method::kSmoeDropout, 49, 10);
  cfg.ksched = KSchedule::linear(1, 8, 10);  // k_max > N
  CHECK_THROWS_AS(cfg.validate(), ValueError);
}
