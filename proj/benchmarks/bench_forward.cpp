#include <benchmark/benchmark.h>

#include "smdk/model.hpp"

namespace {

smdk::ModelConfig bench_cfg(smdk::Method method) {
  smdk::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.d_ff = 256;
  cfg.n_experts = 8;
  cfg.seq_len = 32;
  cfg.method = method;
  return cfg;
}

std::vector<int> bench_tokens(int n) {
  std::vector<int> toks(n);
  smdk::RngStream rng(7, "bench-tokens");
  for (auto& t : toks) t = static_cast<int>(rng.next_u64() % 256);
  return toks;
}

void BM_DenseForward(benchmark::State& state) {
  smdk::Model m = smdk::Model::init(bench_cfg(smdk::Method::kDenseDropout), 1);
  auto toks = bench_tokens(m.cfg.seq_len);
  for (auto _ : state) {
    smdk::ForwardCtx ctx;
    ctx.training = false;
    auto logits = m.forward(toks, ctx);
    benchmark::DoNotOptimize(logits.values().data());
  }
}
BENCHMARK(BM_DenseForward);

void BM_MoeForward(benchmark::State& state) {
  smdk::Model m = smdk::Model::init(bench_cfg(smdk::Method::kSmoeDropout), 1);
  auto toks = bench_tokens(m.cfg.seq_len);
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) {
    smdk::ForwardCtx ctx;
    ctx.training = false;
    ctx.k = k;
    auto logits = m.forward(toks, ctx);
    benchmark::DoNotOptimize(logits.values().data());
  }
}
BENCHMARK(BM_MoeForward)->Arg(2)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
