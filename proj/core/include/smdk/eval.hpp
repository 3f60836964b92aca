#pragma once

#include <string>
#include <vector>

#include "smdk/training.hpp"

namespace smdk {

struct EvalEntry {
  int k = 0;
  int64_t activated_params = 0;
  int64_t analytic_flops_per_token = 0;
  double val_bpc = 0;
};

struct EvalReport {
  std::string method;
  uint64_t seed = 0;
  std::string checkpoint_id;
  std::vector<EvalEntry> entries;  // sorted by k

  std::string to_csv() const;
};

struct VoteTally {
  // Per MoE layer, selection counts per expert.
  std::vector<std::vector<int64_t>> counts;
  int64_t tokens_seen = 0;
  int k_used = 0;
};

// Parameters active at inference with k experts: every always-on weight
// (embeddings, attention, norms, output head, shared expert bias, router)
// plus k of the N per-expert slices.
int64_t activated_param_count(const ModelConfig& cfg, int k);

// Analytic forward FLOPs per token (multiply+add counted separately).
// Per layer: layernorms 5d each, attention 8d^2 + 4d + 4*seq*d, then either
// the dense MLP 4*d*d_ff + d_ff + d or router 2*d*N plus k experts at
// 4*d*(d_ff/N) + d_ff/N each (+ d for the shared bias). Final norm and
// vocabulary projection close it out. FLOPs(k=N) - FLOPs(dense) equals the
// router cost alone.
int64_t count_flops(const ModelConfig& cfg, int k, int seq_len);

// One BPC evaluation per k from a single checkpoint; mutates nothing.
EvalReport slimmable_sweep(const Checkpoint& ckpt,
                           const std::vector<uint8_t>& data,
                           const std::vector<int>& ks, int max_windows = 0);

// Top-k membership counts over one forward pass of `data`.
VoteTally vote_experts(const Checkpoint& ckpt, const std::vector<uint8_t>& data,
                       int k, int max_windows = 0);

// Keeps the m most-voted experts per layer (ties by lowest index); router
// columns of dropped experts are removed. The result is a standalone
// trainable checkpoint with N' = m.
Checkpoint select_subnetwork(const Checkpoint& ckpt, const VoteTally& tally,
                             int m);

struct DistillConfig {
  double alpha = 0.5;
  double temperature = 2.0;
  int steps = 800;
  int batch = 4;
  double lr0 = 2.5e-4;
  uint64_t seed = 0;
  double val_fraction = 0.1;
};

struct DistillResult {
  Checkpoint checkpoint;
  std::vector<double> ce_loss_log;    // per step, hard-label term
  std::vector<double> kl_loss_log;    // per step, soft-teacher term
};

// Trains the student on alpha*CE + (1-alpha)*T^2*KL(soft teacher || student).
// `student_init` warm-starts the student; when null the student is freshly
// initialized from student_cfg and the distill seed.
DistillResult distill(const Checkpoint& teacher, const ModelConfig& student_cfg,
                      const std::vector<uint8_t>& data, const DistillConfig& dc,
                      const Checkpoint* student_init = nullptr);

// Simple SVG line plot of BPC vs activated parameters.
void write_sweep_svg(const EvalReport& report, const std::string& path);

}  // namespace smdk
