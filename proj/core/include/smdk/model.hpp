#pragma once

#include <string>
#include <utility>
#include <vector>

#include "smdk/baselines.hpp"
#include "smdk/moe.hpp"
#include "smdk/nn.hpp"

namespace smdk {

struct LayerParams {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionParams attn;
  bool is_moe = false;
  DenseMlp mlp;          // dense layers
  ExpertLayer experts;   // MoE layers
};

// Per-forward routing/dropout context.
struct ForwardCtx {
  int k = 0;  // activated experts; 0 means N
  bool training = false;
  RngStream* dropout_rng = nullptr;
  RngStream* thor_rng = nullptr;
  bool unit_gate_override = false;

  // Outputs, populated per MoE layer in layer order.
  std::vector<RoutingDecision>* decisions = nullptr;
  std::vector<Tensor>* probs_out = nullptr;
  Tensor aux_regularizer;  // accumulated concrete-dropout regularizer
};

class Model {
 public:
  ModelConfig cfg;
  Tensor tok_emb;  // vocab x d_model
  Tensor pos_emb;  // seq_len x d_model
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor w_out;  // d_model x vocab
  Tensor b_out;  // vocab

  // Routers, indexed by layer (undefined tensors on non-MoE layers).
  std::vector<RouterState> frozen_routers;      // smoe_dropout
  std::vector<TrainableRouter> learned_routers; // smoe_learned
  std::vector<Tensor> concrete_p_logits;        // concrete, one per layer
  uint64_t init_seed = 0;

  static Model init(const ModelConfig& cfg, uint64_t seed);

  // Every weight tensor, including frozen router matrices, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  // Tensors the optimizer updates (requires_grad leaves).
  std::vector<Tensor> trainable_tensors() const;

  // Core weight count, identical across methods by construction; router and
  // dropout-machinery parameters are reported separately.
  int64_t trainable_param_count() const;
  int64_t router_param_count() const;
  int64_t aux_param_count() const;

  uint64_t router_checksum() const;  // FNV over all router matrices

  Tensor forward(const std::vector<int>& tokens, ForwardCtx& ctx);
};

Tensor transformer_forward(Model& model, const std::vector<int>& tokens,
                           ForwardCtx& ctx);

}  // namespace smdk
