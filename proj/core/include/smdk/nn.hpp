#pragma once

#include <string>
#include <vector>

#include "smdk/ops.hpp"

namespace smdk {

enum class Method {
  kDenseDropout,
  kConcrete,
  kDropBlock,
  kSmoeLearned,
  kThor,
  kSmoeDropout,
};

Method method_from_string(const std::string& s);
std::string method_to_string(Method m);
bool method_uses_experts(Method m);

enum class Activation { kGelu, kRelu };

struct ModelConfig {
  int n_layers = 2;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 1024;
  int n_experts = 8;
  int vocab = 256;
  int seq_len = 128;
  std::vector<uint8_t> moe_layer_mask;  // empty = all layers for MoE methods
  Method method = Method::kSmoeDropout;
  Activation activation = Activation::kGelu;
  double dropout_p = 0.1;        // vanilla dropout / dropblock seed prob
  int dropblock_size = 5;
  double router_init_scale = 0;  // 0 = default 1/sqrt(d_model)

  std::vector<uint8_t> effective_moe_mask() const;
  void validate() const;
};

struct DenseMlp {
  Tensor w1;  // d_model x d_ff
  Tensor b1;  // d_ff
  Tensor w2;  // d_ff x d_model
  Tensor b2;  // d_model

  static DenseMlp init(int d_model, int d_ff, RngStream& stream);
  int64_t param_count() const;
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // d_model x d_model each
  Tensor bq, bk, bv, bo;  // d_model

  static AttentionParams init(int d_model, RngStream& stream);
};

// Token rows gathered from `table` plus learned positional embeddings.
Tensor embed(const std::vector<int>& tokens, const Tensor& table,
             const Tensor& pos_table);

// Multi-head attention with a strict causal mask; residual added by caller.
Tensor causal_attention(const Tensor& x, const AttentionParams& p, int n_heads);

Tensor dense_mlp_forward(const Tensor& x, const DenseMlp& mlp,
                         Activation act = Activation::kGelu);

Tensor apply_activation(const Tensor& x, Activation act);

}  // namespace smdk
