#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "smdk/nn.hpp"

namespace smdk {

// One slice of the source dense MLP: hidden units [i*h, (i+1)*h).
struct Expert {
  Tensor w1;  // d_model x h
  Tensor b1;  // h
  Tensor w2;  // h x d_model
};

// N small MLPs produced by splitting one dense MLP. The output bias is held
// once and added after the expert sum, so unit gates reconstruct the dense
// layer exactly.
struct ExpertLayer {
  std::vector<Expert> experts;
  Tensor b2;  // d_model, shared

  int n() const { return static_cast<int>(experts.size()); }
  int hidden() const { return experts.front().b1.shape()[0]; }
  int64_t param_count() const;
};

// Frozen gating weights plus seed provenance.
struct RouterState {
  Tensor g;  // d_model x N; requires_grad=false while frozen
  bool frozen = true;
  uint64_t init_seed = 0;
  double init_scale = 0;

  uint64_t checksum() const { return g.checksum(); }
};

struct RoutingDecision {
  int k = 0;
  // Per token, k distinct expert ids ordered by descending gate
  // (ties by lowest index) and the raw softmax values at those ids.
  std::vector<std::vector<int>> indices;
  std::vector<std::vector<double>> gates;
};

// Splits a dense MLP into N experts of hidden width d_ff/N. Total parameter
// count is preserved exactly; no value is altered.
ExpertLayer modulize(const DenseMlp& mlp, int n_experts);

// G drawn once from the seeded stream; default scale 1/sqrt(d_model).
RouterState router_init(int d_model, int n_experts, uint64_t seed,
                        double scale = 0);

// The k largest entries; ties broken by lowest index.
std::pair<std::vector<int>, std::vector<double>> topk_select(
    const std::vector<double>& v, int k);

// softmax(x . G), differentiable w.r.t. x (and G when trainable).
Tensor router_probs(const Tensor& x, const Tensor& g);

// Per-token top-k selection from a T x N probability matrix.
RoutingDecision decide_topk(const Tensor& probs, int k);

RoutingDecision route(const Tensor& x, const RouterState& router, int k);

// Gate-weighted expert sum. Only the selected experts are evaluated per
// token. `probs`, when defined, is the differentiable gate source; with an
// undefined probs the decision's gates are treated as constants (THOR).
// `unit_gate_override` replaces every gate with 1 (reconstruction checks).
Tensor moe_combine(const Tensor& x, const Tensor& probs,
                   const ExpertLayer& experts, const RoutingDecision& dec,
                   Activation act, bool unit_gate_override = false);

Tensor expert_layer_forward(const Tensor& x, const ExpertLayer& experts,
                            const RouterState& router, int k,
                            Activation act = Activation::kGelu,
                            RoutingDecision* out_decision = nullptr,
                            bool unit_gate_override = false);

}  // namespace smdk
