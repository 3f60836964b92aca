#pragma once

#include <utility>
#include <vector>

#include "smdk/moe.hpp"

namespace smdk {

// Gating matrix that participates in gradient updates (single linear layer).
struct TrainableRouter {
  Tensor g;  // d_model x N, requires_grad=true

  static TrainableRouter init(int d_model, int n_experts, uint64_t seed,
                              double scale = 0);
};

struct BalanceStats {
  std::vector<double> f;  // fraction of top-k memberships per expert
  std::vector<double> p;  // mean softmax probability per expert
};

RoutingDecision learned_route(const Tensor& x, const TrainableRouter& router,
                              int k);

BalanceStats balance_stats(const Tensor& probs, const RoutingDecision& dec);

// Switch-style N * sum_i fhat_i * P_i with fhat normalized to sum 1.
// Minimized (value 1) at uniform routing.
double balance_loss(const BalanceStats& stats, int n_experts);

// Differentiable balance term: membership fractions are constants, the mean
// probabilities carry gradient into the router.
Tensor balance_loss_graph(const Tensor& probs, const RoutingDecision& dec);

// Uniform distinct pair of expert ids.
std::pair<int, int> thor_route(RngStream& rng, int n_experts);

// Symmetric KL in nats between two epsilon-floored distributions.
double thor_consistency(const std::vector<double>& p,
                        const std::vector<double>& q, double eps = 1e-9);

// Mean per-row symmetric KL between the softmaxes of two logit matrices;
// differentiable w.r.t. both.
Tensor symmetric_kl_loss(const Tensor& logits_a, const Tensor& logits_b);

// Inverted dropout: surviving values scaled by 1/(1-p). Identity in eval.
Tensor dropout(const Tensor& x, double p, RngStream& rng, bool training);

// Continuous sigmoid-relaxed mask value, before multiplying into x.
double concrete_mask_value(double p, double u, double t, double eps = 1e-7);

struct ConcreteDropoutResult {
  Tensor output;
  Tensor regularizer;  // scalar
};

// Concrete dropout with trainable drop probability p = sigmoid(p_logit).
// `next_weights` feeds the weight-norm part of the regularizer; `input_dim`
// scales the entropy part.
ConcreteDropoutResult concrete_dropout(const Tensor& x, const Tensor& p_logit,
                                       double t, RngStream& rng,
                                       const Tensor& next_weights,
                                       int input_dim, bool training,
                                       double weight_reg = 1e-6,
                                       double dropout_reg = 1e-5);

// Bernoulli(p) seed mask expanded by a width-`block_size` max window along
// the feature axis (stride 1, same padding), inverted, multiplied into x.
Tensor dropblock(const Tensor& x, double p, int block_size, RngStream& rng,
                 bool training);

}  // namespace smdk
