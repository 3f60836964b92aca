#include "smdk/moe.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smdk {

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;
}  // namespace

int64_t ExpertLayer::param_count() const {
  int64_t total = b2.numel();
  for (const auto& e : experts)
    total += e.w1.numel() + e.b1.numel() + e.w2.numel();
  return total;
}

ExpertLayer modulize(const DenseMlp& mlp, int n_experts) {
  int d_model = mlp.w1.rows();
  int d_ff = mlp.w1.cols();
  if (d_ff % n_experts != 0)
    throw ValueError("modulize: d_ff " + std::to_string(d_ff) +
                     " not divisible by N " + std::to_string(n_experts));
  int h = d_ff / n_experts;
  ExpertLayer layer;
  layer.experts.reserve(static_cast<size_t>(n_experts));
  for (int i = 0; i < n_experts; ++i) {
    Expert e;
    std::vector<double> w1(static_cast<size_t>(d_model) * h);
    for (int r = 0; r < d_model; ++r)
      std::copy_n(mlp.w1.values().data() + static_cast<size_t>(r) * d_ff + i * h,
                  h, w1.data() + static_cast<size_t>(r) * h);
    e.w1 = Tensor::from({d_model, h}, std::move(w1), true);
    std::vector<double> b1(mlp.b1.values().begin() + static_cast<size_t>(i) * h,
                           mlp.b1.values().begin() + static_cast<size_t>(i + 1) * h);
    e.b1 = Tensor::from({h}, std::move(b1), true);
    std::vector<double> w2(mlp.w2.values().begin() + static_cast<size_t>(i) * h * d_model,
                           mlp.w2.values().begin() + static_cast<size_t>(i + 1) * h * d_model);
    e.w2 = Tensor::from({h, d_model}, std::move(w2), true);
    layer.experts.push_back(std::move(e));
  }
  layer.b2 = Tensor::from({d_model}, mlp.b2.values(), true);
  return layer;
}

RouterState router_init(int d_model, int n_experts, uint64_t seed, double scale) {
  if (d_model <= 0 || n_experts <= 0)
    throw ValueError("router_init: dimensions must be positive");
  if (scale <= 0) scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  RngStream stream(seed, "router-init");
  RouterState r;
  r.g = Tensor::randn({d_model, n_experts}, stream, scale, /*requires_grad=*/false);
  r.frozen = true;
  r.init_seed = seed;
  r.init_scale = scale;
  return r;
}

std::pair<std::vector<int>, std::vector<double>> topk_select(
    const std::vector<double>& v, int k) {
  int n = static_cast<int>(v.size());
  if (k < 1 || k > n)
    throw ValueError("topk_select: k=" + std::to_string(k) +
                     " out of range [1," + std::to_string(n) + "]");
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // Descending by value, ties by lowest index.
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return v[a] > v[b]; });
  idx.resize(static_cast<size_t>(k));
  std::vector<double> vals(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) vals[i] = v[idx[i]];
  return {std::move(idx), std::move(vals)};
}

Tensor router_probs(const Tensor& x, const Tensor& g) {
  return softmax(matmul(x, g), -1);
}

RoutingDecision decide_topk(const Tensor& probs, int k) {
  int t = probs.rows(), n = probs.cols();
  RoutingDecision dec;
  dec.k = k;
  dec.indices.resize(static_cast<size_t>(t));
  dec.gates.resize(static_cast<size_t>(t));
  std::vector<double> row(static_cast<size_t>(n));
  for (int i = 0; i < t; ++i) {
    std::copy_n(probs.values().data() + static_cast<size_t>(i) * n, n, row.data());
    auto [idx, vals] = topk_select(row, k);
    dec.indices[i] = std::move(idx);
    dec.gates[i] = std::move(vals);
  }
  return dec;
}

RoutingDecision route(const Tensor& x, const RouterState& router, int k) {
  return decide_topk(router_probs(x, router.g), k);
}

Tensor moe_combine(const Tensor& x, const Tensor& probs,
                   const ExpertLayer& experts, const RoutingDecision& dec,
                   Activation act, bool unit_gate_override) {
  int t = x.rows(), d = x.cols();
  int n = experts.n(), h = experts.hidden();
  if (static_cast<int>(dec.indices.size()) != t)
    throw ShapeError("moe_combine: decision token count mismatch");

  // Group tokens by expert; evaluation and scatter order stay deterministic.
  std::vector<std::vector<std::pair<int, double>>> by_expert(static_cast<size_t>(n));
  for (int i = 0; i < t; ++i)
    for (size_t s = 0; s < dec.indices[i].size(); ++s) {
      double gate = unit_gate_override ? 1.0 : dec.gates[i][s];
      by_expert[static_cast<size_t>(dec.indices[i][s])].push_back({i, gate});
    }

  std::vector<double> out(static_cast<size_t>(t) * d, 0.0);
  // Saved per-expert activations for backward.
  auto z_saved = std::make_shared<std::vector<std::vector<double>>>(n);
  auto hh_saved = std::make_shared<std::vector<std::vector<double>>>(n);
  auto y_saved = std::make_shared<std::vector<std::vector<double>>>(n);

  CMap X(x.values().data(), t, d);
  for (int j = 0; j < n; ++j) {
    const auto& toks = by_expert[static_cast<size_t>(j)];
    if (toks.empty()) continue;
    int m = static_cast<int>(toks.size());
    const Expert& e = experts.experts[static_cast<size_t>(j)];
    std::vector<double> xj(static_cast<size_t>(m) * d);
    for (int r = 0; r < m; ++r)
      std::copy_n(x.values().data() + static_cast<size_t>(toks[r].first) * d, d,
                  xj.data() + static_cast<size_t>(r) * d);
    std::vector<double> z(static_cast<size_t>(m) * h);
    MMap Z(z.data(), m, h);
    Z.noalias() = CMap(xj.data(), m, d) * CMap(e.w1.values().data(), d, h);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < h; ++c) z[static_cast<size_t>(r) * h + c] += e.b1.values()[c];
    std::vector<double> hv(z);
    if (act == Activation::kGelu) {
      for (auto& v : hv) v = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
    } else {
      for (auto& v : hv) v = std::max(0.0, v);
    }
    std::vector<double> y(static_cast<size_t>(m) * d);
    MMap(y.data(), m, d).noalias() =
        CMap(hv.data(), m, h) * CMap(e.w2.values().data(), h, d);
    for (int r = 0; r < m; ++r) {
      double gate = toks[r].second;
      double* orow = out.data() + static_cast<size_t>(toks[r].first) * d;
      const double* yrow = y.data() + static_cast<size_t>(r) * d;
      for (int c = 0; c < d; ++c) orow[c] += gate * yrow[c];
    }
    (*z_saved)[j] = std::move(z);
    (*hh_saved)[j] = std::move(hv);
    (*y_saved)[j] = std::move(y);
  }
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < d; ++c)
      out[static_cast<size_t>(i) * d + c] += experts.b2.values()[c];

  std::vector<Tensor> parents{x};
  if (probs.defined()) parents.push_back(probs);
  for (const auto& e : experts.experts) {
    parents.push_back(e.w1);
    parents.push_back(e.b1);
    parents.push_back(e.w2);
  }
  parents.push_back(experts.b2);

  ExpertLayer ex = experts;  // tensor handles, cheap copy
  Tensor probs_h = probs;
  RoutingDecision dec_copy = dec;
  return make_op(
      {t, d}, std::move(out), std::move(parents),
      [x, probs_h, ex, dec_copy, by_expert, z_saved, hh_saved, y_saved, act,
       unit_gate_override, t, d, n, h](const std::vector<double>& g) {
        // Shared output bias.
        if (ex.b2.requires_grad()) {
          std::vector<double> db2(static_cast<size_t>(d), 0.0);
          for (int i = 0; i < t; ++i)
            for (int c = 0; c < d; ++c) db2[c] += g[static_cast<size_t>(i) * d + c];
          accumulate_grad(ex.b2, db2);
        }
        std::vector<double> dx(static_cast<size_t>(t) * d, 0.0);
        std::vector<double> dprobs;
        if (probs_h.defined() && probs_h.requires_grad() && !unit_gate_override)
          dprobs.assign(static_cast<size_t>(t) * n, 0.0);
        for (int j = 0; j < n; ++j) {
          const auto& toks = by_expert[static_cast<size_t>(j)];
          if (toks.empty()) continue;
          int m = static_cast<int>(toks.size());
          const Expert& e = ex.experts[static_cast<size_t>(j)];
          const auto& z = (*z_saved)[j];
          const auto& hv = (*hh_saved)[j];
          const auto& y = (*y_saved)[j];
          std::vector<double> dy(static_cast<size_t>(m) * d);
          for (int r = 0; r < m; ++r) {
            int tok = toks[r].first;
            double gate = toks[r].second;
            const double* grow = g.data() + static_cast<size_t>(tok) * d;
            double* dyr = dy.data() + static_cast<size_t>(r) * d;
            for (int c = 0; c < d; ++c) dyr[c] = gate * grow[c];
            if (!dprobs.empty()) {
              double dot = 0;
              const double* yr = y.data() + static_cast<size_t>(r) * d;
              for (int c = 0; c < d; ++c) dot += yr[c] * grow[c];
              dprobs[static_cast<size_t>(tok) * n + j] += dot;
            }
          }
          std::vector<double> dh(static_cast<size_t>(m) * h);
          MMap(dh.data(), m, h).noalias() =
              CMap(dy.data(), m, d) * CMap(e.w2.values().data(), h, d).transpose();
          if (e.w2.requires_grad()) {
            std::vector<double> dw2(static_cast<size_t>(h) * d);
            MMap(dw2.data(), h, d).noalias() =
                CMap(hv.data(), m, h).transpose() * CMap(dy.data(), m, d);
            accumulate_grad(e.w2, dw2);
          }
          // Through the activation.
          std::vector<double> dz(static_cast<size_t>(m) * h);
          if (act == Activation::kGelu) {
            for (size_t i = 0; i < dz.size(); ++i) {
              double v = z[i];
              double cdf = 0.5 * (1.0 + std::erf(v / M_SQRT2));
              double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
              dz[i] = dh[i] * (cdf + v * pdf);
            }
          } else {
            for (size_t i = 0; i < dz.size(); ++i) dz[i] = z[i] > 0 ? dh[i] : 0.0;
          }
          if (e.b1.requires_grad()) {
            std::vector<double> db1(static_cast<size_t>(h), 0.0);
            for (int r = 0; r < m; ++r)
              for (int c = 0; c < h; ++c) db1[c] += dz[static_cast<size_t>(r) * h + c];
            accumulate_grad(e.b1, db1);
          }
          std::vector<double> xj(static_cast<size_t>(m) * d);
          for (int r = 0; r < m; ++r)
            std::copy_n(x.values().data() + static_cast<size_t>(toks[r].first) * d,
                        d, xj.data() + static_cast<size_t>(r) * d);
          if (e.w1.requires_grad()) {
            std::vector<double> dw1(static_cast<size_t>(d) * h);
            MMap(dw1.data(), d, h).noalias() =
                CMap(xj.data(), m, d).transpose() * CMap(dz.data(), m, h);
            accumulate_grad(e.w1, dw1);
          }
          if (x.requires_grad()) {
            std::vector<double> dxj(static_cast<size_t>(m) * d);
            MMap(dxj.data(), m, d).noalias() =
                CMap(dz.data(), m, h) * CMap(e.w1.values().data(), d, h).transpose();
            for (int r = 0; r < m; ++r) {
              double* drow = dx.data() + static_cast<size_t>(toks[r].first) * d;
              const double* src = dxj.data() + static_cast<size_t>(r) * d;
              for (int c = 0; c < d; ++c) drow[c] += src[c];
            }
          }
        }
        if (x.requires_grad()) accumulate_grad(x, dx);
        if (!dprobs.empty()) accumulate_grad(probs_h, dprobs);
      });
}

Tensor expert_layer_forward(const Tensor& x, const ExpertLayer& experts,
                            const RouterState& router, int k, Activation act,
                            RoutingDecision* out_decision,
                            bool unit_gate_override) {
  if (k < 1 || k > experts.n())
    throw ValueError("expert_layer_forward: k=" + std::to_string(k) +
                     " out of range [1," + std::to_string(experts.n()) + "]");
  Tensor probs = router_probs(x, router.g);
  RoutingDecision dec = decide_topk(probs, k);
  if (out_decision) *out_decision = dec;
  return moe_combine(x, probs, experts, dec, act, unit_gate_override);
}

}  // namespace smdk
