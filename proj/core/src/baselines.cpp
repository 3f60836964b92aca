#include "smdk/baselines.hpp"

#include <algorithm>
#include <cmath>

namespace smdk {

TrainableRouter TrainableRouter::init(int d_model, int n_experts, uint64_t seed,
                                      double scale) {
  if (scale <= 0) scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  RngStream stream(seed, "router-init");
  TrainableRouter r;
  r.g = Tensor::randn({d_model, n_experts}, stream, scale, /*requires_grad=*/true);
  return r;
}

RoutingDecision learned_route(const Tensor& x, const TrainableRouter& router,
                              int k) {
  return decide_topk(router_probs(x, router.g), k);
}

BalanceStats balance_stats(const Tensor& probs, const RoutingDecision& dec) {
  int t = probs.rows(), n = probs.cols();
  BalanceStats st;
  st.f.assign(static_cast<size_t>(n), 0.0);
  st.p.assign(static_cast<size_t>(n), 0.0);
  for (const auto& ids : dec.indices)
    for (int j : ids) st.f[static_cast<size_t>(j)] += 1.0;
  for (auto& v : st.f) v /= t;  // memberships per token; sums to k
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < n; ++j) st.p[static_cast<size_t>(j)] += probs.values()[static_cast<size_t>(i) * n + j];
  for (auto& v : st.p) v /= t;
  return st;
}

double balance_loss(const BalanceStats& stats, int n_experts) {
  double fsum = 0;
  for (double v : stats.f) fsum += v;
  double loss = 0;
  for (int j = 0; j < n_experts; ++j)
    loss += (stats.f[static_cast<size_t>(j)] / fsum) * stats.p[static_cast<size_t>(j)];
  return n_experts * loss;
}

Tensor balance_loss_graph(const Tensor& probs, const RoutingDecision& dec) {
  int t = probs.rows(), n = probs.cols();
  std::vector<double> fhat(static_cast<size_t>(n), 0.0);
  for (const auto& ids : dec.indices)
    for (int j : ids) fhat[static_cast<size_t>(j)] += 1.0;
  double total = static_cast<double>(t) * dec.k;
  for (auto& v : fhat) v /= total;
  Tensor fhat_t = Tensor::from({n}, std::move(fhat), false);
  return scale(sum(mul(fhat_t, col_mean(probs))), static_cast<double>(n));
}

std::pair<int, int> thor_route(RngStream& rng, int n_experts) {
  if (n_experts < 2) throw ValueError("thor_route: need at least 2 experts");
  int a = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(n_experts));
  int b = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(n_experts - 1));
  if (b >= a) ++b;
  return {a, b};
}

double thor_consistency(const std::vector<double>& p,
                        const std::vector<double>& q, double eps) {
  if (p.size() != q.size())
    throw ShapeError("thor_consistency: distribution size mismatch");
  double kl_pq = 0, kl_qp = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    double pi = std::max(p[i], eps), qi = std::max(q[i], eps);
    kl_pq += pi * std::log(pi / qi);
    kl_qp += qi * std::log(qi / pi);
  }
  return 0.5 * (kl_pq + kl_qp);
}

Tensor symmetric_kl_loss(const Tensor& logits_a, const Tensor& logits_b) {
  // 0.5 * sum (p - q)(log p - log q), averaged over rows.
  Tensor lp = log_softmax(logits_a);
  Tensor lq = log_softmax(logits_b);
  Tensor diff = sub(exp(lp), exp(lq));
  Tensor ldiff = sub(lp, lq);
  return scale(sum(mul(diff, ldiff)), 0.5 / logits_a.rows());
}

Tensor dropout(const Tensor& x, double p, RngStream& rng, bool training) {
  if (p < 0 || p >= 1) throw ValueError("dropout: p must be in [0,1)");
  if (!training || p == 0) return x;
  std::vector<double> mask(x.values().size());
  double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.next_uniform() < p ? 0.0 : keep_scale;
  return mul(x, Tensor::from(x.shape(), std::move(mask), false));
}

double concrete_mask_value(double p, double u, double t, double eps) {
  double logit = std::log(p + eps) - std::log(1.0 - p + eps) +
                 std::log(u + eps) - std::log(1.0 - u + eps);
  return 1.0 / (1.0 + std::exp(-logit / t));
}

namespace {

// d z / d p_logit at mask value z, drop prob p.
double concrete_mask_dpl(double z, double p, double t, double eps) {
  double dz_dlogit = z * (1.0 - z) / t;
  double dlogit_dp = 1.0 / (p + eps) + 1.0 / (1.0 - p + eps);
  double dp_dpl = p * (1.0 - p);
  return dz_dlogit * dlogit_dp * dp_dpl;
}

}  // namespace

ConcreteDropoutResult concrete_dropout(const Tensor& x, const Tensor& p_logit,
                                       double t, RngStream& rng,
                                       const Tensor& next_weights,
                                       int input_dim, bool training,
                                       double weight_reg, double dropout_reg) {
  if (t <= 0) throw ValueError("concrete_dropout: temperature must be > 0");
  const double eps = 1e-7;
  double pl = p_logit.item();
  double p = 1.0 / (1.0 + std::exp(-pl));

  ConcreteDropoutResult res;
  if (!training) {
    res.output = x;
    res.regularizer = Tensor::scalar(0.0);
    return res;
  }

  size_t n = x.values().size();
  std::vector<double> z(n);
  for (auto& v : z) v = concrete_mask_value(p, rng.next_uniform(), t, eps);
  double retain = 1.0 - p;
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = x.values()[i] * (1.0 - z[i]) / retain;

  auto z_saved = std::make_shared<std::vector<double>>(std::move(z));
  res.output = make_op(
      x.shape(), std::move(out), {x, p_logit},
      [x, p_logit, z_saved, p, t, retain, eps](const std::vector<double>& g) {
        const auto& z = *z_saved;
        if (x.requires_grad()) {
          std::vector<double> dx(g.size());
          for (size_t i = 0; i < g.size(); ++i)
            dx[i] = g[i] * (1.0 - z[i]) / retain;
          accumulate_grad(x, dx);
        }
        if (p_logit.requires_grad()) {
          double dp_dpl = p * (1.0 - p);
          double dpl = 0;
          for (size_t i = 0; i < g.size(); ++i) {
            double dz = concrete_mask_dpl(z[i], p, t, eps);
            // out = x (1-z)/(1-p): product rule over z(pl) and p(pl).
            dpl += g[i] * x.values()[i] *
                   (-dz / retain + (1.0 - z[i]) / (retain * retain) * dp_dpl);
          }
          accumulate_grad(p_logit, {dpl});
        }
      });

  // weight_reg * sum(W^2)/(1-p) + dropout_reg * D * (p log p + (1-p)log(1-p))
  Tensor ssq = sum_sq(next_weights);
  double entropy = p * std::log(p) + (1.0 - p) * std::log(1.0 - p);
  double reg_val = weight_reg * ssq.item() / retain +
                   dropout_reg * input_dim * entropy;
  res.regularizer = make_op(
      {1}, {reg_val}, {ssq, p_logit},
      [ssq, p_logit, p, retain, weight_reg, dropout_reg,
       input_dim](const std::vector<double>& g) {
        if (ssq.requires_grad()) accumulate_grad(ssq, {g[0] * weight_reg / retain});
        if (p_logit.requires_grad()) {
          double dp = weight_reg * ssq.item() / (retain * retain) +
                      dropout_reg * input_dim * (std::log(p) - std::log(1.0 - p));
          accumulate_grad(p_logit, {g[0] * dp * p * (1.0 - p)});
        }
      });
  return res;
}

Tensor dropblock(const Tensor& x, double p, int block_size, RngStream& rng,
                 bool training) {
  if (block_size <= 0 || block_size % 2 == 0)
    throw ValueError("dropblock: block_size must be odd and positive");
  if (p < 0 || p > 1) throw ValueError("dropblock: p must be in [0,1]");
  if (!training || p == 0) return x;
  int rows = x.rows(), w = x.cols();
  int half = block_size / 2;
  std::vector<double> seed(static_cast<size_t>(rows) * w);
  for (auto& s : seed) s = rng.next_uniform() < p ? 1.0 : 0.0;
  // Max window along the feature axis, then invert.
  std::vector<double> mask(seed.size(), 1.0);
  for (int i = 0; i < rows; ++i) {
    const double* srow = seed.data() + static_cast<size_t>(i) * w;
    double* mrow = mask.data() + static_cast<size_t>(i) * w;
    for (int j = 0; j < w; ++j) {
      int lo = std::max(0, j - half), hi = std::min(w - 1, j + half);
      double mx = 0;
      for (int c = lo; c <= hi; ++c) mx = std::max(mx, srow[c]);
      mrow[j] = 1.0 - mx;
    }
  }
  return mul(x, Tensor::from(x.shape(), std::move(mask), false));
}

}  // namespace smdk
