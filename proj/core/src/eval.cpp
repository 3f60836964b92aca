#include "smdk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace smdk {

namespace {
std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string EvalReport::to_csv() const {
  std::string s = "method,seed,k,activated_params,flops_per_token,val_bpc\n";
  for (const auto& e : entries) {
    s += method + "," + std::to_string(seed) + "," + std::to_string(e.k) + "," +
         std::to_string(e.activated_params) + "," +
         std::to_string(e.analytic_flops_per_token) + "," + fmt_g(e.val_bpc) +
         "\n";
  }
  return s;
}

int64_t activated_param_count(const ModelConfig& cfg, int k) {
  int64_t d = cfg.d_model, v = cfg.vocab;
  int64_t always = static_cast<int64_t>(v) * d + static_cast<int64_t>(cfg.seq_len) * d;  // embeddings
  auto mask = cfg.effective_moe_mask();
  int64_t h = cfg.d_ff / cfg.n_experts;
  for (int l = 0; l < cfg.n_layers; ++l) {
    always += 4 * d;           // two layernorms
    always += 4 * d * d + 4 * d;  // attention
    if (mask[static_cast<size_t>(l)]) {
      always += d;  // shared expert output bias
      if (cfg.method != Method::kThor) always += d * static_cast<int64_t>(cfg.n_experts);  // router
      always += static_cast<int64_t>(k) * (d * h + h + h * d);
    } else {
      always += 2 * d * cfg.d_ff + cfg.d_ff + d;
    }
  }
  always += 2 * d;           // final layernorm
  always += d * v + v;       // output head
  return always;
}

int64_t count_flops(const ModelConfig& cfg, int k, int seq_len) {
  int64_t d = cfg.d_model;
  int64_t flops = d;  // positional add
  auto mask = cfg.effective_moe_mask();
  int64_t h = cfg.d_ff / cfg.n_experts;
  for (int l = 0; l < cfg.n_layers; ++l) {
    flops += 2 * 5 * d;                      // layernorms
    flops += 8 * d * d + 4 * d;              // QKV + output projections
    flops += 4 * static_cast<int64_t>(seq_len) * d;  // scores + mix
    if (mask[static_cast<size_t>(l)]) {
      flops += 2 * d * cfg.n_experts;                       // router
      flops += static_cast<int64_t>(k) * (4 * d * h + h);   // selected experts
      flops += d;                                           // shared bias
    } else {
      flops += 4 * d * cfg.d_ff + cfg.d_ff + d;
    }
  }
  flops += 5 * d;
  flops += 2 * d * cfg.vocab + cfg.vocab;
  return flops;
}

EvalReport slimmable_sweep(const Checkpoint& ckpt,
                           const std::vector<uint8_t>& data,
                           const std::vector<int>& ks, int max_windows) {
  EvalReport rep;
  rep.method = method_to_string(ckpt.model_cfg.method);
  rep.seed = ckpt.init_seed;
  char id[32];
  std::snprintf(id, sizeof(id), "%016llx",
                static_cast<unsigned long long>(ckpt.payload_checksum()));
  rep.checkpoint_id = id;
  std::vector<int> sorted = ks;
  std::sort(sorted.begin(), sorted.end());
  for (int k : sorted) {
    if (k < 1 || k > ckpt.model_cfg.n_experts)
      throw ValueError("slimmable_sweep: k=" + std::to_string(k) +
                       " out of range [1," +
                       std::to_string(ckpt.model_cfg.n_experts) + "]");
    EvalEntry e;
    e.k = k;
    e.activated_params = activated_param_count(ckpt.model_cfg, k);
    e.analytic_flops_per_token = count_flops(ckpt.model_cfg, k, ckpt.model_cfg.seq_len);
    e.val_bpc = bpc(ckpt, data, k, 1.0, max_windows);
    rep.entries.push_back(e);
  }
  return rep;
}

VoteTally vote_experts(const Checkpoint& ckpt, const std::vector<uint8_t>& data,
                       int k, int max_windows) {
  if (!method_uses_experts(ckpt.model_cfg.method))
    throw ValueError("vote_experts: no experts in a dense checkpoint");
  Model model = ckpt.to_model();
  auto mask = ckpt.model_cfg.effective_moe_mask();
  int moe_layers = 0;
  for (uint8_t m : mask) moe_layers += m ? 1 : 0;
  VoteTally tally;
  tally.k_used = k;
  tally.counts.assign(static_cast<size_t>(moe_layers),
                      std::vector<int64_t>(static_cast<size_t>(ckpt.model_cfg.n_experts), 0));
  BatchIterator it(data, ckpt.model_cfg.seq_len, 1, 1.0, ckpt.init_seed);
  auto windows = it.val_windows(max_windows);
  RngStream thor_rng(ckpt.init_seed, "thor-eval");
  for (auto& [in, tg] : windows) {
    ForwardCtx ctx;
    ctx.k = k;
    ctx.training = false;
    ctx.thor_rng = &thor_rng;
    std::vector<RoutingDecision> decisions;
    ctx.decisions = &decisions;
    model.forward(in, ctx);
    for (size_t l = 0; l < decisions.size(); ++l)
      for (const auto& ids : decisions[l].indices)
        for (int j : ids) tally.counts[l][static_cast<size_t>(j)] += 1;
    tally.tokens_seen += static_cast<int64_t>(in.size());
  }
  return tally;
}

Checkpoint select_subnetwork(const Checkpoint& ckpt, const VoteTally& tally,
                             int m) {
  const ModelConfig& old_cfg = ckpt.model_cfg;
  int n = old_cfg.n_experts;
  if (m < 1 || m > n)
    throw ValueError("select_subnetwork: m=" + std::to_string(m) +
                     " out of range [1," + std::to_string(n) + "]");
  if (!method_uses_experts(old_cfg.method))
    throw ValueError("select_subnetwork: no experts in a dense checkpoint");

  // Per MoE layer: m highest-count experts, ties by lowest index, kept in
  // ascending id order so m == N is the identity.
  auto mask = old_cfg.effective_moe_mask();
  std::vector<std::vector<int>> kept_per_layer(static_cast<size_t>(old_cfg.n_layers));
  int moe_idx = 0;
  for (int l = 0; l < old_cfg.n_layers; ++l) {
    if (!mask[static_cast<size_t>(l)]) continue;
    const auto& counts = tally.counts.at(static_cast<size_t>(moe_idx++));
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
    });
    idx.resize(static_cast<size_t>(m));
    std::sort(idx.begin(), idx.end());
    kept_per_layer[static_cast<size_t>(l)] = std::move(idx);
  }

  ModelConfig new_cfg = old_cfg;
  new_cfg.n_experts = m;
  new_cfg.d_ff = m * (old_cfg.d_ff / n);
  int d = old_cfg.d_model;

  std::map<std::string, size_t> old_index;
  for (size_t i = 0; i < ckpt.tensors.size(); ++i)
    old_index[ckpt.tensors[i].first] = i;

  Checkpoint out;
  out.model_cfg = new_cfg;
  out.init_seed = ckpt.init_seed;
  out.step = ckpt.step;
  out.config_echo = ckpt.config_echo;

  // Walk the new model's tensor layout and fill from the old payload.
  Model skeleton = Model::init(new_cfg, ckpt.init_seed);
  for (auto& [name, t] : skeleton.named_tensors()) {
    std::vector<float> buf;
    size_t dot = name.find(".expert.");
    if (dot != std::string::npos && name.find(".expert.b2") == std::string::npos) {
      int layer = std::stoi(name.substr(6));
      size_t rest = dot + 8;
      size_t dot2 = name.find('.', rest);
      int new_j = std::stoi(name.substr(rest, dot2 - rest));
      int old_j = kept_per_layer[static_cast<size_t>(layer)][static_cast<size_t>(new_j)];
      std::string old_name = name.substr(0, rest) + std::to_string(old_j) +
                             name.substr(dot2);
      buf = ckpt.tensors[old_index.at(old_name)].second;
    } else if (name.find("router.g") != std::string::npos) {
      int layer = std::stoi(name.substr(6));
      const auto& old_g = ckpt.tensors[old_index.at(name)].second;
      const auto& kept = kept_per_layer[static_cast<size_t>(layer)];
      buf.resize(static_cast<size_t>(d) * m);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < m; ++c)
          buf[static_cast<size_t>(r) * m + c] =
              old_g[static_cast<size_t>(r) * n + kept[static_cast<size_t>(c)]];
    } else {
      buf = ckpt.tensors[old_index.at(name)].second;
    }
    out.tensors.push_back({name, std::move(buf)});
    out.shapes.push_back(t.shape());
  }
  return out;
}

DistillResult distill(const Checkpoint& teacher, const ModelConfig& student_cfg,
                      const std::vector<uint8_t>& data, const DistillConfig& dc,
                      const Checkpoint* student_init) {
  Model teacher_model = teacher.to_model();
  Model student = student_init ? student_init->to_model()
                               : Model::init(student_cfg, dc.seed);
  std::vector<Tensor> params = student.trainable_tensors();
  AdamState adam(params);
  BatchIterator batches(data, student.cfg.seq_len, dc.batch, dc.val_fraction,
                        dc.seed);
  LrSchedule lrs{dc.lr0, dc.steps, LrDecay::kCosine};
  RngStream thor_rng(dc.seed, "thor-eval");
  double temp = dc.temperature;
  int rows = student.cfg.seq_len;
  int vocab = student.cfg.vocab;

  DistillResult res;
  for (int s = 0; s < dc.steps; ++s) {
    Batch b = batches.next();
    double lr = lr_at(lrs, s);
    double ce_acc = 0, kl_acc = 0;
    for (int w = 0; w < dc.batch; ++w) {
      const auto& in = b.inputs[static_cast<size_t>(w)];
      // Soft targets: teacher logits at full capacity, temperature-softened.
      ForwardCtx tctx;
      tctx.training = false;
      tctx.thor_rng = &thor_rng;
      Tensor tlogits = teacher_model.forward(in, tctx);
      std::vector<double> p(static_cast<size_t>(rows) * vocab);
      std::vector<double> logp(p.size());
      for (int i = 0; i < rows; ++i) {
        const double* row = tlogits.values().data() + static_cast<size_t>(i) * vocab;
        double mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < vocab; ++j) sum += std::exp((row[j] - mx) / temp);
        double lse = mx / temp + std::log(sum);
        for (int j = 0; j < vocab; ++j) {
          double lp = row[j] / temp - lse;
          logp[static_cast<size_t>(i) * vocab + j] = lp;
          p[static_cast<size_t>(i) * vocab + j] = std::exp(lp);
        }
      }
      Tensor p_t = Tensor::from({rows, vocab}, std::move(p), false);
      Tensor logp_t = Tensor::from({rows, vocab}, std::move(logp), false);

      ForwardCtx sctx;
      sctx.training = true;
      sctx.thor_rng = &thor_rng;
      Tensor slogits = student.forward(in, sctx);
      Tensor ce = cross_entropy(slogits, b.targets[static_cast<size_t>(w)]);
      Tensor lq = log_softmax(scale(slogits, 1.0 / temp));
      Tensor kl = scale(sum(mul(p_t, sub(logp_t, lq))), 1.0 / rows);
      Tensor loss = add(scale(ce, dc.alpha),
                        scale(kl, (1.0 - dc.alpha) * temp * temp));
      double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("distill: non-finite loss at step " + std::to_string(s));
      ce_acc += ce.item() / dc.batch;
      kl_acc += kl.item() / dc.batch;
      backward(scale(loss, 1.0 / dc.batch));
    }
    adam.step(params, lr, Optimizer::kAdam, 0.9, 0.999, 1e-8, 0.0, s + 1);
    for (auto& p : params) p.zero_grad();
    res.ce_loss_log.push_back(ce_acc);
    res.kl_loss_log.push_back(kl_acc);
  }
  res.checkpoint = Checkpoint::from_model(student, dc.steps, teacher.config_echo);
  return res;
}

void write_sweep_svg(const EvalReport& report, const std::string& path) {
  double min_bpc = 1e30, max_bpc = -1e30;
  int64_t min_p = INT64_MAX, max_p = 0;
  for (const auto& e : report.entries) {
    min_bpc = std::min(min_bpc, e.val_bpc);
    max_bpc = std::max(max_bpc, e.val_bpc);
    min_p = std::min(min_p, e.activated_params);
    max_p = std::max(max_p, e.activated_params);
  }
  double pad_b = std::max(0.05, (max_bpc - min_bpc) * 0.1);
  min_bpc -= pad_b;
  max_bpc += pad_b;
  const int w = 640, h = 420, ml = 70, mb = 50, mt = 20, mr = 20;
  auto sx = [&](int64_t p) {
    double f = max_p > min_p
                   ? static_cast<double>(p - min_p) / static_cast<double>(max_p - min_p)
                   : 0.5;
    return ml + f * (w - ml - mr);
  };
  auto sy = [&](double b) {
    double f = (b - min_bpc) / (max_bpc - min_bpc);
    return (h - mb) - f * (h - mb - mt);
  };
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='"
      << h << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<line x1='" << ml << "' y1='" << (h - mb) << "' x2='" << (w - mr)
      << "' y2='" << (h - mb) << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='"
      << (h - mb) << "' stroke='black'/>\n";
  svg << "<text x='" << (w / 2) << "' y='" << (h - 12)
      << "' text-anchor='middle' font-size='13'>activated parameters</text>\n";
  svg << "<text x='16' y='" << (h / 2)
      << "' text-anchor='middle' font-size='13' transform='rotate(-90 16 "
      << (h / 2) << ")'>validation BPC</text>\n";
  svg << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
  for (const auto& e : report.entries)
    svg << sx(e.activated_params) << "," << sy(e.val_bpc) << " ";
  svg << "'/>\n";
  for (const auto& e : report.entries) {
    svg << "<circle cx='" << sx(e.activated_params) << "' cy='" << sy(e.val_bpc)
        << "' r='4' fill='steelblue'/>\n";
    svg << "<text x='" << sx(e.activated_params) << "' y='"
        << sy(e.val_bpc) - 8 << "' text-anchor='middle' font-size='11'>k="
        << e.k << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream f(path);
  if (!f) throw ValueError("cannot write plot: " + path);
  f << svg.str();
}

}  // namespace smdk
