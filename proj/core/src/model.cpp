#include "smdk/model.hpp"

#include <cmath>

namespace smdk {

namespace {
uint64_t mix_seed(uint64_t seed, int layer) {
  uint64_t v[2] = {seed, static_cast<uint64_t>(layer)};
  return fnv1a64(v, sizeof(v));
}
}  // namespace

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.init_seed = seed;
  RngStream base(seed, "model-init");
  {
    auto s = base.fork("tok-emb");
    m.tok_emb = Tensor::randn({cfg.vocab, cfg.d_model}, s, 0.02, true);
  }
  {
    auto s = base.fork("pos-emb");
    m.pos_emb = Tensor::randn({cfg.seq_len, cfg.d_model}, s, 0.02, true);
  }
  auto mask = cfg.effective_moe_mask();
  m.frozen_routers.resize(static_cast<size_t>(cfg.n_layers));
  m.learned_routers.resize(static_cast<size_t>(cfg.n_layers));
  m.concrete_p_logits.resize(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = Tensor::full({cfg.d_model}, 1.0, true);
    lp.ln1_b = Tensor::zeros({cfg.d_model}, true);
    lp.ln2_g = Tensor::full({cfg.d_model}, 1.0, true);
    lp.ln2_b = Tensor::zeros({cfg.d_model}, true);
    {
      auto s = base.fork("attn-" + std::to_string(l));
      lp.attn = AttentionParams::init(cfg.d_model, s);
    }
    // The same dense MLP draw backs both dense and modulized layers, so all
    // methods start from identical weights given the same seed.
    auto s = base.fork("mlp-" + std::to_string(l));
    DenseMlp dense = DenseMlp::init(cfg.d_model, cfg.d_ff, s);
    lp.is_moe = mask[static_cast<size_t>(l)] != 0;
    if (lp.is_moe) {
      lp.experts = modulize(dense, cfg.n_experts);
      uint64_t rseed = mix_seed(seed, l);
      if (cfg.method == Method::kSmoeDropout) {
        m.frozen_routers[static_cast<size_t>(l)] =
            router_init(cfg.d_model, cfg.n_experts, rseed, cfg.router_init_scale);
      } else if (cfg.method == Method::kSmoeLearned) {
        m.learned_routers[static_cast<size_t>(l)] = TrainableRouter::init(
            cfg.d_model, cfg.n_experts, rseed, cfg.router_init_scale);
      }
      // THOR needs no router.
    } else {
      lp.mlp = dense;
      if (cfg.method == Method::kConcrete) {
        // init_min = init_max = 0.1 => p_logit = logit(0.1)
        double pl = std::log(0.1) - std::log(0.9);
        m.concrete_p_logits[static_cast<size_t>(l)] = Tensor::scalar(pl, true);
      }
    }
    m.layers.push_back(std::move(lp));
  }
  m.lnf_g = Tensor::full({cfg.d_model}, 1.0, true);
  m.lnf_b = Tensor::zeros({cfg.d_model}, true);
  {
    // Small output head: logits start near zero, so the untrained model sits
    // at the log2(vocab) bits-per-byte baseline.
    auto s = base.fork("out-proj");
    m.w_out = Tensor::randn({cfg.d_model, cfg.vocab}, s,
                            0.1 / std::sqrt(static_cast<double>(cfg.d_model)), true);
  }
  m.b_out = Tensor::zeros({cfg.vocab}, true);

  // Snap every initial value to float32 so a checkpoint round trip is exact
  // at step 0 and never-updated tensors (the frozen router) stay bitwise
  // stable across any number of save/load cycles.
  for (auto& [name, t] : m.named_tensors())
    for (double& v : t.mutable_values())
      v = static_cast<double>(static_cast<float>(v));
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.push_back({"tok_emb", tok_emb});
  out.push_back({"pos_emb", pos_emb});
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    std::string p = "layer." + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", lp.ln1_g});
    out.push_back({p + "ln1.b", lp.ln1_b});
    out.push_back({p + "ln2.g", lp.ln2_g});
    out.push_back({p + "ln2.b", lp.ln2_b});
    out.push_back({p + "attn.wq", lp.attn.wq});
    out.push_back({p + "attn.bq", lp.attn.bq});
    out.push_back({p + "attn.wk", lp.attn.wk});
    out.push_back({p + "attn.bk", lp.attn.bk});
    out.push_back({p + "attn.wv", lp.attn.wv});
    out.push_back({p + "attn.bv", lp.attn.bv});
    out.push_back({p + "attn.wo", lp.attn.wo});
    out.push_back({p + "attn.bo", lp.attn.bo});
    if (lp.is_moe) {
      for (int j = 0; j < static_cast<int>(lp.experts.experts.size()); ++j) {
        std::string e = p + "expert." + std::to_string(j) + ".";
        out.push_back({e + "w1", lp.experts.experts[static_cast<size_t>(j)].w1});
        out.push_back({e + "b1", lp.experts.experts[static_cast<size_t>(j)].b1});
        out.push_back({e + "w2", lp.experts.experts[static_cast<size_t>(j)].w2});
      }
      out.push_back({p + "expert.b2", lp.experts.b2});
      if (frozen_routers[l].g.defined())
        out.push_back({p + "router.g", frozen_routers[l].g});
      if (learned_routers[l].g.defined())
        out.push_back({p + "router.g", learned_routers[l].g});
    } else {
      out.push_back({p + "mlp.w1", lp.mlp.w1});
      out.push_back({p + "mlp.b1", lp.mlp.b1});
      out.push_back({p + "mlp.w2", lp.mlp.w2});
      out.push_back({p + "mlp.b2", lp.mlp.b2});
      if (concrete_p_logits[l].defined())
        out.push_back({p + "concrete.p_logit", concrete_p_logits[l]});
    }
  }
  out.push_back({"lnf.g", lnf_g});
  out.push_back({"lnf.b", lnf_b});
  out.push_back({"w_out", w_out});
  out.push_back({"b_out", b_out});
  return out;
}

std::vector<Tensor> Model::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

int64_t Model::trainable_param_count() const {
  int64_t total = 0;
  for (auto& [name, t] : named_tensors()) {
    if (name.find("router.") != std::string::npos) continue;
    if (name.find("concrete.") != std::string::npos) continue;
    total += t.numel();
  }
  return total;
}

int64_t Model::router_param_count() const {
  int64_t total = 0;
  for (auto& [name, t] : named_tensors())
    if (name.find("router.") != std::string::npos) total += t.numel();
  return total;
}

int64_t Model::aux_param_count() const {
  int64_t total = 0;
  for (auto& [name, t] : named_tensors())
    if (name.find("concrete.") != std::string::npos) total += t.numel();
  return total;
}

uint64_t Model::router_checksum() const {
  uint64_t h = 14695981039346656037ull;
  for (auto& [name, t] : named_tensors())
    if (name.find("router.") != std::string::npos)
      h = fnv1a64(t.values().data(), t.values().size() * sizeof(double), h);
  return h;
}

Tensor Model::forward(const std::vector<int>& tokens, ForwardCtx& ctx) {
  if (static_cast<int>(tokens.size()) > cfg.seq_len)
    throw ValueError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds configured " + std::to_string(cfg.seq_len));
  int k = ctx.k > 0 ? ctx.k : cfg.n_experts;
  Tensor x = embed(tokens, tok_emb, pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& lp = layers[l];
    x = add(x, causal_attention(layernorm(x, lp.ln1_g, lp.ln1_b), lp.attn,
                                cfg.n_heads));
    Tensor t = layernorm(x, lp.ln2_g, lp.ln2_b);
    Tensor mlp_out;
    if (!lp.is_moe) {
      Tensor h = apply_activation(add_rowvec(matmul(t, lp.mlp.w1), lp.mlp.b1),
                                  cfg.activation);
      switch (cfg.method) {
        case Method::kDenseDropout:
          if (ctx.dropout_rng)
            h = dropout(h, cfg.dropout_p, *ctx.dropout_rng, ctx.training);
          break;
        case Method::kConcrete: {
          if (ctx.dropout_rng && concrete_p_logits[l].defined()) {
            auto cd = concrete_dropout(h, concrete_p_logits[l], 0.1,
                                       *ctx.dropout_rng, lp.mlp.w2, cfg.d_ff,
                                       ctx.training);
            h = cd.output;
            ctx.aux_regularizer = ctx.aux_regularizer.defined()
                                      ? add(ctx.aux_regularizer, cd.regularizer)
                                      : cd.regularizer;
          }
          break;
        }
        case Method::kDropBlock:
          if (ctx.dropout_rng)
            h = dropblock(h, cfg.dropout_p, cfg.dropblock_size,
                          *ctx.dropout_rng, ctx.training);
          break;
        default:
          break;
      }
      mlp_out = add_rowvec(matmul(h, lp.mlp.w2), lp.mlp.b2);
    } else if (cfg.method == Method::kThor) {
      if (!ctx.thor_rng) throw ValueError("forward: thor method needs thor_rng");
      auto [a, b] = thor_route(*ctx.thor_rng, cfg.n_experts);
      RoutingDecision dec;
      dec.k = 2;
      dec.indices.assign(tokens.size(), {a, b});
      dec.gates.assign(tokens.size(), {0.5, 0.5});
      if (ctx.decisions) ctx.decisions->push_back(dec);
      mlp_out = moe_combine(t, Tensor(), lp.experts, dec, cfg.activation,
                            ctx.unit_gate_override);
    } else {
      const Tensor& g = cfg.method == Method::kSmoeLearned
                            ? learned_routers[l].g
                            : frozen_routers[l].g;
      Tensor probs = router_probs(t, g);
      RoutingDecision dec = decide_topk(probs, k);
      if (ctx.decisions) ctx.decisions->push_back(dec);
      if (ctx.probs_out) ctx.probs_out->push_back(probs);
      mlp_out = moe_combine(t, probs, lp.experts, dec, cfg.activation,
                            ctx.unit_gate_override);
    }
    x = add(x, mlp_out);
  }
  x = layernorm(x, lnf_g, lnf_b);
  return add_rowvec(matmul(x, w_out), b_out);
}

Tensor transformer_forward(Model& model, const std::vector<int>& tokens,
                           ForwardCtx& ctx) {
  return model.forward(tokens, ctx);
}

}  // namespace smdk
