#include "smdk/nn.hpp"

#include <cmath>

namespace smdk {

Method method_from_string(const std::string& s) {
  if (s == "dense_dropout") return Method::kDenseDropout;
  if (s == "concrete") return Method::kConcrete;
  if (s == "dropblock") return Method::kDropBlock;
  if (s == "smoe_learned") return Method::kSmoeLearned;
  if (s == "thor") return Method::kThor;
  if (s == "smoe_dropout") return Method::kSmoeDropout;
  throw ValueError("unknown method: " + s);
}

std::string method_to_string(Method m) {
  switch (m) {
    case Method::kDenseDropout: return "dense_dropout";
    case Method::kConcrete: return "concrete";
    case Method::kDropBlock: return "dropblock";
    case Method::kSmoeLearned: return "smoe_learned";
    case Method::kThor: return "thor";
    case Method::kSmoeDropout: return "smoe_dropout";
  }
  throw ValueError("bad method enum");
}

bool method_uses_experts(Method m) {
  return m == Method::kSmoeLearned || m == Method::kThor ||
         m == Method::kSmoeDropout;
}

std::vector<uint8_t> ModelConfig::effective_moe_mask() const {
  if (!method_uses_experts(method))
    return std::vector<uint8_t>(static_cast<size_t>(n_layers), 0);
  if (moe_layer_mask.empty())
    return std::vector<uint8_t>(static_cast<size_t>(n_layers), 1);
  return moe_layer_mask;
}

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 ||
      n_experts <= 0 || vocab <= 0 || seq_len <= 0)
    throw ValueError("model config: all dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ValueError("model config: d_model " + std::to_string(d_model) +
                     " not divisible by n_heads " + std::to_string(n_heads));
  auto mask = effective_moe_mask();
  if (mask.size() != static_cast<size_t>(n_layers))
    throw ValueError("model config: moe_layer_mask length != n_layers");
  bool any_moe = false;
  for (uint8_t m : mask) any_moe |= (m != 0);
  if (any_moe && d_ff % n_experts != 0)
    throw ValueError("model config: d_ff " + std::to_string(d_ff) +
                     " not divisible by n_experts " + std::to_string(n_experts));
  if (any_moe != method_uses_experts(method))
    throw ValueError("model config: moe_layer_mask inconsistent with method " +
                     method_to_string(method));
}

DenseMlp DenseMlp::init(int d_model, int d_ff, RngStream& stream) {
  DenseMlp m;
  double s1 = 1.0 / std::sqrt(static_cast<double>(d_model));
  double s2 = 1.0 / std::sqrt(static_cast<double>(d_ff));
  m.w1 = Tensor::randn({d_model, d_ff}, stream, s1, true);
  m.b1 = Tensor::zeros({d_ff}, true);
  m.w2 = Tensor::randn({d_ff, d_model}, stream, s2, true);
  m.b2 = Tensor::zeros({d_model}, true);
  return m;
}

int64_t DenseMlp::param_count() const {
  return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

AttentionParams AttentionParams::init(int d_model, RngStream& stream) {
  AttentionParams p;
  double s = 1.0 / std::sqrt(static_cast<double>(d_model));
  p.wq = Tensor::randn({d_model, d_model}, stream, s, true);
  p.wk = Tensor::randn({d_model, d_model}, stream, s, true);
  p.wv = Tensor::randn({d_model, d_model}, stream, s, true);
  p.wo = Tensor::randn({d_model, d_model}, stream, s, true);
  p.bq = Tensor::zeros({d_model}, true);
  p.bk = Tensor::zeros({d_model}, true);
  p.bv = Tensor::zeros({d_model}, true);
  p.bo = Tensor::zeros({d_model}, true);
  return p;
}

Tensor embed(const std::vector<int>& tokens, const Tensor& table,
             const Tensor& pos_table) {
  if (static_cast<int>(tokens.size()) > pos_table.rows())
    throw ValueError("embed: sequence longer than positional table (" +
                     std::to_string(tokens.size()) + " > " +
                     std::to_string(pos_table.rows()) + ")");
  Tensor tok = gather_rows(table, tokens);
  std::vector<int> pos(tokens.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  return add(tok, gather_rows(pos_table, pos));
}

Tensor causal_attention(const Tensor& x, const AttentionParams& p, int n_heads) {
  int d = x.cols();
  int hd = d / n_heads;
  Tensor q = add_rowvec(matmul(x, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(x, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(x, p.wv), p.bv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, hd);
    Tensor kh = slice_cols(k, h * hd, hd);
    Tensor vh = slice_cols(v, h * hd, hd);
    Tensor att = causal_softmax(scale(matmul(qh, transpose(kh)), sc));
    heads.push_back(matmul(att, vh));
  }
  return add_rowvec(matmul(concat_cols(heads), p.wo), p.bo);
}

Tensor apply_activation(const Tensor& x, Activation act) {
  return act == Activation::kGelu ? gelu(x) : relu(x);
}

Tensor dense_mlp_forward(const Tensor& x, const DenseMlp& mlp, Activation act) {
  Tensor h = apply_activation(add_rowvec(matmul(x, mlp.w1), mlp.b1), act);
  return add_rowvec(matmul(h, mlp.w2), mlp.b2);
}

}  // namespace smdk
