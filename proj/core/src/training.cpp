#include "smdk/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace smdk {

using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  ksched.validate();
  if (steps > 0 && ksched.total_steps != steps)
    throw ValueError("train config: ksched.total_steps != steps");
  if (batch < 1) throw ValueError("train config: batch must be >= 1");
  if (steps < 0) throw ValueError("train config: steps must be >= 0");
  if (lr0 <= 0) throw ValueError("train config: lr0 must be > 0");
  if (val_fraction <= 0 || val_fraction >= 1)
    throw ValueError("train config: val_fraction must be in (0,1)");
  if (method_uses_experts(model.method) &&
      (ksched.k_max > model.n_experts || ksched.k_max < 1))
    throw ValueError("train config: k_max must be in [1,N]");
}

AdamState::AdamState(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    m_.emplace_back(p.values().size(), 0.0);
    v_.emplace_back(p.values().size(), 0.0);
  }
}

void AdamState::step(const std::vector<Tensor>& params, double lr,
                     Optimizer opt, double beta1, double beta2, double eps,
                     double weight_decay, int step_num) {
  if (params.size() != m_.size())
    throw ShapeError("adam: parameter count changed");
  double bc1 = 1.0 - std::pow(beta1, step_num);
  double bc2 = 1.0 - std::pow(beta2, step_num);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = const_cast<Tensor&>(params[i]);
    auto& w = p.mutable_values();
    if (m_[i].size() != w.size()) throw ShapeError("adam: state shape mismatch");
    const std::vector<double>* g = nullptr;
    std::vector<double> zeros;
    if (p.has_grad()) {
      g = &p.grad();
    } else {
      zeros.assign(w.size(), 0.0);
      g = &zeros;
    }
    for (size_t j = 0; j < w.size(); ++j) {
      double grad = (*g)[j];
      if (opt == Optimizer::kAdam && weight_decay != 0.0)
        grad += weight_decay * w[j];  // classic L2
      m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * grad;
      v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * grad * grad;
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      if (opt == Optimizer::kAdamW && weight_decay != 0.0)
        w[j] -= lr * weight_decay * w[j];  // decoupled
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

BatchIterator::BatchIterator(const std::vector<uint8_t>& corpus, int seq_len,
                             int batch, double val_fraction, uint64_t seed)
    : corpus_(corpus),
      seq_len_(seq_len),
      batch_(batch),
      shuffle_rng_(seed, "batch-shuffle") {
  if (corpus.size() < static_cast<size_t>(seq_len) + 2)
    throw ValueError("corpus too short: " + std::to_string(corpus.size()) +
                     " bytes for seq_len " + std::to_string(seq_len));
  train_len_ = static_cast<size_t>(
      std::floor((1.0 - val_fraction) * static_cast<double>(corpus.size())));
  // Training windows need bytes [p, p+seq_len] entirely inside the prefix.
  for (size_t p = 0; p + static_cast<size_t>(seq_len_) + 1 <= train_len_;
       p += static_cast<size_t>(seq_len_))
    positions_.push_back(p);
  if (!positions_.empty()) reshuffle();
}

void BatchIterator::reshuffle() {
  // Fisher-Yates with the deterministic stream.
  for (size_t i = positions_.size() - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(shuffle_rng_.next_u64() % (i + 1));
    std::swap(positions_[i], positions_[j]);
  }
  cursor_ = 0;
}

Batch BatchIterator::next() {
  if (positions_.empty()) throw ValueError("no training windows available");
  Batch b;
  for (int i = 0; i < batch_; ++i) {
    if (cursor_ >= positions_.size()) reshuffle();
    size_t p = positions_[cursor_++];
    std::vector<int> in(static_cast<size_t>(seq_len_));
    std::vector<int> tg(static_cast<size_t>(seq_len_));
    for (int j = 0; j < seq_len_; ++j) {
      in[static_cast<size_t>(j)] = corpus_[p + static_cast<size_t>(j)];
      tg[static_cast<size_t>(j)] = corpus_[p + static_cast<size_t>(j) + 1];
    }
    b.inputs.push_back(std::move(in));
    b.targets.push_back(std::move(tg));
  }
  return b;
}

std::vector<std::pair<std::vector<int>, std::vector<int>>>
BatchIterator::val_windows(int max_windows) const {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
  for (size_t p = train_len_;
       p + static_cast<size_t>(seq_len_) + 1 <= corpus_.size();
       p += static_cast<size_t>(seq_len_)) {
    std::vector<int> in(static_cast<size_t>(seq_len_));
    std::vector<int> tg(static_cast<size_t>(seq_len_));
    for (int j = 0; j < seq_len_; ++j) {
      in[static_cast<size_t>(j)] = corpus_[p + static_cast<size_t>(j)];
      tg[static_cast<size_t>(j)] = corpus_[p + static_cast<size_t>(j) + 1];
    }
    out.push_back({std::move(in), std::move(tg)});
    if (max_windows > 0 && static_cast<int>(out.size()) >= max_windows) break;
  }
  if (out.empty()) throw ValueError("no validation windows available");
  return out;
}

namespace {

json model_cfg_to_json(const ModelConfig& c) {
  json j;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["n_experts"] = c.n_experts;
  j["vocab"] = c.vocab;
  j["seq_len"] = c.seq_len;
  j["method"] = method_to_string(c.method);
  j["activation"] = c.activation == Activation::kGelu ? "gelu" : "relu";
  j["dropout_p"] = c.dropout_p;
  j["dropblock_size"] = c.dropblock_size;
  j["router_init_scale"] = c.router_init_scale;
  j["moe_layer_mask"] = c.moe_layer_mask;
  return j;
}

ModelConfig model_cfg_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.n_experts = j.at("n_experts");
  c.vocab = j.at("vocab");
  c.seq_len = j.at("seq_len");
  c.method = method_from_string(j.at("method"));
  c.activation = j.at("activation") == "relu" ? Activation::kRelu : Activation::kGelu;
  c.dropout_p = j.at("dropout_p");
  c.dropblock_size = j.at("dropblock_size");
  c.router_init_scale = j.at("router_init_scale");
  c.moe_layer_mask = j.at("moe_layer_mask").get<std::vector<uint8_t>>();
  return c;
}

}  // namespace

Checkpoint Checkpoint::from_model(const Model& model, int step,
                                  const std::string& config_echo) {
  Checkpoint c;
  c.model_cfg = model.cfg;
  c.init_seed = model.init_seed;
  c.step = step;
  c.config_echo = config_echo;
  for (auto& [name, t] : model.named_tensors()) {
    std::vector<float> buf(t.values().size());
    for (size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(t.values()[i]);
    c.tensors.push_back({name, std::move(buf)});
    c.shapes.push_back(t.shape());
  }
  return c;
}

Model Checkpoint::to_model() const {
  Model m = Model::init(model_cfg, init_seed);
  auto named = m.named_tensors();
  if (named.size() != tensors.size())
    throw CheckpointError("checkpoint: tensor count mismatch (" +
                          std::to_string(tensors.size()) + " stored, " +
                          std::to_string(named.size()) + " expected)");
  for (size_t i = 0; i < named.size(); ++i) {
    if (named[i].first != tensors[i].first)
      throw CheckpointError("checkpoint: tensor name mismatch at index " +
                            std::to_string(i) + ": " + tensors[i].first);
    auto& vals = named[i].second.node()->values;
    if (vals.size() != tensors[i].second.size())
      throw CheckpointError("checkpoint: size mismatch for " + tensors[i].first);
    for (size_t j = 0; j < vals.size(); ++j)
      vals[j] = static_cast<double>(tensors[i].second[j]);
  }
  return m;
}

uint64_t Checkpoint::payload_checksum() const {
  uint64_t h = 14695981039346656037ull;
  for (const auto& [name, buf] : tensors)
    h = fnv1a64(buf.data(), buf.size() * sizeof(float), h);
  return h;
}

void Checkpoint::save(const std::string& path) const {
  json header;
  header["version"] = kVersion;
  header["step"] = step;
  header["init_seed"] = init_seed;
  header["config_echo"] = config_echo;
  header["model"] = model_cfg_to_json(model_cfg);
  json index = json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < tensors.size(); ++i) {
    json e;
    e["name"] = tensors[i].first;
    e["shape"] = shapes[i];
    e["offset"] = offset;
    offset += tensors[i].second.size() * sizeof(float);
    index.push_back(e);
  }
  header["tensors"] = index;
  char csum[32];
  std::snprintf(csum, sizeof(csum), "%016llx",
                static_cast<unsigned long long>(payload_checksum()));
  header["payload_fnv"] = csum;
  header["payload_bytes"] = offset;
  std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint: " + path);
  f.write("SMDK", 4);
  uint32_t ver = kVersion;
  uint32_t hlen = static_cast<uint32_t>(htext.size());
  f.write(reinterpret_cast<const char*>(&ver), 4);
  f.write(reinterpret_cast<const char*>(&hlen), 4);
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, buf] : tensors)
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw CheckpointError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "SMDK", 4) != 0)
    throw CheckpointError("bad magic in " + path);
  uint32_t ver = 0, hlen = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  f.read(reinterpret_cast<char*>(&hlen), 4);
  if (ver != kVersion)
    throw CheckpointError("version mismatch: file has " + std::to_string(ver) +
                          ", expected " + std::to_string(kVersion));
  std::string htext(hlen, '\0');
  f.read(htext.data(), hlen);
  if (!f) throw CheckpointError("truncated header in " + path);
  json header = json::parse(htext);

  Checkpoint c;
  c.step = header.at("step");
  c.init_seed = header.at("init_seed");
  c.config_echo = header.value("config_echo", "");
  c.model_cfg = model_cfg_from_json(header.at("model"));
  for (const auto& e : header.at("tensors")) {
    std::string name = e.at("name");
    Shape shape = e.at("shape").get<Shape>();
    size_t count = static_cast<size_t>(numel_of(shape));
    std::vector<float> buf(count);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (!f) throw CheckpointError("truncated payload in " + path);
    c.tensors.push_back({std::move(name), std::move(buf)});
    c.shapes.push_back(std::move(shape));
  }
  char csum[32];
  std::snprintf(csum, sizeof(csum), "%016llx",
                static_cast<unsigned long long>(c.payload_checksum()));
  if (header.at("payload_fnv") != std::string(csum))
    throw CheckpointError("payload checksum mismatch in " + path);
  return c;
}

std::string log_csv_header() {
  return "step,k,lr,train_loss_nats,val_bpc@k,val_bpc@N";
}

namespace {
std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string log_row_csv(const LogRow& row) {
  std::string s = std::to_string(row.step) + "," + std::to_string(row.k) + "," +
                  fmt_g(row.lr) + "," + fmt_g(row.train_loss_nats) + ",";
  if (row.val_bpc_at_k >= 0) s += fmt_g(row.val_bpc_at_k);
  s += ",";
  if (row.val_bpc_at_n >= 0) s += fmt_g(row.val_bpc_at_n);
  return s;
}

double validate_bpc(Model& model, const BatchIterator& batches, int k,
                    int max_windows) {
  auto windows = batches.val_windows(max_windows);
  // Deterministic per call: eval-time THOR pairs come from a fresh stream.
  RngStream thor_rng(model.init_seed, "thor-eval");
  double total = 0;
  int64_t count = 0;
  for (auto& [in, tg] : windows) {
    ForwardCtx ctx;
    ctx.k = k;
    ctx.training = false;
    ctx.thor_rng = &thor_rng;
    Tensor logits = model.forward(in, ctx);
    total += cross_entropy(logits, tg).item() * static_cast<double>(in.size());
    count += static_cast<int64_t>(in.size());
  }
  return (total / static_cast<double>(count)) / std::log(2.0);
}

TrainResult train(const TrainConfig& cfg, const std::vector<uint8_t>& corpus) {
  cfg.validate();
  Model model = Model::init(cfg.model, cfg.seed);
  std::vector<Tensor> params = model.trainable_tensors();
  AdamState adam(params);
  BatchIterator batches(corpus, cfg.model.seq_len, cfg.batch, cfg.val_fraction,
                        cfg.seed);
  RngStream dropout_rng(cfg.seed, "dropout-mask");
  RngStream thor_rng(cfg.seed, "thor-route");
  LrSchedule lrs{cfg.lr0, cfg.steps,
                 cfg.optimizer == Optimizer::kAdamW ? LrDecay::kLinear
                                                    : LrDecay::kCosine};

  TrainResult result;
  bool moe = method_uses_experts(cfg.model.method);
  int val_every = std::max(1, cfg.steps / 20);
  int n = cfg.model.n_experts;

  for (int s = 0; s < cfg.steps; ++s) {
    int k = moe ? k_at(cfg.ksched, s) : 0;
    double lr = lr_at(lrs, s);
    Batch b = batches.next();
    double step_loss = 0;
    for (int w = 0; w < cfg.batch; ++w) {
      ForwardCtx ctx;
      ctx.k = k;
      ctx.training = true;
      ctx.dropout_rng = &dropout_rng;
      ctx.thor_rng = &thor_rng;
      std::vector<RoutingDecision> decisions;
      std::vector<Tensor> probs;
      ctx.decisions = &decisions;
      ctx.probs_out = &probs;
      Tensor logits = model.forward(b.inputs[static_cast<size_t>(w)], ctx);
      Tensor loss;
      if (cfg.model.method == Method::kThor) {
        // Second independent forward pass for the consistency term.
        ForwardCtx ctx2;
        ctx2.k = k;
        ctx2.training = true;
        ctx2.dropout_rng = &dropout_rng;
        ctx2.thor_rng = &thor_rng;
        Tensor logits2 = model.forward(b.inputs[static_cast<size_t>(w)], ctx2);
        Tensor ce1 = cross_entropy(logits, b.targets[static_cast<size_t>(w)]);
        Tensor ce2 = cross_entropy(logits2, b.targets[static_cast<size_t>(w)]);
        Tensor kl = symmetric_kl_loss(logits, logits2);
        loss = add(scale(add(ce1, ce2), 0.5), scale(kl, cfg.thor_weight));
      } else {
        loss = cross_entropy(logits, b.targets[static_cast<size_t>(w)]);
        if (cfg.model.method == Method::kSmoeLearned && !probs.empty()) {
          Tensor bal;
          for (size_t l = 0; l < probs.size(); ++l) {
            Tensor bl = balance_loss_graph(probs[l], decisions[l]);
            bal = bal.defined() ? add(bal, bl) : bl;
          }
          bal = scale(bal, 1.0 / static_cast<double>(probs.size()));
          loss = add(loss, scale(bal, cfg.balance_weight));
        }
        if (cfg.model.method == Method::kConcrete &&
            ctx.aux_regularizer.defined()) {
          loss = add(loss, scale(ctx.aux_regularizer, cfg.concrete_reg_weight));
        }
      }
      Tensor scaled = scale(loss, 1.0 / static_cast<double>(cfg.batch));
      double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at step " + std::to_string(s) +
                           "\nconfig:\n" + cfg.config_echo);
      step_loss += lv / static_cast<double>(cfg.batch);
      backward(scaled);
    }
    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (auto& p : params)
        if (p.has_grad())
          for (double g : p.grad()) sq += g * g;
      double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        double f = cfg.grad_clip / norm;
        for (auto& p : params)
          if (p.has_grad())
            for (double& g : p.mutable_grad()) g *= f;
      }
    }
    adam.step(params, lr, cfg.optimizer, cfg.beta1, cfg.beta2, cfg.adam_eps,
              cfg.weight_decay, s + 1);
    for (auto& p : params) p.zero_grad();

    LogRow row;
    row.step = s;
    row.k = k;
    row.lr = lr;
    row.train_loss_nats = step_loss;
    if (s % val_every == 0 || s == cfg.steps - 1) {
      row.val_bpc_at_k =
          validate_bpc(model, batches, k, cfg.val_max_windows);
      row.val_bpc_at_n =
          moe ? validate_bpc(model, batches, n, cfg.val_max_windows)
              : row.val_bpc_at_k;
    }
    result.log.push_back(row);
  }
  result.checkpoint = Checkpoint::from_model(model, cfg.steps, cfg.config_echo);
  return result;
}

double bpc(const Checkpoint& ckpt, const std::vector<uint8_t>& data, int k,
           double val_fraction, int max_windows) {
  bool moe = method_uses_experts(ckpt.model_cfg.method);
  if (moe && (k < 1 || k > ckpt.model_cfg.n_experts))
    throw ValueError("bpc: k=" + std::to_string(k) + " out of range [1," +
                     std::to_string(ckpt.model_cfg.n_experts) + "]");
  Model model = ckpt.to_model();
  // val_fraction here is the evaluated suffix share of `data`.
  BatchIterator it(data, ckpt.model_cfg.seq_len, 1, val_fraction,
                   ckpt.init_seed);
  return validate_bpc(model, it, moe ? k : 0, max_windows);
}

std::vector<uint8_t> read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValueError("cannot read corpus: " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
  return data;
}

}  // namespace smdk
