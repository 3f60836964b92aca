#include "smdk/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace smdk {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (...) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (section.empty())
      throw ConfigError("line " + std::to_string(lineno) +
                        ": key outside any [section]");
    kv[section + "." + key] = val;
  }
  return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::vector<uint8_t> parse_layer_mask(const std::string& spec, int n_layers) {
  std::vector<uint8_t> mask(static_cast<size_t>(n_layers), 0);
  if (spec == "all") {
    std::fill(mask.begin(), mask.end(), 1);
  } else if (spec == "early") {
    for (int i = 0; i < n_layers / 2; ++i) mask[static_cast<size_t>(i)] = 1;
  } else if (spec == "later") {
    for (int i = n_layers / 2; i < n_layers; ++i) mask[static_cast<size_t>(i)] = 1;
  } else if (spec == "middle") {
    int a = n_layers / 4, b = n_layers - n_layers / 4;
    for (int i = a; i < b; ++i) mask[static_cast<size_t>(i)] = 1;
  } else if (spec == "every2") {
    for (int i = 1; i < n_layers; i += 2) mask[static_cast<size_t>(i)] = 1;
  } else {
    std::stringstream ss(spec);
    std::string tok;
    size_t i = 0;
    while (std::getline(ss, tok, ',')) {
      if (i >= mask.size()) throw ConfigError("moe_layer_mask longer than n_layers");
      mask[i++] = static_cast<uint8_t>(to_int("moe_layer_mask", trim(tok)) != 0);
    }
    if (i != mask.size()) throw ConfigError("moe_layer_mask shorter than n_layers");
  }
  return mask;
}

namespace {

void apply_preset(RunConfig& rc, const std::string& preset) {
  TrainConfig& t = rc.train;
  if (preset == "paper-tiny") {
    t.model.n_layers = 2;
    t.model.d_model = 64;
    t.model.n_heads = 4;
    t.model.d_ff = 512;
    t.model.n_experts = 8;
    t.model.seq_len = 64;
    t.steps = 2000;
    t.batch = 4;
    t.ksched = KSchedule::linear(2, 8, t.steps);
  } else if (preset == "paper-small") {
    t.model.n_layers = 4;
    t.model.d_model = 256;
    t.model.n_heads = 8;
    t.model.d_ff = 4096;
    t.model.n_experts = 16;
    t.model.seq_len = 128;
    t.steps = 20000;
    t.batch = 8;
    t.ksched = KSchedule::linear(2, 16, t.steps);
  } else if (preset != "custom") {
    throw ConfigError("unknown preset: " + preset);
  }
}

}  // namespace

RunConfig run_config_from_map(const std::map<std::string, std::string>& kv) {
  RunConfig rc;
  auto it = kv.find("run.preset");
  rc.preset = it != kv.end() ? it->second : "custom";
  apply_preset(rc, rc.preset);
  TrainConfig& t = rc.train;

  std::string mask_spec;
  int k_min = t.ksched.k_min, k_max = -1;
  std::string k_mode = t.ksched.mode == KSchedule::Mode::kConstant ? "constant" : "linear";

  for (const auto& [key, v] : kv) {
    if (key == "run.preset") {
    } else if (key == "run.output_dir") { rc.output_dir = v;
    } else if (key == "run.plot") { rc.plot = to_bool(key, v);
    } else if (key == "run.seed") { t.seed = static_cast<uint64_t>(std::stoull(v));
    } else if (key == "run.steps") { t.steps = to_int(key, v);
    } else if (key == "run.batch") { t.batch = to_int(key, v);
    } else if (key == "run.lr0") { t.lr0 = to_double(key, v);
    } else if (key == "run.optimizer") {
      if (v == "adam") t.optimizer = Optimizer::kAdam;
      else if (v == "adamw") t.optimizer = Optimizer::kAdamW;
      else throw ConfigError("bad optimizer: " + v);
    } else if (key == "run.beta1") { t.beta1 = to_double(key, v);
    } else if (key == "run.beta2") { t.beta2 = to_double(key, v);
    } else if (key == "run.adam_eps") { t.adam_eps = to_double(key, v);
    } else if (key == "run.weight_decay") { t.weight_decay = to_double(key, v);
    } else if (key == "run.grad_clip") { t.grad_clip = to_double(key, v);
    } else if (key == "run.data_path") { t.data_path = v;
    } else if (key == "run.val_fraction") { t.val_fraction = to_double(key, v);
    } else if (key == "run.val_max_windows") { t.val_max_windows = to_int(key, v);
    } else if (key == "model.method") { t.model.method = method_from_string(v);
    } else if (key == "model.n_layers") { t.model.n_layers = to_int(key, v);
    } else if (key == "model.d_model") { t.model.d_model = to_int(key, v);
    } else if (key == "model.n_heads") { t.model.n_heads = to_int(key, v);
    } else if (key == "model.d_ff") { t.model.d_ff = to_int(key, v);
    } else if (key == "model.n_experts") { t.model.n_experts = to_int(key, v);
    } else if (key == "model.vocab") { t.model.vocab = to_int(key, v);
    } else if (key == "model.seq_len") { t.model.seq_len = to_int(key, v);
    } else if (key == "model.moe_layer_mask") { mask_spec = v;
    } else if (key == "model.activation") {
      if (v == "gelu") t.model.activation = Activation::kGelu;
      else if (v == "relu") t.model.activation = Activation::kRelu;
      else throw ConfigError("bad activation: " + v);
    } else if (key == "model.dropout_p") { t.model.dropout_p = to_double(key, v);
    } else if (key == "model.dropblock_size") { t.model.dropblock_size = to_int(key, v);
    } else if (key == "model.router_init_scale") { t.model.router_init_scale = to_double(key, v);
    } else if (key == "schedule.k_mode") { k_mode = v;
    } else if (key == "schedule.k_min") { k_min = to_int(key, v);
    } else if (key == "schedule.k_max") { k_max = to_int(key, v);
    } else if (key == "aux.balance_weight") { t.balance_weight = to_double(key, v);
    } else if (key == "aux.thor_weight") { t.thor_weight = to_double(key, v);
    } else if (key == "aux.concrete_reg_weight") { t.concrete_reg_weight = to_double(key, v);
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }

  if (!mask_spec.empty())
    t.model.moe_layer_mask = parse_layer_mask(mask_spec, t.model.n_layers);
  if (k_max < 0) k_max = t.model.n_experts;
  if (k_mode == "linear") {
    t.ksched = KSchedule::linear(k_min, k_max, std::max(1, t.steps));
  } else if (k_mode == "constant") {
    t.ksched = KSchedule::constant(k_max, std::max(1, t.steps));
  } else {
    throw ConfigError("bad k_mode: " + k_mode);
  }

  t.config_echo = rc.echo();
  try {
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return rc;
}

RunConfig run_config_from_file(const std::string& path) {
  return run_config_from_map(parse_config_file(path));
}

std::string RunConfig::echo() const {
  const TrainConfig& t = train;
  std::ostringstream os;
  auto g = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "[run]\n";
  os << "preset = " << preset << "\n";
  os << "output_dir = " << output_dir << "\n";
  os << "plot = " << (plot ? "true" : "false") << "\n";
  os << "seed = " << t.seed << "\n";
  os << "steps = " << t.steps << "\n";
  os << "batch = " << t.batch << "\n";
  os << "lr0 = " << g(t.lr0) << "\n";
  os << "optimizer = " << (t.optimizer == Optimizer::kAdam ? "adam" : "adamw") << "\n";
  os << "beta1 = " << g(t.beta1) << "\n";
  os << "beta2 = " << g(t.beta2) << "\n";
  os << "adam_eps = " << g(t.adam_eps) << "\n";
  os << "weight_decay = " << g(t.weight_decay) << "\n";
  os << "grad_clip = " << g(t.grad_clip) << "\n";
  os << "data_path = " << t.data_path << "\n";
  os << "val_fraction = " << g(t.val_fraction) << "\n";
  os << "val_max_windows = " << t.val_max_windows << "\n";
  os << "[model]\n";
  os << "method = " << method_to_string(t.model.method) << "\n";
  os << "n_layers = " << t.model.n_layers << "\n";
  os << "d_model = " << t.model.d_model << "\n";
  os << "n_heads = " << t.model.n_heads << "\n";
  os << "d_ff = " << t.model.d_ff << "\n";
  os << "n_experts = " << t.model.n_experts << "\n";
  os << "vocab = " << t.model.vocab << "\n";
  os << "seq_len = " << t.model.seq_len << "\n";
  os << "moe_layer_mask = ";
  auto mask = t.model.effective_moe_mask();
  for (size_t i = 0; i < mask.size(); ++i) os << (i ? "," : "") << int(mask[i]);
  os << "\n";
  os << "activation = " << (t.model.activation == Activation::kGelu ? "gelu" : "relu") << "\n";
  os << "dropout_p = " << g(t.model.dropout_p) << "\n";
  os << "dropblock_size = " << t.model.dropblock_size << "\n";
  os << "router_init_scale = " << g(t.model.router_init_scale) << "\n";
  os << "[schedule]\n";
  os << "k_mode = " << (t.ksched.mode == KSchedule::Mode::kConstant ? "constant" : "linear") << "\n";
  os << "k_min = " << t.ksched.k_min << "\n";
  os << "k_max = " << t.ksched.k_max << "\n";
  os << "[aux]\n";
  os << "balance_weight = " << g(t.balance_weight) << "\n";
  os << "thor_weight = " << g(t.thor_weight) << "\n";
  os << "concrete_reg_weight = " << g(t.concrete_reg_weight) << "\n";
  return os.str();
}

std::string RunConfig::hash() const {
  std::string e = echo();
  uint64_t h = fnv1a64(e.data(), e.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08x", static_cast<uint32_t>(h ^ (h >> 32)));
  return buf;
}

std::vector<uint8_t> make_corpus(size_t n_bytes, uint64_t seed) {
  // Zipf-ish vocabulary of fake words; highly structured, so a small causal
  // model learns it well below the 8-bit uniform baseline.
  static const char* kWords[] = {
      "the",     "of",       "and",     "to",        "in",      "that",
      "was",     "he",       "for",     "it",        "with",    "as",
      "his",     "on",       "be",      "at",        "by",      "had",
      "not",     "are",      "but",     "from",      "or",      "have",
      "an",      "they",     "which",   "one",       "you",     "were",
      "her",     "all",      "she",     "there",     "would",   "their",
      "we",      "him",      "been",    "has",       "when",    "who",
      "will",    "more",     "no",      "if",        "out",     "so",
      "said",    "what",     "up",      "its",       "about",   "into",
      "than",    "them",     "can",     "only",      "other",   "new",
      "some",    "could",    "time",    "these",     "two",     "may",
      "then",    "do",       "first",   "any",       "my",      "now",
      "such",    "like",     "our",     "over",      "man",     "me",
      "even",    "most",     "made",    "after",     "also",    "did",
      "many",    "before",   "must",    "through",   "years",   "where",
      "much",    "way",      "well",    "down",      "should",  "because",
      "network", "expert",   "routing", "training",  "model",   "token",
      "layer",   "sparse",   "dense",   "gradient",  "random",  "linear",
  };
  constexpr int kNumWords = sizeof(kWords) / sizeof(kWords[0]);
  RngStream rng(seed, "corpus");
  std::vector<uint8_t> out;
  out.reserve(n_bytes + 16);
  int since_period = 0;
  bool cap_next = true;
  while (out.size() < n_bytes) {
    // Squared-uniform index approximates a Zipf weighting.
    double u = rng.next_uniform();
    int w = static_cast<int>(u * u * kNumWords);
    if (w >= kNumWords) w = kNumWords - 1;
    std::string word = kWords[w];
    if (cap_next) {
      word[0] = static_cast<char>(std::toupper(word[0]));
      cap_next = false;
    }
    for (char c : word) out.push_back(static_cast<uint8_t>(c));
    ++since_period;
    double end = rng.next_uniform();
    if (since_period >= 4 && end < 0.18) {
      out.push_back(end < 0.03 ? '!' : '.');
      out.push_back(' ');
      since_period = 0;
      cap_next = true;
    } else if (end > 0.9) {
      out.push_back(',');
      out.push_back(' ');
    } else {
      out.push_back(' ');
    }
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace smdk
