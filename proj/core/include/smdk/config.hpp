#pragma once

#include <map>
#include <string>
#include <vector>

#include "smdk/training.hpp"

namespace smdk {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat "key = value" text with [section] headers and '#' comments.
// Keys are stored as "section.key".
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> parse_config_file(const std::string& path);

struct RunConfig {
  TrainConfig train;
  std::string output_dir = "runs";
  std::string preset = "custom";  // paper-tiny | paper-small | custom
  bool plot = true;

  // Canonical resolved key=value text; written next to every artifact.
  std::string echo() const;
  // FNV hash of the echo; artifact filename prefix.
  std::string hash() const;
};

// Applies preset defaults, then file overrides. Unknown keys are an error.
RunConfig run_config_from_map(const std::map<std::string, std::string>& kv);
RunConfig run_config_from_file(const std::string& path);

// moe_layer_mask presets: early | middle | later | every2 | all, or an
// explicit comma list of 0/1.
std::vector<uint8_t> parse_layer_mask(const std::string& spec, int n_layers);

// Deterministic synthetic byte corpus: seeded word soup with punctuation,
// compressible enough for desk-scale language-model runs.
std::vector<uint8_t> make_corpus(size_t n_bytes, uint64_t seed);

}  // namespace smdk
