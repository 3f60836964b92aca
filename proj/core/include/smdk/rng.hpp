#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace smdk {

// Counter-based deterministic RNG. Identical (seed, label) pairs yield
// identical draw sequences on every platform; we avoid std::*_distribution
// because their outputs are implementation-defined.
class RngStream {
 public:
  RngStream(uint64_t seed, std::string label);

  uint64_t next_u64();
  // Uniform in the open interval (0, 1).
  double next_uniform();
  // Standard normal via Box-Muller (caches the second draw).
  double next_gauss();

  uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  uint64_t counter() const { return counter_; }

  // Derive an independent substream, e.g. per layer.
  RngStream fork(std::string_view sublabel) const;

 private:
  uint64_t seed_;
  std::string label_;
  uint64_t state_;
  uint64_t counter_ = 0;
  double cached_gauss_ = 0.0;
  bool has_cached_gauss_ = false;
};

// FNV-1a, also used for checkpoint payload checksums and config hashes.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull);

}  // namespace smdk
