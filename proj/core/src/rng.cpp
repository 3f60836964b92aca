#include "smdk/rng.hpp"

#include <cmath>

namespace smdk {

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {
uint64_t splitmix64(uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace

RngStream::RngStream(uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)) {
  uint64_t h = fnv1a64(label_.data(), label_.size());
  h = fnv1a64(&seed, sizeof(seed), h);
  state_ = h;
  // Warm up so that nearby hashes decorrelate.
  splitmix64(state_);
  splitmix64(state_);
}

uint64_t RngStream::next_u64() {
  ++counter_;
  return splitmix64(state_);
}

double RngStream::next_uniform() {
  // 53-bit mantissa draw, shifted into (0, 1).
  double u = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  return u;
}

double RngStream::next_gauss() {
  if (has_cached_gauss_) {
    has_cached_gauss_ = false;
    return cached_gauss_;
  }
  double u1 = next_uniform();
  double u2 = next_uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  cached_gauss_ = r * std::sin(a);
  has_cached_gauss_ = true;
  return r * std::cos(a);
}

RngStream RngStream::fork(std::string_view sublabel) const {
  return RngStream(seed_, label_ + "/" + std::string(sublabel));
}

}  // namespace smdk
