#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hierdoc/errors.hpp"

namespace hierdoc {

// Deterministic, platform-independent random stream. std::mt19937 raw output
// is portable but the standard distributions are not, so the generator and
// every distribution here are spelled out explicitly: xoshiro256++ seeded via
// splitmix64, 53-bit uniform doubles, Box-Muller normals, rejection-sampled
// bounded ints. Same (seed, stream_id) gives the same sequence everywhere.
class RngStream {
 public:
  RngStream() : RngStream(0, "default") {}

  RngStream(uint64_t seed, std::string_view stream_id)
      : seed_(seed), stream_id_(stream_id) {
    uint64_t x = seed ^ fnv1a(stream_id);
    for (auto& s : state_) s = splitmix64(x);
    have_spare_ = false;
  }

  uint64_t seed() const { return seed_; }
  const std::string& stream_id() const { return stream_id_; }

  // Child stream with an independent state, fully determined by the parent
  // identity and the index. Used for per-step / per-layer / per-repeat
  // randomness so that resuming or parallelizing never changes results.
  RngStream derive(uint64_t index) const {
    RngStream child;
    child.seed_ = splitmix_once(seed_ ^ fnv1a(stream_id_) ^
                                (0x9e3779b97f4a7c15ull * (index + 1)));
    child.stream_id_ = stream_id_ + "/" + std::to_string(index);
    uint64_t x = child.seed_;
    for (auto& s : child.state_) s = splitmix64(x);
    child.have_spare_ = false;
    return child;
  }

  RngStream derive(std::string_view label) const {
    return RngStream(seed_ ^ fnv1a(stream_id_), std::string(stream_id_) + "/" +
                                                    std::string(label));
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Unbiased via rejection.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("RngStream::uniform_int: n must be > 0");
    const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller; spares cached pairwise.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // In-place Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices drawn uniformly from [0, n), in draw order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n)
      throw ContractError("sample_without_replacement: k exceeds population");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(uniform_int(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static uint64_t splitmix_once(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t seed_ = 0;
  std::string stream_id_;
  uint64_t state_[4] = {};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace hierdoc
