#pragma once

// Deterministic random streams. mt19937_64 has a standard-specified sequence
// and all value mappings below are explicit, so runs are bit-reproducible for
// a fixed seed. Streams derived via fork() are independent of thread
// scheduling, which keeps multi-threaded runs reproducible.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace caps {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(detail::splitmix64(seed)), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Uniform on the open interval (0, 1).
  double uniform() {
    for (;;) {
      const double u = (engine_() >> 11) * 0x1.0p-53;
      if (u > 0.0 && u < 1.0) return u;
    }
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Index sampled proportionally to nonnegative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u <= 0.0) return i;
    }
    return weights.size() - 1;
  }

  std::uint64_t next_u64() { return engine_(); }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // Independent stream derived from this stream's seed and an id.
  RandomStream fork(std::uint64_t stream_id) const {
    return RandomStream(detail::splitmix64(seed_ ^ detail::splitmix64(stream_id + 1)));
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace caps
