#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace metaaug {

// splitmix64, used to derive well-separated seeds from small integers.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a + 0x632be59bd9b4e019ULL * mix64(b));
}

/// Deterministic random stream. All sampling in the project goes through
/// this class so that a (seed, purpose) pair fully determines every draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(mix64(seed)) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  int uniform_int(int n) {
    const std::uint64_t bound = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return static_cast<int>(v % bound);
  }

  /// Standard normal via the polar method (second value discarded so the
  /// stream state is a pure function of the number of calls).
  double normal() {
    for (;;) {
      const double u = uniform(-1.0, 1.0);
      const double v = uniform(-1.0, 1.0);
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) {
        return u * std::sqrt(-2.0 * std::log(s) / s);
      }
    }
  }

  /// Standard normal conditioned on |z| <= 2 (rejection).
  double truncated_normal() {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z;
    }
  }

  /// Fisher-Yates permutation of {0..n-1}.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      std::swap(p[i], p[uniform_int(i + 1)]);
    }
    return p;
  }

  /// k distinct values from {0..n-1}, in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      const int j = uniform_int(n - i);
      out.push_back(pool[j]);
      std::swap(pool[j], pool[n - i - 1]);
    }
    return out;
  }

  /// Independent child stream. Consumes one draw from this stream.
  Rng child() { return Rng(mix64(gen_())); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace metaaug
