#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace lightattn {

// Deterministic random stream. mt19937_64 raw output is pinned by the
// standard; the value transforms below are hand-rolled so that a seed fully
// determines every draw on every platform (std:: distributions are not
// portable).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  // Independent child stream; tag separates the substreams of one seed.
  Rng derive(std::string_view tag) const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t byte) {
      h ^= byte;
      h *= 1099511628211ull;
    };
    for (int i = 0; i < 8; ++i) mix((seed_view() >> (8 * i)) & 0xff);
    for (char c : tag) mix(static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return Rng(h);
  }

  static Rng derive_from(std::uint64_t seed, std::string_view tag) {
    return Rng(seed).derive(tag);
  }

 private:
  std::uint64_t seed_view() const {
    // mt19937_64 does not expose its seed; hash a copy's first output instead.
    auto copy = eng_;
    return copy();
  }

  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace lightattn
