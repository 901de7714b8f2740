#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

namespace featmine {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator keyed on a single 64-bit key. Value k of the
/// sequence is a pure function of (key, k), so any position can be replayed.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  constexpr CounterRng() = default;
  constexpr explicit CounterRng(std::uint64_t key, std::uint64_t position = 0)
      : key_(key), position_(position) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() {
    return detail::splitmix64(key_ ^ detail::splitmix64(position_++));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1); never returns 0.
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t v;
    do {
      v = (*this)();
    } while (v >= limit);
    return v % bound;
  }

  double normal() {
    // Box-Muller, one output per pair of uniforms.
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gamma(shape, 1) by Marsaglia-Tsang.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform_open();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1),
                     first + static_cast<std::ptrdiff_t>(j));
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t position_ = 0;
};

/// Where a particular draw came from: enough to replay it.
struct DrawRecord {
  std::string stream;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
  bool operator==(const DrawRecord&) const = default;
};

/// Named, seeded random stream. Each call to draw() hands out an
/// independent CounterRng for draw number `counter`; distinct names with the
/// same seed never share a sequence.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::string name, std::uint64_t seed, std::uint64_t counter = 0)
      : name_(std::move(name)), seed_(seed), counter_(counter) {}

  const std::string& name() const { return name_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  CounterRng draw() { return at(counter_++); }
  CounterRng draw(DrawRecord& record) {
    record = {name_, seed_, counter_};
    return draw();
  }

  /// Generator for draw number `counter` without advancing the stream.
  CounterRng at(std::uint64_t counter) const {
    const std::uint64_t stream_key =
        detail::splitmix64(seed_ ^ detail::splitmix64(detail::fnv1a(name_)));
    return CounterRng(detail::splitmix64(stream_key + 0xD1B54A32D192ED03ULL * (counter + 1)));
  }

  static CounterRng replay(const DrawRecord& record) {
    return RngStream(record.stream, record.seed).at(record.counter);
  }

 private:
  std::string name_ = "default";
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace featmine
