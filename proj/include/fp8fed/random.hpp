// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

namespace fp8fed {

/// Purpose tags used when deriving independent substreams.
enum class StreamTag : std::uint64_t {
  kInit = 1,
  kSampling = 2,
  kBroadcast = 3,
  kLocalTrain = 4,
  kUplink = 5,
  kServerOpt = 6,
  kPartition = 7,
  kData = 8,
  kBench = 9,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Explicit random stream. Nothing in the library draws from global state;
/// every stochastic operation takes one of these by reference.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(detail::splitmix64(seed)) {}

  /// Substream keyed by (seed, round, client, purpose). Distinct keys give
  /// statistically independent streams, so results never depend on the order
  /// in which clients are processed.
  static RandomStream derive(std::uint64_t seed, std::uint64_t round, std::uint64_t client,
                             StreamTag tag) {
    std::uint64_t h = detail::splitmix64(seed);
    h = detail::splitmix64(h ^ round);
    h = detail::splitmix64(h ^ (client + 0x632be59bd9b4e019ULL));
    h = detail::splitmix64(h ^ static_cast<std::uint64_t>(tag));
    return RandomStream(h);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() { return normal_(engine_); }

  double gamma(double shape) {
    std::gamma_distribution<double> dist(shape, 1.0);
    return dist(engine_);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
    return dist(engine_);
  }

  std::uint64_t next() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace fp8fed
