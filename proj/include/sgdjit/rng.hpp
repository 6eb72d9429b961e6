#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "sgdjit/tensor.hpp"

namespace sgdjit {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for stream `stream` / item `index` under a base seed. Distinct
/// (stream, index) pairs give statistically independent generators.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t index = 0) {
  return mix64(mix64(mix64(seed) ^ stream) + index);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

// Named stream ids keep unrelated consumers of one seed apart.
namespace streams {
inline constexpr std::uint64_t init = 0x1001;
inline constexpr std::uint64_t shuffle = 0x1002;
inline constexpr std::uint64_t jitter = 0x1003;
inline constexpr std::uint64_t input_jitter = 0x1004;
inline constexpr std::uint64_t data_signal = 0x2001;
inline constexpr std::uint64_t data_noise = 0x2002;
inline constexpr std::uint64_t eval = 0x3001;
inline constexpr std::uint64_t probes = 0x4001;
}  // namespace streams

inline void fill_gaussian(Tensor& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data) v = stddev * dist(rng);
}

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  fill_gaussian(t, stddev, rng);
  return t;
}

inline Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = dist(rng);
  return t;
}

/// Uniform sample from the l2 ball of `radius` in dimension t.size().
inline void fill_uniform_ball(Tensor& t, double radius, Rng& rng) {
  fill_gaussian(t, 1.0, rng);
  const double n = norm(t);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = radius * std::pow(u(rng), 1.0 / static_cast<double>(t.size()));
  const double s = n > 0.0 ? r / n : 0.0;
  for (double& v : t.data) v *= s;
}

}  // namespace sgdjit
