#pragma once

// Synthetic datasets: 2D point denoising and desk-scale seismic
// deconvolution. Sample i of a split is a pure function of (seed, split, i).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgdjit/linops.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/tensor.hpp"

namespace sgdjit {

/// x: [N x rows x n], y: [N x rows x m]. One sample is a rows x n block
/// (a single point for the toy, a section of traces for seismic).
struct Dataset {
  Tensor x;
  Tensor y;
  nlohmann::json op;          // operator descriptor
  double noise_variance = 0;  // E||z||^2 per sample
  std::string split;
  std::uint64_t seed = 0;
  nlohmann::json meta;        // generator parameters

  std::size_t size() const { return x.rank() ? x.shape[0] : 0; }
  std::size_t rows() const { return x.shape[1]; }
  std::size_t signal_length() const { return x.shape[2]; }
  std::size_t measurement_length() const { return y.shape[2]; }
  std::size_t sample_dim() const { return rows() * signal_length(); }
  std::size_t measurement_dim() const { return rows() * measurement_length(); }

  /// Stacks the chosen samples into [B*rows x n] / [B*rows x m].
  Tensor gather_x(std::span<const std::size_t> idx) const { return gather(x, idx); }
  Tensor gather_y(std::span<const std::size_t> idx) const { return gather(y, idx); }

  Tensor sample_x(std::size_t i) const { return gather(x, std::span<const std::size_t>(&i, 1)); }
  Tensor sample_y(std::size_t i) const { return gather(y, std::span<const std::size_t>(&i, 1)); }

  void validate() const {
    if (x.rank() != 3 || y.rank() != 3 || x.shape[0] != y.shape[0] || x.shape[1] != y.shape[1])
      throw ShapeError("dataset", x.shape, y.shape);
    if (noise_variance < 0.0) throw std::invalid_argument("dataset: negative noise variance");
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.x == b.x && a.y == b.y && a.op == b.op && a.noise_variance == b.noise_variance &&
           a.split == b.split && a.seed == b.seed && a.meta == b.meta;
  }

 private:
  static Tensor gather(const Tensor& t, std::span<const std::size_t> idx) {
    const std::size_t block = t.shape[1] * t.shape[2];
    Tensor out(Shape{idx.size() * t.shape[1], t.shape[2]});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= t.shape[0]) throw std::out_of_range("dataset index out of range");
      std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(idx[b] * block), block,
                  out.data.begin() + static_cast<std::ptrdiff_t>(b * block));
    }
    return out;
  }
};

namespace detail {

inline std::uint64_t split_stream(const std::string& split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : split) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

/// y = A x + z for every sample, z ~ N(0, variance/dim I) drawn from the
/// sample's own stream.
inline void measure(Dataset& d, const LinearOperator& A, double variance) {
  const std::size_t N = d.size(), rows = d.rows();
  const std::size_t m = A.range();
  d.y = Tensor(Shape{N, rows, m});
  const double sd = std::sqrt(variance / static_cast<double>(rows * m));
  for (std::size_t i = 0; i < N; ++i) {
    Tensor xi = d.sample_x(i);
    Tensor yi = A.apply(xi);
    if (variance > 0.0) {
      Rng rng = make_rng(d.seed, streams::data_noise ^ split_stream(d.split), i);
      std::normal_distribution<double> nd(0.0, 1.0);
      for (double& v : yi.data) v += sd * nd(rng);
    }
    std::copy(yi.data.begin(), yi.data.end(), d.y.data.begin() + static_cast<std::ptrdiff_t>(i * rows * m));
  }
}

}  // namespace detail

/// Constant-signal 2D denoising split: every x equals `centre`.
/// With per_coordinate=false the variance is E||z||^2 (per-coordinate
/// variance/2); with per_coordinate=true it is the per-coordinate variance.
inline Dataset gen_points(const std::vector<double>& centre, std::size_t n, double variance,
                          std::uint64_t seed, const std::string& split, bool per_coordinate = false) {
  if (n < 1) throw std::invalid_argument("gen_points: sample count must be >= 1");
  if (variance < 0.0) throw std::invalid_argument("gen_points: negative noise variance");
  const std::size_t dim = centre.size();
  const double total = per_coordinate ? variance * static_cast<double>(dim) : variance;
  Dataset d;
  d.split = split;
  d.seed = seed;
  d.noise_variance = total;
  d.x = Tensor(Shape{n, 1, dim});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) d.x[i * dim + j] = centre[j];
  const LinearOperator A = LinearOperator::identity(dim);
  d.op = A.descriptor();
  d.meta = {{"task", "toy"}, {"centre", centre}, {"per_coordinate", per_coordinate}};
  detail::measure(d, A, total);
  return d;
}

/// Toy train/test pair: x = (0,0), y = x + z.
inline std::pair<Dataset, Dataset> gen_toy(std::size_t n_train = 200, std::size_t n_test = 50,
                                           double variance = 0.01, std::uint64_t seed = 0,
                                           bool per_coordinate = false) {
  return {gen_points({0.0, 0.0}, n_train, variance, seed, "train", per_coordinate),
          gen_points({0.0, 0.0}, n_test, variance, seed, "test", per_coordinate)};
}

/// Toy OOD split: ground truth shifted to `bias`.
inline Dataset gen_toy_ood(const std::vector<double>& bias, std::size_t n, double variance,
                           std::uint64_t seed, bool per_coordinate = false) {
  return gen_points(bias, n, variance, seed, "ood", per_coordinate);
}

struct SeismicConfig {
  std::size_t traces = 32;
  std::size_t length = 64;
  double sparsity = 0.05;
  double amp_min = 0.3;
  double amp_max = 1.0;
  double peak_frequency = 25.0;  // Hz
  double dt = 0.004;             // s
  std::size_t half_width = 10;   // wavelet taps each side of the peak
  double noise_variance = 0.5;   // E||z||^2 per section

  std::vector<double> wavelet() const { return ricker_wavelet(peak_frequency, dt, half_width); }
  LinearOperator op() const { return LinearOperator::convolution(wavelet(), length); }

  void validate() const {
    if (!(sparsity > 0.0 && sparsity < 1.0)) throw std::invalid_argument("seismic: sparsity must be in (0, 1)");
    if (length <= 2 * half_width + 1) throw std::invalid_argument("seismic: trace length must exceed wavelet length");
    if (traces == 0) throw std::invalid_argument("seismic: need at least one trace");
    if (!(amp_min >= 0.0 && amp_max >= amp_min)) throw std::invalid_argument("seismic: bad amplitude range");
    if (noise_variance < 0.0) throw std::invalid_argument("seismic: negative noise variance");
  }

  friend bool operator==(const SeismicConfig&, const SeismicConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SeismicConfig& c) {
  j = {{"traces", c.traces}, {"length", c.length}, {"sparsity", c.sparsity},
       {"amp_min", c.amp_min}, {"amp_max", c.amp_max}, {"peak_frequency", c.peak_frequency},
       {"dt", c.dt}, {"half_width", c.half_width}, {"noise_variance", c.noise_variance}};
}
inline void from_json(const nlohmann::json& j, SeismicConfig& c) {
  j.at("traces").get_to(c.traces);
  j.at("length").get_to(c.length);
  j.at("sparsity").get_to(c.sparsity);
  j.at("amp_min").get_to(c.amp_min);
  j.at("amp_max").get_to(c.amp_max);
  j.at("peak_frequency").get_to(c.peak_frequency);
  j.at("dt").get_to(c.dt);
  j.at("half_width").get_to(c.half_width);
  j.at("noise_variance").get_to(c.noise_variance);
}

/// Sparse reflectivity sections: each (trace, time) cell is a spike with
/// probability `sparsity`, amplitude uniform in [amp_min, amp_max] with a
/// random sign. y is the per-trace convolution with the wavelet plus noise.
inline Dataset gen_seismic(std::size_t n, const SeismicConfig& cfg, std::uint64_t seed,
                           const std::string& split = "train") {
  if (n < 1) throw std::invalid_argument("gen_seismic: sample count must be >= 1");
  cfg.validate();
  const LinearOperator A = cfg.op();
  Dataset d;
  d.split = split;
  d.seed = seed;
  d.noise_variance = cfg.noise_variance;
  d.op = A.descriptor();
  d.meta = {{"task", "seismic"}, {"generator", cfg}};
  const std::size_t block = cfg.traces * cfg.length;
  d.x = Tensor(Shape{n, cfg.traces, cfg.length});
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, streams::data_signal ^ detail::split_stream(split), i);
    std::bernoulli_distribution spike(cfg.sparsity);
    std::uniform_real_distribution<double> amp(cfg.amp_min, cfg.amp_max);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t c = 0; c < block; ++c) {
      if (!spike(rng)) continue;
      const double a = amp(rng);
      d.x[i * block + c] = sign(rng) ? a : -a;
    }
  }
  detail::measure(d, A, cfg.noise_variance);
  return d;
}

/// Adds a constant horizontal layer of `magnitude` at time `layer_time` on
/// every trace of every section, then re-measures.
inline Dataset gen_seismic_ood(std::size_t n, const SeismicConfig& cfg, double magnitude,
                               std::size_t layer_time, std::uint64_t seed) {
  if (layer_time >= cfg.length)
    throw std::out_of_range("gen_seismic_ood: layer time " + std::to_string(layer_time) +
                            " outside trace length " + std::to_string(cfg.length));
  Dataset d = gen_seismic(n, cfg, seed, "ood");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t tr = 0; tr < cfg.traces; ++tr)
      d.x[(i * cfg.traces + tr) * cfg.length + layer_time] += magnitude;
  d.meta["layer_magnitude"] = magnitude;
  d.meta["layer_time"] = layer_time;
  detail::measure(d, cfg.op(), cfg.noise_variance);
  return d;
}

/// Dynamic range (max - min) of the ground truth; the PSNR peak.
inline double dynamic_range(const Dataset& d) {
  if (d.x.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(d.x.data.begin(), d.x.data.end());
  return *hi - *lo;
}

}  // namespace sgdjit
