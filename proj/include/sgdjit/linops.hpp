#pragma once

// Forward models y = A x. Operators act on the last axis of a tensor, so a
// batch [rows x n] maps to [rows x m]; seismic sections are batches of traces.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgdjit/autodiff.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/tensor.hpp"

namespace sgdjit {

enum class OperatorKind { identity, dense, convolution };

inline const char* to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::identity: return "identity";
    case OperatorKind::dense: return "dense";
    case OperatorKind::convolution: return "convolution";
  }
  return "?";
}

/// Ricker wavelet (1 - 2 pi^2 f^2 t^2) exp(-pi^2 f^2 t^2) sampled on
/// t = -half_width*dt ... +half_width*dt. Peak 1 at the centre tap.
inline std::vector<double> ricker_wavelet(double peak_frequency, double dt, std::size_t half_width) {
  if (!(peak_frequency > 0.0)) throw std::invalid_argument("ricker_wavelet: peak_frequency must be > 0");
  if (!(dt > 0.0)) throw std::invalid_argument("ricker_wavelet: dt must be > 0");
  std::vector<double> w(2 * half_width + 1);
  const double pf2 = std::numbers::pi * std::numbers::pi * peak_frequency * peak_frequency;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double t = (static_cast<double>(i) - static_cast<double>(half_width)) * dt;
    const double a = pf2 * t * t;
    w[i] = (1.0 - 2.0 * a) * std::exp(-a);
  }
  return w;
}

class LinearOperator;
double spectral_bound(const LinearOperator& op, int iters = 200, double tol = 1e-10,
                      std::uint64_t seed = 0x5eed);

class LinearOperator {
 public:
  static LinearOperator identity(std::size_t n) {
    LinearOperator op(OperatorKind::identity, n, n);
    op.mu_ = 1.0;
    return op;
  }

  /// Row-major m x n matrix.
  static LinearOperator dense(std::size_t m, std::size_t n, std::vector<double> values) {
    if (values.size() != m * n)
      throw ShapeError("dense operator: expected " + std::to_string(m * n) + " values, got " +
                       std::to_string(values.size()));
    LinearOperator op(OperatorKind::dense, m, n);
    op.values_ = std::move(values);
    op.finish();
    return op;
  }

  /// Per-trace "same" convolution of a length-T signal with a centred,
  /// odd-length wavelet: y[t] = sum_s w[t - s + h] x[s].
  static LinearOperator convolution(std::vector<double> wavelet, std::size_t length) {
    if (wavelet.empty() || wavelet.size() % 2 == 0)
      throw std::invalid_argument("convolution operator: wavelet length must be odd, got " +
                                  std::to_string(wavelet.size()));
    bool nonzero = false;
    for (double v : wavelet) nonzero = nonzero || v != 0.0;
    if (!nonzero) throw std::invalid_argument("convolution operator: degenerate all-zero wavelet");
    LinearOperator op(OperatorKind::convolution, length, length);
    op.values_ = std::move(wavelet);
    op.finish();
    return op;
  }

  OperatorKind kind() const { return kind_; }
  std::size_t domain() const { return n_; }
  std::size_t range() const { return m_; }
  const std::vector<double>& values() const { return values_; }

  /// Cached upper envelope of the largest eigenvalue of A^T A.
  double mu() const { return mu_; }

  Tensor apply(const Tensor& x) const { return map(x, false); }
  Tensor adjoint(const Tensor& u) const { return map(u, true); }

  nlohmann::json descriptor() const {
    nlohmann::json j;
    j["kind"] = to_string(kind_);
    j["m"] = m_;
    j["n"] = n_;
    if (kind_ != OperatorKind::identity) j["values"] = values_;
    return j;
  }

  static LinearOperator from_descriptor(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") return identity(j.at("n").get<std::size_t>());
    if (kind == "dense")
      return dense(j.at("m").get<std::size_t>(), j.at("n").get<std::size_t>(),
                   j.at("values").get<std::vector<double>>());
    if (kind == "convolution")
      return convolution(j.at("values").get<std::vector<double>>(), j.at("n").get<std::size_t>());
    throw std::invalid_argument("unknown operator kind '" + kind + "'");
  }

 private:
  LinearOperator(OperatorKind k, std::size_t m, std::size_t n) : kind_(k), m_(m), n_(n) {}

  // Rayleigh quotients approach lambda_max from below and power iteration
  // stalls when the top eigenvalues cluster, so small operators use the
  // exact eigenvalue. The slack makes the cached value an envelope.
  void finish();

  Tensor map(const Tensor& x, bool transposed) const {
    const std::size_t in = transposed ? m_ : n_;
    const std::size_t out = transposed ? n_ : m_;
    if (x.rank() == 0 || x.rank() > 2 || x.shape.back() != in)
      throw ShapeError(transposed ? "adjoint_apply" : "apply", x.shape, Shape{m_, n_});
    const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
    Shape s = x.shape;
    s.back() = out;
    if (kind_ == OperatorKind::identity) return Tensor(s, x.data);
    Tensor y(s);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = &x.data[r * in];
      double* yr = &y.data[r * out];
      if (kind_ == OperatorKind::dense) {
        if (!transposed) {
          for (std::size_t i = 0; i < m_; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n_; ++j) acc += values_[i * n_ + j] * xr[j];
            yr[i] = acc;
          }
        } else {
          for (std::size_t i = 0; i < m_; ++i)
            for (std::size_t j = 0; j < n_; ++j) yr[j] += values_[i * n_ + j] * xr[i];
        }
      } else {
        convolve_row(xr, yr, transposed);
      }
    }
    return y;
  }

  void convolve_row(const double* x, double* y, bool transposed) const {
    const auto T = static_cast<std::ptrdiff_t>(n_);
    const auto h = static_cast<std::ptrdiff_t>(values_.size() / 2);
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(values_.size()); ++j) {
      const double w = values_[static_cast<std::size_t>(j)];
      if (w == 0.0) continue;
      // forward: y[t] += w[j] x[t - (j - h)]; adjoint: y[s] += w[j] x[s + (j - h)]
      const std::ptrdiff_t shift = transposed ? (j - h) : -(j - h);
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(T, T - shift);
      for (std::ptrdiff_t t = lo; t < hi; ++t) y[t] += w * x[t + shift];
    }
  }

  OperatorKind kind_;
  std::size_t m_;
  std::size_t n_;
  std::vector<double> values_;
  double mu_ = 0.0;
};

/// Power iteration on A^T A; returns the Rayleigh-quotient estimate of the
/// largest eigenvalue. Stops after `iters` or when the relative change < tol.
inline double spectral_bound(const LinearOperator& op, int iters, double tol, std::uint64_t seed) {
  if (iters < 1) throw std::invalid_argument("spectral_bound: iters must be >= 1");
  if (op.kind() == OperatorKind::identity) return 1.0;
  Rng rng(seed);
  Tensor v = gaussian(Shape{op.domain()}, 1.0, rng);
  double nv = norm(v);
  double estimate = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (double& x : v.data) x /= nv;
    Tensor av = op.apply(v);
    const double next = squared_norm(av);
    Tensor w = op.adjoint(av);
    nv = norm(w);
    const bool done = it > 0 && std::abs(next - estimate) <= tol * std::abs(next);
    estimate = next;
    if (nv == 0.0 || done) break;
    v = std::move(w);
  }
  return estimate;
}

/// Explicit m x n matrix of the operator, one column per basis vector.
inline Eigen::MatrixXd dense_matrix(const LinearOperator& A) {
  const std::size_t m = A.range(), n = A.domain();
  Eigen::MatrixXd M(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    Tensor e = Tensor::zeros(Shape{n});
    e[j] = 1.0;
    const Tensor col = A.apply(e);
    for (std::size_t i = 0; i < m; ++i) M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
  }
  return M;
}

inline constexpr std::size_t exact_spectrum_limit = 2048;

inline void LinearOperator::finish() {
  double lambda = 0.0;
  if (n_ <= exact_spectrum_limit) {
    const Eigen::MatrixXd M = dense_matrix(*this);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M.transpose() * M, Eigen::EigenvaluesOnly);
    lambda = std::max(0.0, es.eigenvalues().maxCoeff());
  } else {
    lambda = spectral_bound(*this);
  }
  mu_ = lambda * (1.0 + 1e-6);
}

inline Var apply(const LinearOperator& op, Var x) {
  Tape& t = *x.tape;
  Tensor out = op.apply(x.value());
  return t.record(std::move(out), {x}, [&op, x = x.id](Tape& t, NodeId self) {
    detail::accumulate(t, x, op.adjoint(t.upstream(self)));
  });
}

inline Var adjoint_apply(const LinearOperator& op, Var u) {
  Tape& t = *u.tape;
  Tensor out = op.adjoint(u.value());
  return t.record(std::move(out), {u}, [&op, u = u.id](Tape& t, NodeId self) {
    detail::accumulate(t, u, op.apply(t.upstream(self)));
  });
}

}  // namespace sgdjit
