#pragma once

// Loop-unrolled solvers.
//
//   GD:  x_{k+1} = x_k - eta (A^T(A x_k - y) + f(x_k) + w_{k+1})
//   PGD: x_{k+1} = prox(x_k - eta (A^T(A x_k - y) + w_{k+1}))
//
// One noise draw per executed iteration, injected into the update that
// produces x_{k+1}; x_0 is never perturbed. The same network weights are
// shared by all K iterations.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/autodiff.hpp"
#include "sgdjit/linops.hpp"
#include "sgdjit/nets.hpp"
#include "sgdjit/rng.hpp"

namespace sgdjit {

enum class Variant { gd, pgd };
enum class InitRule { adjoint, zero };

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::gd, "gd"}, {Variant::pgd, "pgd"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InitRule, {{InitRule::adjoint, "adjoint"}, {InitRule::zero, "zero"}})

struct UnrollConfig {
  int iterations = 10;
  double step = 0.1;
  Variant variant = Variant::gd;
  InitRule init = InitRule::adjoint;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("unroll: iterations must be >= 1");
    if (!(step > 0.0)) throw std::invalid_argument("unroll: step size must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const UnrollConfig& c) {
  j = {{"K", c.iterations}, {"eta", c.step}, {"variant", c.variant}, {"x0_rule", c.init}};
}
inline void from_json(const nlohmann::json& j, UnrollConfig& c) {
  j.at("K").get_to(c.iterations);
  j.at("eta").get_to(c.step);
  j.at("variant").get_to(c.variant);
  j.at("x0_rule").get_to(c.init);
}

/// Per-iteration jitter variances sigma^2_{w,k}, k = 1..K. Each draw is
/// N(0, sigma^2_{w,k}/n I) with n the per-sample signal dimension, so that
/// E||w_k||^2 = sigma^2_{w,k}.
struct JitterSchedule {
  std::vector<double> variances;

  static JitterSchedule constant(int iterations, double variance) {
    return JitterSchedule{std::vector<double>(static_cast<std::size_t>(iterations), variance)};
  }

  bool is_zero() const {
    for (double v : variances)
      if (v != 0.0) return false;
    return true;
  }

  void validate(int iterations) const {
    if (variances.size() != static_cast<std::size_t>(iterations))
      throw std::invalid_argument("jitter schedule has " + std::to_string(variances.size()) +
                                  " entries, solver runs " + std::to_string(iterations) + " iterations");
    for (double v : variances)
      if (v < 0.0 || !std::isfinite(v)) throw std::invalid_argument("jitter variances must be finite and >= 0");
  }
};

/// Live noise source: schedule + generator + per-sample dimension.
struct Jitter {
  const JitterSchedule& schedule;
  Rng& rng;
  std::size_t sample_dim;

  /// Noise for iteration k (1-based), or nullopt when its variance is zero.
  std::optional<Tensor> draw(int k, const Shape& shape) const {
    const double var = schedule.variances.at(static_cast<std::size_t>(k - 1));
    if (var == 0.0) return std::nullopt;
    return gaussian(shape, std::sqrt(var / static_cast<double>(sample_dim)), rng);
  }
};

struct Trajectory {
  std::vector<Tensor> iterates;      // x_0 .. x_K
  std::vector<Tensor> net_outputs;   // f(x_k) (GD) or prox output (PGD), k = 0..K-1
  std::vector<Tensor> noises;        // w_1 .. w_K; zero tensors when jitter is off
  std::vector<double> data_fidelity; // 1/2 ||y - A x_k||^2 over the batch, k = 0..K
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& where, int it)
      : std::runtime_error(where + ": non-finite value at iteration " + std::to_string(it)), iteration(it) {}
  int iteration;
};

struct UnrollResult {
  Var output;
  Trajectory trajectory;  // filled only when recording was requested
};

struct UnrolledSolver {
  UnrollConfig config;
  GradientNet net;

  void validate() const {
    config.validate();
    if (config.variant == Variant::pgd && net.role() != NetRole::proximal)
      throw std::invalid_argument("PGD unrolling needs a net with role 'proximal'");
    if (config.variant == Variant::gd && net.role() != NetRole::gradient)
      throw std::invalid_argument("GD unrolling needs a net with role 'gradient'");
  }
};

namespace detail {

inline double half_residual(const LinearOperator& A, const Tensor& x, const Tensor& y) {
  const Tensor r = A.apply(x) - y;
  return 0.5 * squared_norm(r);
}

inline UnrollResult unroll(Tape& tape, std::span<const Var> params, const GradientNet& net,
                           const LinearOperator& A, Var y, const UnrollConfig& cfg,
                           const Jitter* jitter, bool record) {
  cfg.validate();
  const Shape& ys = y.shape();
  if (ys.size() != 2 || ys[1] != A.range())
    throw ShapeError("unroll: measurements", ys, Shape{A.range()});
  const Shape xs{ys[0], A.domain()};
  Var x = cfg.init == InitRule::adjoint ? adjoint_apply(A, y) : tape.constant(Tensor::zeros(xs));
  UnrollResult res{x, {}};
  const char* name = cfg.variant == Variant::gd ? "gd_unroll" : "pgd_unroll";
  for (int k = 0; k < cfg.iterations; ++k) {
    if (record) {
      res.trajectory.iterates.push_back(x.value());
      res.trajectory.data_fidelity.push_back(half_residual(A, x.value(), y.value()));
    }
    Var grad = adjoint_apply(A, sub(apply(A, x), y));
    std::optional<Tensor> w = jitter ? jitter->draw(k + 1, xs) : std::nullopt;
    if (cfg.variant == Variant::gd) {
      Var f = net.forward(params, x);
      if (record) res.trajectory.net_outputs.push_back(f.value());
      Var s = add(grad, f);
      if (w) s = add_const(s, *w);
      x = sub(x, scale(s, cfg.step));
    } else {
      Var s = w ? add_const(grad, *w) : grad;
      x = net.forward(params, sub(x, scale(s, cfg.step)));
      if (record) res.trajectory.net_outputs.push_back(x.value());
    }
    if (record) res.trajectory.noises.push_back(w ? std::move(*w) : Tensor::zeros(xs));
    if (!x.value().all_finite()) throw DivergenceError(name, k + 1);
  }
  if (record) {
    res.trajectory.iterates.push_back(x.value());
    res.trajectory.data_fidelity.push_back(half_residual(A, x.value(), y.value()));
  }
  res.output = x;
  return res;
}

}  // namespace detail

/// GD unrolling on `tape`. y: [rows x m]. Gradients flow to the bound
/// parameters and to y (used by the attacks); injected noise is constant.
inline UnrollResult gd_unroll(Tape& tape, std::span<const Var> params, const GradientNet& net,
                              const LinearOperator& A, Var y, const UnrollConfig& cfg,
                              const Jitter* jitter = nullptr, bool record = false) {
  if (cfg.variant != Variant::gd) throw std::invalid_argument("gd_unroll: config variant is not gd");
  return detail::unroll(tape, params, net, A, y, cfg, jitter, record);
}

inline UnrollResult pgd_unroll(Tape& tape, std::span<const Var> params, const GradientNet& net,
                               const LinearOperator& A, Var y, const UnrollConfig& cfg,
                               const Jitter* jitter = nullptr, bool record = false) {
  if (cfg.variant != Variant::pgd) throw std::invalid_argument("pgd_unroll: config variant is not pgd");
  if (net.role() != NetRole::proximal) throw std::invalid_argument("pgd_unroll: net role must be proximal");
  return detail::unroll(tape, params, net, A, y, cfg, jitter, record);
}

inline UnrollResult run_solver(Tape& tape, std::span<const Var> params, const UnrolledSolver& solver,
                               const LinearOperator& A, Var y, const Jitter* jitter = nullptr,
                               bool record = false) {
  return solver.config.variant == Variant::gd
             ? gd_unroll(tape, params, solver.net, A, y, solver.config, jitter, record)
             : pgd_unroll(tape, params, solver.net, A, y, solver.config, jitter, record);
}

/// Full trajectory (values only) for a [rows x m] batch.
inline Trajectory trajectory(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& y,
                             const Jitter* jitter = nullptr) {
  Tape tape;
  auto pv = solver.net.bind(tape, false);
  return run_solver(tape, pv, solver, A, tape.constant(y), jitter, true).trajectory;
}

/// Inference: x_K with jitter off. Accepts [m] or [rows x m].
inline Tensor reconstruct(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& y) {
  Tape tape;
  auto pv = solver.net.bind(tape, false);
  const bool vec = y.rank() == 1;
  Var in = tape.constant(vec ? y.reshaped(Shape{1, y.size()}) : y);
  Tensor out = run_solver(tape, pv, solver, A, in).output.value();
  return vec ? out.reshaped(Shape{out.size()}) : out;
}

}  // namespace sgdjit
