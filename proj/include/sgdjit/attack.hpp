#pragma once

// l2 projected gradient ascent on measurement perturbations, batched over
// samples. Each sample owns an equal block of consecutive rows and its
// perturbation is constrained to the l2 ball of radius epsilon over that
// whole block.

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "sgdjit/autodiff.hpp"
#include "sgdjit/linops.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

struct AttackConfig {
  double epsilon = 0.01;
  int steps = 50;
  double step_size = 0.05;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("attack: step size must be > 0");
  }

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

inline void to_json(nlohmann::json& j, const AttackConfig& a) {
  j = {{"epsilon", a.epsilon}, {"steps", a.steps}, {"step_size", a.step_size}};
}
inline void from_json(const nlohmann::json& j, AttackConfig& a) {
  j.at("epsilon").get_to(a.epsilon);
  j.at("steps").get_to(a.steps);
  j.at("step_size").get_to(a.step_size);
}

struct BatchAttack {
  Tensor perturbation;              // same shape as y
  std::vector<double> loss;         // best attacked loss per sample
  std::vector<double> clean_loss;   // loss at e = 0 per sample
};

namespace detail {

inline std::vector<double> per_sample_sq(const Tensor& a, const Tensor& b, std::size_t samples) {
  std::vector<double> out(samples, 0.0);
  const std::size_t block = a.size() / samples;
  for (std::size_t s = 0; s < samples; ++s)
    for (std::size_t i = s * block; i < (s + 1) * block; ++i) {
      const double d = a[i] - b[i];
      out[s] += d * d;
    }
  return out;
}

}  // namespace detail

/// Maximizes ||x - H(y + e)||^2 per sample over ||e|| <= epsilon. Starts at
/// e = 0; each step moves along the l2-normalized gradient by `step_size`
/// and projects back onto the ball. Returns the best iterate seen.
inline BatchAttack worst_case_batch(const UnrolledSolver& solver, const LinearOperator& A,
                                    const Tensor& x, const Tensor& y, std::size_t samples,
                                    const AttackConfig& cfg) {
  cfg.validate();
  if (samples == 0 || y.size() % samples != 0 || x.size() % samples != 0)
    throw ShapeError("worst_case_attack: batch does not split into " + std::to_string(samples) + " samples");
  const std::size_t block = y.size() / samples;
  BatchAttack res{Tensor::zeros(y.shape), {}, {}};
  Tensor e = Tensor::zeros(y.shape);

  auto evaluate = [&](bool with_grad, Tensor* grad) {
    Tape tape;
    auto pv = solver.net.bind(tape, false);
    Var ev = tape.leaf(e, with_grad);
    Var yin = add(tape.constant(y), ev);
    Var out = run_solver(tape, pv, solver, A, yin).output;
    std::vector<double> losses = detail::per_sample_sq(out.value(), x, samples);
    if (with_grad) {
      Var loss = mse_loss(out, tape.constant(x));
      tape.backward(loss);
      *grad = tape.grad(ev);
    }
    return losses;
  };

  if (cfg.epsilon == 0.0) {
    res.clean_loss = evaluate(false, nullptr);
    res.loss = res.clean_loss;
    return res;
  }

  Tensor g;
  for (int it = 0; it <= cfg.steps; ++it) {
    const bool last = it == cfg.steps;
    std::vector<double> losses = evaluate(!last, &g);
    if (it == 0) {
      res.clean_loss = losses;
      res.loss = losses;
    }
    for (std::size_t s = 0; s < samples; ++s) {
      if (losses[s] > res.loss[s]) {
        res.loss[s] = losses[s];
        std::copy_n(e.data.begin() + static_cast<std::ptrdiff_t>(s * block), block,
                    res.perturbation.data.begin() + static_cast<std::ptrdiff_t>(s * block));
      }
    }
    if (last) break;
    for (std::size_t s = 0; s < samples; ++s) {
      double* es = &e.data[s * block];
      const double* gs = &g.data[s * block];
      double gn = 0.0;
      for (std::size_t i = 0; i < block; ++i) gn += gs[i] * gs[i];
      gn = std::sqrt(gn);
      if (gn > 0.0)
        for (std::size_t i = 0; i < block; ++i) es[i] += cfg.step_size * gs[i] / gn;
      double en = 0.0;
      for (std::size_t i = 0; i < block; ++i) en += es[i] * es[i];
      en = std::sqrt(en);
      if (en > cfg.epsilon)
        for (std::size_t i = 0; i < block; ++i) es[i] *= cfg.epsilon / en;
    }
  }
  return res;
}

}  // namespace sgdjit
