#pragma once

// Shared helpers for the test binaries: finite-difference gradient checks
// and small tensor constructors.

#include <cmath>
#include <functional>
#include <vector>

#include "sgdjit/autodiff.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/tensor.hpp"

namespace testing {

using namespace sgdjit;

inline Tensor randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return gaussian(std::move(s), sd, rng);
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double rel_err(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  return norm(a - b) / std::max({norm(a), norm(b), floor});
}

/// Builds a scalar on a fresh tape from leaves holding `inputs`.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
  return f(tape, leaves).value().item();
}

inline std::vector<Tensor> tape_grads(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  tape.backward(f(tape, leaves));
  std::vector<Tensor> out;
  for (const auto& v : leaves) out.push_back(tape.grad(v));
  return out;
}

/// Central differences of f w.r.t. every coordinate of inputs[which].
inline Tensor fd_grad(const ScalarFn& f, std::vector<Tensor> inputs, std::size_t which, double h = 1e-6) {
  Tensor g(inputs[which].shape);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x0 = inputs[which][i];
    inputs[which][i] = x0 + h;
    const double fp = eval_scalar(f, inputs);
    inputs[which][i] = x0 - h;
    const double fm = eval_scalar(f, inputs);
    inputs[which][i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Largest relative error between tape and finite-difference gradients over all inputs.
inline double max_grad_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  const auto g = tape_grads(f, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) worst = std::max(worst, rel_err(g[k], fd_grad(f, inputs, k, h)));
  return worst;
}

/// Contracts a tensor-valued op to a scalar with fixed random weights.
inline Var project(Tape& t, Var out, std::uint64_t seed = 99) {
  return sum(mul(out, t.constant(randn(out.shape(), seed))));
}

}  // namespace testing
