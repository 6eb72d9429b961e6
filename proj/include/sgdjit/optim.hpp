#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "sgdjit/nets.hpp"
#include "sgdjit/tensor.hpp"

namespace sgdjit {

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// Bias-corrected Adam. Moment buffers are created on the first call.
inline void adam_update(AdamState& st, std::vector<NamedTensor>& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_update: gradient count mismatch");
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.push_back(Tensor::zeros(p.value.shape));
      st.v.push_back(Tensor::zeros(p.value.shape));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape != params[i].value.shape)
      throw ShapeError("adam_update '" + params[i].name + "'", params[i].value.shape, grads[i].shape);
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      p[j] -= st.learning_rate * mh / (std::sqrt(vh) + st.epsilon);
    }
  }
}

}  // namespace sgdjit
