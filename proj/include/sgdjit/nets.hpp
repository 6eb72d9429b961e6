#pragma once

// Learned gradient f_theta (gradient role) and learned proximal map
// (proximal role). Both are shape-preserving maps applied row-wise to a
// [rows x n] batch.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/autodiff.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/tensor.hpp"

namespace sgdjit {

enum class Activation { tanh, relu, identity };
enum class NetRole { gradient, proximal };
enum class ArchKind { mlp, dncnn1d };

NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::tanh, "tanh"},
                                          {Activation::relu, "relu"},
                                          {Activation::identity, "identity"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NetRole, {{NetRole::gradient, "gradient"}, {NetRole::proximal, "proximal"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ArchKind, {{ArchKind::mlp, "mlp"}, {ArchKind::dncnn1d, "dncnn1d"}})

struct Architecture {
  ArchKind kind = ArchKind::mlp;
  // mlp: layer widths including input and output, e.g. {2, 32, 32, 2}
  std::vector<std::size_t> widths{2, 32, 32, 2};
  // dncnn1d: conv layers, hidden channels, odd kernel length
  std::size_t depth = 5;
  std::size_t channels = 64;
  std::size_t kernel = 3;
  Activation activation = Activation::tanh;
  NetRole role = NetRole::gradient;

  static Architecture mlp(std::vector<std::size_t> widths, Activation act = Activation::tanh,
                          NetRole role = NetRole::gradient) {
    Architecture a;
    a.kind = ArchKind::mlp;
    a.widths = std::move(widths);
    a.activation = act;
    a.role = role;
    return a;
  }

  static Architecture dncnn1d(std::size_t depth, std::size_t channels, std::size_t kernel = 3,
                              Activation act = Activation::relu, NetRole role = NetRole::gradient) {
    Architecture a;
    a.kind = ArchKind::dncnn1d;
    a.depth = depth;
    a.channels = channels;
    a.kernel = kernel;
    a.activation = act;
    a.role = role;
    return a;
  }

  void validate() const {
    if (kind == ArchKind::mlp) {
      if (widths.size() < 2) throw std::invalid_argument("mlp: need at least input and output widths");
      for (std::size_t w : widths)
        if (w == 0) throw std::invalid_argument("mlp: zero-width layer");
      if (widths.front() != widths.back())
        throw std::invalid_argument("mlp: output width must equal input width");
    } else {
      if (depth < 2) throw std::invalid_argument("dncnn1d: depth must be >= 2");
      if (channels == 0) throw std::invalid_argument("dncnn1d: zero-width layer");
      if (kernel % 2 == 0) throw std::invalid_argument("dncnn1d: kernel length must be odd");
    }
  }

  /// Layer shapes as (weight shape, bias length) in forward order.
  std::vector<std::pair<Shape, std::size_t>> layer_shapes() const {
    std::vector<std::pair<Shape, std::size_t>> out;
    if (kind == ArchKind::mlp) {
      for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        out.push_back({Shape{widths[i + 1], widths[i]}, widths[i + 1]});
    } else {
      for (std::size_t l = 0; l < depth; ++l) {
        const std::size_t cin = l == 0 ? 1 : channels;
        const std::size_t cout = l + 1 == depth ? 1 : channels;
        out.push_back({Shape{cout, cin, kernel}, cout});
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [w, b] : layer_shapes()) n += numel(w) + b;
    return n;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"kind", a.kind},         {"activation", a.activation}, {"role", a.role},
                     {"widths", a.widths},     {"depth", a.depth},           {"channels", a.channels},
                     {"kernel", a.kernel}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  a = Architecture{};
  j.at("kind").get_to(a.kind);
  j.at("activation").get_to(a.activation);
  j.at("role").get_to(a.role);
  if (j.contains("widths")) j.at("widths").get_to(a.widths);
  if (j.contains("depth")) j.at("depth").get_to(a.depth);
  if (j.contains("channels")) j.at("channels").get_to(a.channels);
  if (j.contains("kernel")) j.at("kernel").get_to(a.kernel);
}

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

class GradientNet {
 public:
  GradientNet() = default;

  /// Glorot-normal weights for tanh/identity, He-normal for relu; zero biases.
  /// `zero_final` zeroes the last layer so the body starts as the zero map.
  static GradientNet build(const Architecture& arch, std::uint64_t seed, bool zero_final = false) {
    arch.validate();
    GradientNet net;
    net.arch_ = arch;
    Rng rng = make_rng(seed, streams::init);
    const auto shapes = arch.layer_shapes();
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      const auto& [ws, bl] = shapes[l];
      std::size_t fan_in = 0, fan_out = 0;
      if (arch.kind == ArchKind::mlp) {
        fan_in = ws[1];
        fan_out = ws[0];
      } else {
        fan_in = ws[1] * ws[2];
        fan_out = ws[0] * ws[2];
      }
      const double sd = arch.activation == Activation::relu
                            ? std::sqrt(2.0 / static_cast<double>(fan_in))
                            : std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
      Tensor w = gaussian(ws, sd, rng);
      if (zero_final && l + 1 == shapes.size()) w = Tensor::zeros(ws);
      const std::string prefix = "layer" + std::to_string(l);
      net.params_.push_back({prefix + ".weight", std::move(w)});
      net.params_.push_back({prefix + ".bias", Tensor::zeros(Shape{bl})});
    }
    return net;
  }

  /// Wraps explicit parameters; shapes must match the architecture.
  static GradientNet from_parameters(const Architecture& arch, std::vector<NamedTensor> params) {
    arch.validate();
    GradientNet net = build(arch, 0);
    if (params.size() != net.params_.size())
      throw std::invalid_argument("parameter list has " + std::to_string(params.size()) +
                                  " tensors, architecture needs " + std::to_string(net.params_.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name != net.params_[i].name || params[i].value.shape != net.params_[i].value.shape)
        throw ShapeError("parameter '" + params[i].name + "' " + to_string(params[i].value.shape) +
                         " does not match expected '" + net.params_[i].name + "' " +
                         to_string(net.params_[i].value.shape));
    net.params_ = std::move(params);
    return net;
  }

  const Architecture& architecture() const { return arch_; }
  NetRole role() const { return arch_.role; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Places the parameters on `tape` as leaves.
  std::vector<Var> bind(Tape& tape, bool requires_grad) const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(tape.leaf(p.value, requires_grad));
    return out;
  }

  /// x: [rows x n]. Returns f(x) (gradient role) or x + body(x) (proximal role).
  Var forward(std::span<const Var> bound, Var x) const {
    const Shape& s = x.shape();
    if (s.size() != 2) throw ShapeError("net forward expects [rows x n], got " + to_string(s));
    if (bound.size() != params_.size()) throw std::invalid_argument("net forward: parameter binding size mismatch");
    Var body = arch_.kind == ArchKind::mlp ? forward_mlp(bound, x) : forward_dncnn(bound, x);
    return arch_.role == NetRole::proximal ? add(x, body) : body;
  }

  /// Convenience evaluation on a private tape.
  Tensor operator()(const Tensor& x) const {
    Tape tape;
    auto pv = bind(tape, false);
    const bool vec = x.rank() == 1;
    Var in = tape.constant(vec ? x.reshaped(Shape{1, x.size()}) : x);
    Tensor out = forward(pv, in).value();
    return vec ? out.reshaped(x.shape) : out;
  }

 private:
  Var activate(Var v) const {
    switch (arch_.activation) {
      case Activation::tanh: return sgdjit::tanh(v);
      case Activation::relu: return relu(v);
      case Activation::identity: return v;
    }
    return v;
  }

  Var forward_mlp(std::span<const Var> p, Var x) const {
    if (x.shape()[1] != arch_.widths.front())
      throw ShapeError("mlp forward", x.shape(), Shape{arch_.widths.front()});
    Var h = x;
    const std::size_t layers = params_.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      h = affine_rows(h, p[2 * l], p[2 * l + 1]);
      if (l + 1 < layers) h = activate(h);
    }
    return h;
  }

  Var forward_dncnn(std::span<const Var> p, Var x) const {
    const std::size_t rows = x.shape()[0], len = x.shape()[1];
    Var h = reshape(x, Shape{rows, 1, len});
    for (std::size_t l = 0; l < arch_.depth; ++l) {
      h = conv1d(h, p[2 * l], p[2 * l + 1]);
      if (l + 1 < arch_.depth) h = activate(h);
    }
    return reshape(h, Shape{rows, len});
  }

  Architecture arch_;
  std::vector<NamedTensor> params_;
};

/// Empirical Lipschitz constant of the net on a box [-scale, scale]^dim.
/// Each probe takes a secant along a random direction and along a direction
/// refined by power iteration on J^T J, so the result is a lower bound on the
/// true constant. Probe i is the same regardless of the total probe count.
inline double lipschitz_estimate(const GradientNet& net, int probes, std::uint64_t seed,
                                 std::size_t dim, double scale = 1.0, int power_steps = 8) {
  if (probes < 1) throw std::invalid_argument("lipschitz_estimate: probes must be >= 1");
  const double step = 1e-4 * std::max(scale, 1.0);
  const double fd = 1e-6 * std::max(scale, 1.0);
  double best = 0.0;
  auto secant = [&](const Tensor& x, const Tensor& fx, const Tensor& dir) {
    const Tensor xp = axpy(step, dir, x);
    return norm(net(xp) - fx) / (step * norm(dir));
  };
  for (int p = 0; p < probes; ++p) {
    Rng rng = make_rng(seed, streams::probes, static_cast<std::uint64_t>(p));
    const Tensor x = uniform(Shape{1, dim}, -scale, scale, rng);
    const Tensor fx = net(x);
    Tensor v = gaussian(Shape{1, dim}, 1.0, rng);
    best = std::max(best, secant(x, fx, v));
    for (int it = 0; it < power_steps; ++it) {
      const double nv = norm(v);
      if (nv == 0.0) break;
      for (double& c : v.data) c /= nv;
      // J v by central differences, then J^T (J v) through the tape
      Tensor jv = (1.0 / (2.0 * fd)) * (net(axpy(fd, v, x)) - net(axpy(-fd, v, x)));
      if (norm(jv) == 0.0) break;
      Tape tape;
      auto pv = net.bind(tape, false);
      Var xin = tape.leaf(x, true);
      Var out = net.forward(pv, xin);
      Var loss = sum(mul(out, tape.constant(jv)));
      tape.backward(loss);
      v = tape.grad(xin);
    }
    if (norm(v) > 0.0) best = std::max(best, secant(x, fx, v));
  }
  return best;
}

}  // namespace sgdjit
