#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape owns every intermediate value of one forward pass. Ops are free
// functions on Var handles; each records its output together with a
// backward rule that accumulates into the grads of its inputs. Nodes whose
// inputs never require a gradient carry no backward rule at all.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sgdjit/tensor.hpp"

namespace sgdjit {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMatrix> map(Tensor& t, std::size_t r, std::size_t c) {
  return {t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
inline Eigen::Map<const RowMatrix> cmap(const Tensor& t, std::size_t r, std::size_t c) {
  return {t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

}  // namespace detail

using NodeId = std::uint32_t;

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends an op output. The backward rule is kept only when some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward rule) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owned(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(
        Node{std::move(value), {}, needs, needs ? std::move(rule) : Backward{}});
    return Var{this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient flowing into `id` during backward (the adjoint of its output).
  const Tensor& upstream(NodeId id) const { return nodes_[id].grad; }

  /// Accumulation buffer for `id`, allocated as zeros on first use.
  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  /// Gradient of the last backward loss w.r.t. `v`; zeros when nothing flowed.
  Tensor grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  void backward(Var loss) {
    check_owned(loss);
    if (nodes_[loss.id].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       to_string(nodes_[loss.id].value.shape));
    for (Node& n : nodes_) n.grad = Tensor{};
    grad_buffer(loss.id).data[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, static_cast<NodeId>(i));
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw std::logic_error("Var does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline void accumulate(Tape& t, NodeId id, const Tensor& g, double scale = 1.0) {
  if (!t.requires_grad(id)) return;
  Tensor& buf = t.grad_buffer(id);
  if (buf.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += scale * g[i];
  } else {
    // scalar operand that was broadcast
    double s = 0.0;
    for (double v : g.data) s += v;
    buf[0] += scale * s;
  }
}

inline bool is_scalar_operand(const Tensor& t) { return t.rank() == 0 && t.size() == 1; }

inline Shape broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return a.shape;
  if (is_scalar_operand(b)) return a.shape;
  if (is_scalar_operand(a)) return b.shape;
  throw ShapeError(op, a.shape, b.shape);
}

template <class F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
  Tensor out(broadcast_shape(op, a, b));
  const std::size_t sa = a.size() == 1 ? 0 : 1;
  const std::size_t sb = b.size() == 1 ? 0 : 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i * sa], b[i * sb]);
  return out;
}

inline void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw ShapeError(op, a.shape, b.shape);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = detail::zip("add", a.value(), b.value(),
                           [](double x, double y) { return x + y; });
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, NodeId self) {
    detail::accumulate(t, a, t.upstream(self));
    detail::accumulate(t, b, t.upstream(self));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = detail::zip("sub", a.value(), b.value(),
                           [](double x, double y) { return x - y; });
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, NodeId self) {
    detail::accumulate(t, a, t.upstream(self));
    detail::accumulate(t, b, t.upstream(self), -1.0);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = detail::zip("mul", a.value(), b.value(),
                           [](double x, double y) { return x * y; });
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, NodeId self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a))
      detail::accumulate(t, a, detail::zip("mul", g, bv, [](double x, double y) { return x * y; }));
    if (t.requires_grad(b))
      detail::accumulate(t, b, detail::zip("mul", g, av, [](double x, double y) { return x * y; }));
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = s * a.value();
  return t.record(std::move(out), {a}, [a = a.id, s](Tape& t, NodeId self) {
    detail::accumulate(t, a, t.upstream(self), s);
  });
}

/// Adds a constant tensor (no gradient flows into it).
inline Var add_const(Var a, const Tensor& c) {
  Tape& t = *a.tape;
  detail::check_same("add_const", a.value(), c);
  Tensor out = a.value() + c;
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, NodeId self) {
    detail::accumulate(t, a, t.upstream(self));
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return t.record(Tensor::scalar(s), {a}, [a = a.id](Tape& t, NodeId self) {
    const double g = t.upstream(self)[0];
    Tensor& buf = t.grad_buffer(a);
    for (double& v : buf.data) v += g;
  });
}

/// Squared l2 distance summed over all coordinates (not averaged).
inline Var mse_loss(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same("mse_loss", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return t.record(Tensor::scalar(s), {a, b}, [a = a.id, b = b.id](Tape& t, NodeId self) {
    const double g = t.upstream(self)[0];
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& buf = t.grad_buffer(a);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] += 2.0 * g * (av[i] - bv[i]);
    }
    if (t.requires_grad(b)) {
      Tensor& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] -= 2.0 * g * (av[i] - bv[i]);
    }
  });
}

inline Var reshape(Var a, Shape s) {
  Tape& t = *a.tape;
  Tensor out = a.value().reshaped(std::move(s));
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, NodeId self) {
    detail::accumulate(t, a, t.upstream(self));
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, NodeId self) {
    const Tensor& g = t.upstream(self);
    const Tensor& x = t.value(a);
    Tensor& buf = t.grad_buffer(a);
    // subgradient at 0 is 0
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) buf[i] += g[i];
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (double& v : out.data) v = std::tanh(v);
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, NodeId self) {
    const Tensor& g = t.upstream(self);
    const Tensor& y = t.value(self);
    Tensor& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < y.size(); ++i) buf[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

/// M[m x n] * v[n] -> [m].
inline Var matvec(Var m, Var v) {
  Tape& t = *m.tape;
  const Tensor& M = m.value();
  const Tensor& x = v.value();
  if (M.rank() != 2 || x.rank() != 1 || M.shape[1] != x.shape[0])
    throw ShapeError("matvec", M.shape, x.shape);
  const std::size_t rows = M.shape[0], cols = M.shape[1];
  Tensor out(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += M[i * cols + j] * x[j];
    out[i] = s;
  }
  return t.record(std::move(out), {m, v}, [m = m.id, v = v.id, rows, cols](Tape& t, NodeId self) {
    const Tensor& g = t.upstream(self);
    const Tensor& M = t.value(m);
    const Tensor& x = t.value(v);
    if (t.requires_grad(v)) {
      Tensor& bx = t.grad_buffer(v);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) bx[j] += M[i * cols + j] * g[i];
    }
    if (t.requires_grad(m)) {
      Tensor& bm = t.grad_buffer(m);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) bm[i * cols + j] += g[i] * x[j];
    }
  });
}

/// Row-batched affine map: X[B x in] * W^T + b, with W[out x in], b[out].
inline Var affine_rows(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& bias = b.value();
  if (X.rank() != 2 || W.rank() != 2 || X.shape[1] != W.shape[1])
    throw ShapeError("affine_rows", X.shape, W.shape);
  if (bias.rank() != 1 || bias.shape[0] != W.shape[0])
    throw ShapeError("affine_rows bias", W.shape, bias.shape);
  const std::size_t rows = X.shape[0], in = W.shape[1], outw = W.shape[0];
  Tensor out(Shape{rows, outw});
  {
    auto Xm = detail::cmap(X, rows, in);
    auto Wm = detail::cmap(W, outw, in);
    auto Om = detail::map(out, rows, outw);
    Om.noalias() = Xm * Wm.transpose();
    Om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data.data(), static_cast<Eigen::Index>(outw));
  }
  return t.record(std::move(out), {x, w, b},
                  [x = x.id, w = w.id, b = b.id, rows, in, outw](Tape& t, NodeId self) {
    auto G = detail::cmap(t.upstream(self), rows, outw);
    if (t.requires_grad(x))
      detail::map(t.grad_buffer(x), rows, in).noalias() += G * detail::cmap(t.value(w), outw, in);
    if (t.requires_grad(w))
      detail::map(t.grad_buffer(w), outw, in).noalias() += G.transpose() * detail::cmap(t.value(x), rows, in);
    if (t.requires_grad(b)) {
      Tensor& bb = t.grad_buffer(b);
      Eigen::Map<Eigen::RowVectorXd>(bb.data.data(), static_cast<Eigen::Index>(outw)) += G.colwise().sum();
    }
  });
}

namespace detail {

struct ConvDims {
  std::size_t batch, c_in, c_out, length, k, pad;
};

inline ConvDims conv_dims(const Tensor& s, const Tensor& w) {
  if (w.rank() != 3) throw ShapeError("conv1d: kernels must be [c_out x c_in x k], got " + to_string(w.shape));
  if (w.shape[2] % 2 == 0)
    throw ShapeError("conv1d: kernel length must be odd, got " + std::to_string(w.shape[2]));
  ConvDims d{};
  if (s.rank() == 2) {
    d.batch = 1;
    d.c_in = s.shape[0];
    d.length = s.shape[1];
  } else if (s.rank() == 3) {
    d.batch = s.shape[0];
    d.c_in = s.shape[1];
    d.length = s.shape[2];
  } else {
    throw ShapeError("conv1d", s.shape, w.shape);
  }
  if (w.shape[1] != d.c_in) throw ShapeError("conv1d", s.shape, w.shape);
  d.c_out = w.shape[0];
  d.k = w.shape[2];
  d.pad = d.k / 2;
  return d;
}

// Valid output range [lo, hi) for tap offset `off` so that t + off is in range.
inline std::pair<std::size_t, std::size_t> tap_range(std::ptrdiff_t off, std::size_t len) {
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(len),
                                                     static_cast<std::ptrdiff_t>(len) - off);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// im2col for samples [n0, n0 + count): cols[(ci*k + j) x (n*T + t)] = S[n, ci, t + j - pad].
inline void im2col(const Tensor& S, const ConvDims& d, std::size_t n0, std::size_t count, RowMatrix& cols) {
  const std::size_t T = d.length;
  cols.setZero(static_cast<Eigen::Index>(d.c_in * d.k), static_cast<Eigen::Index>(count * T));
  for (std::size_t ci = 0; ci < d.c_in; ++ci)
    for (std::size_t j = 0; j < d.k; ++j) {
      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(d.pad);
      const auto [lo, hi] = tap_range(off, T);
      double* crow = &cols(static_cast<Eigen::Index>(ci * d.k + j), 0);
      for (std::size_t n = 0; n < count; ++n) {
        const double* irow = &S.data[((n0 + n) * d.c_in + ci) * T];
        for (std::size_t tt = lo; tt < hi; ++tt) crow[n * T + tt] = irow[tt + off];
      }
    }
}

// Samples per GEMM chunk so that the column buffer stays around 4M entries.
inline std::size_t conv_chunk(const ConvDims& d) {
  const std::size_t per = std::max<std::size_t>(1, d.c_in * d.k * d.length);
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per, 1, d.batch);
}

inline Var conv1d_impl(Var signal, Var kernels, const Var* bias) {
  Tape& t = *signal.tape;
  const Tensor& S = signal.value();
  const Tensor& W = kernels.value();
  const ConvDims d = conv_dims(S, W);
  if (bias && (bias->value().rank() != 1 || bias->value().shape[0] != d.c_out))
    throw ShapeError("conv1d bias", W.shape, bias->value().shape);
  Shape out_shape = S.rank() == 2 ? Shape{d.c_out, d.length} : Shape{d.batch, d.c_out, d.length};
  Tensor out(out_shape);
  const std::size_t T = d.length, ck = d.c_in * d.k;
  const std::size_t chunk = conv_chunk(d);
  auto Wm = cmap(W, d.c_out, ck);
  RowMatrix cols, res;
  for (std::size_t n0 = 0; n0 < d.batch; n0 += chunk) {
    const std::size_t cnt = std::min(chunk, d.batch - n0);
    im2col(S, d, n0, cnt, cols);
    res.noalias() = Wm * cols;
    for (std::size_t n = 0; n < cnt; ++n)
      for (std::size_t co = 0; co < d.c_out; ++co) {
        double* orow = &out.data[((n0 + n) * d.c_out + co) * T];
        const double* rrow = &res(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(n * T));
        const double bv = bias ? bias->value()[co] : 0.0;
        for (std::size_t tt = 0; tt < T; ++tt) orow[tt] = rrow[tt] + bv;
      }
  }
  auto rule = [s = signal.id, w = kernels.id, b = bias ? bias->id : NodeId{0},
               has_bias = bias != nullptr, d](Tape& t, NodeId self) {
    const Tensor& g = t.upstream(self);
    const Tensor& S = t.value(s);
    const std::size_t T = d.length, ck = d.c_in * d.k;
    const bool gs = t.requires_grad(s), gw = t.requires_grad(w);
    const std::size_t chunk = conv_chunk(d);
    auto Wm = cmap(t.value(w), d.c_out, ck);
    RowMatrix cols, gm, gcols;
    for (std::size_t n0 = 0; n0 < d.batch && (gs || gw); n0 += chunk) {
      const std::size_t cnt = std::min(chunk, d.batch - n0);
      gm.resize(static_cast<Eigen::Index>(d.c_out), static_cast<Eigen::Index>(cnt * T));
      for (std::size_t n = 0; n < cnt; ++n)
        for (std::size_t co = 0; co < d.c_out; ++co)
          std::copy_n(&g.data[((n0 + n) * d.c_out + co) * T], T,
                      &gm(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(n * T)));
      if (gw) {
        im2col(S, d, n0, cnt, cols);
        map(t.grad_buffer(w), d.c_out, ck).noalias() += gm * cols.transpose();
      }
      if (gs) {
        gcols.noalias() = Wm.transpose() * gm;
        Tensor& bs = t.grad_buffer(s);
        for (std::size_t ci = 0; ci < d.c_in; ++ci)
          for (std::size_t j = 0; j < d.k; ++j) {
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(d.pad);
            const auto [lo, hi] = tap_range(off, T);
            const double* crow = &gcols(static_cast<Eigen::Index>(ci * d.k + j), 0);
            for (std::size_t n = 0; n < cnt; ++n) {
              double* srow = &bs.data[((n0 + n) * d.c_in + ci) * T];
              for (std::size_t tt = lo; tt < hi; ++tt) srow[tt + off] += crow[n * T + tt];
            }
          }
      }
    }
    if (has_bias && t.requires_grad(b)) {
      Tensor& bb = t.grad_buffer(b);
      for (std::size_t n = 0; n < d.batch; ++n)
        for (std::size_t co = 0; co < d.c_out; ++co) {
          const double* grow = &g.data[(n * d.c_out + co) * T];
          double acc = 0.0;
          for (std::size_t tt = 0; tt < T; ++tt) acc += grow[tt];
          bb[co] += acc;
        }
    }
  };
  if (bias) return t.record(std::move(out), {signal, kernels, *bias}, std::move(rule));
  return t.record(std::move(out), {signal, kernels}, std::move(rule));
}

}  // namespace detail

/// Same-padded 1D convolution (cross-correlation form, as in CNN layers).
/// signal: [c_in x T] or [N x c_in x T]; kernels: [c_out x c_in x k], k odd.
inline Var conv1d(Var signal, Var kernels) { return detail::conv1d_impl(signal, kernels, nullptr); }
inline Var conv1d(Var signal, Var kernels, Var bias) { return detail::conv1d_impl(signal, kernels, &bias); }

}  // namespace sgdjit
