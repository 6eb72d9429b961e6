#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace sgdjit;
using namespace testing;

namespace {

// Reference same-padded cross-correlation, sample by sample.
Tensor conv_naive(const Tensor& s, const Tensor& w, const Tensor* b) {
  const std::size_t N = s.shape[0], Ci = s.shape[1], T = s.shape[2];
  const std::size_t Co = w.shape[0], K = w.shape[2], pad = K / 2;
  Tensor out(Shape{N, Co, T});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t t = 0; t < T; ++t) {
        double acc = b ? (*b)[co] : 0.0;
        for (std::size_t ci = 0; ci < Ci; ++ci)
          for (std::size_t j = 0; j < K; ++j) {
            const long src = static_cast<long>(t + j) - static_cast<long>(pad);
            if (src < 0 || src >= static_cast<long>(T)) continue;
            acc += w[(co * Ci + ci) * K + j] * s[(n * Ci + ci) * T + static_cast<std::size_t>(src)];
          }
        out[(n * Co + co) * T + t] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor construction and shape errors") {
  Tensor t(Shape{2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor::scalar(3.5).item() == 3.5);
  CHECK_THROWS_AS(dot(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ShapeError);
}

TEST_CASE("slice_rows copies contiguous leading slices") {
  Tensor t(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor s = slice_rows(t, 1, 2);
  CHECK(s.shape == Shape{2, 2});
  CHECK(s.values() == std::vector<double>{3, 4, 5, 6});
  CHECK_THROWS_AS(slice_rows(t, 2, 2), ShapeError);
}

TEST_CASE("elementwise ops reject mismatched shapes but broadcast scalars") {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  Var b = tape.leaf(Tensor(Shape{4}, {1, 2, 3, 4}));
  Var s = tape.leaf(Tensor::scalar(2.0));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mse_loss(a, b), ShapeError);
  CHECK(mul(a, s).value().values() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("backward requires a scalar loss and vars from the same tape") {
  Tape t1, t2;
  Var a = t1.leaf(Tensor::vector({1, 2}), true);
  Var b = t2.leaf(Tensor::vector({1, 2}), true);
  CHECK_THROWS_AS(t1.backward(a), ShapeError);
  CHECK_THROWS_AS(add(a, b), std::logic_error);
}

TEST_CASE("nodes without grad-requiring inputs get no gradient") {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({1, 2}), true);
  Var c = tape.constant(Tensor::vector({3, 4}));
  tape.backward(sum(mul(a, c)));
  CHECK(tape.grad(a).values() == std::vector<double>{3, 4});
  CHECK(tape.grad(c).values() == std::vector<double>{0, 0});
}

TEST_CASE("finite differences: pointwise primitives") {
  const Tensor a = randn(Shape{3, 4}, 1), b = randn(Shape{3, 4}, 2);
  const std::vector<Tensor> in{a, b};
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, add(v[0], v[1])); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, sub(v[0], v[1])); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, mul(v[0], v[1])); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, scale(v[0], -1.7)); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, sgdjit::tanh(v[0])); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape&, const auto& v) { return mse_loss(v[0], v[1]); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, reshape(v[0], Shape{12})); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) {
          return project(t, add_const(v[0], Tensor::full(Shape{3, 4}, 0.3)));
        }, in) < 1e-7);
}

TEST_CASE("finite differences: scalar broadcast") {
  const std::vector<Tensor> in{randn(Shape{5}, 3), Tensor::scalar(0.7)};
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, mul(v[0], v[1])); }, in) < 1e-7);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, add(v[1], v[0])); }, in) < 1e-7);
}

TEST_CASE("finite differences: relu away from the kink") {
  Tensor a = randn(Shape{20}, 4);
  for (double& v : a.data)
    if (std::abs(v) < 0.05) v = 0.5;
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, relu(v[0])); }, {a}) < 1e-7);
}

TEST_CASE("finite differences: matvec and affine_rows") {
  const std::vector<Tensor> mv{randn(Shape{4, 3}, 5), randn(Shape{3}, 6)};
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, matvec(v[0], v[1])); }, mv) < 1e-7);
  const std::vector<Tensor> af{randn(Shape{5, 3}, 7), randn(Shape{4, 3}, 8), randn(Shape{4}, 9)};
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, affine_rows(v[0], v[1], v[2])); }, af) <
        1e-7);
}

TEST_CASE("affine_rows matches the explicit formula") {
  const Tensor x = randn(Shape{3, 2}, 10), w = randn(Shape{4, 2}, 11), b = randn(Shape{4}, 12);
  Tape tape;
  const Tensor out = affine_rows(tape.leaf(x), tape.leaf(w), tape.leaf(b)).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t o = 0; o < 4; ++o)
      CHECK(out[r * 4 + o] == Catch::Approx(x[r * 2] * w[o * 2] + x[r * 2 + 1] * w[o * 2 + 1] + b[o]).epsilon(1e-14));
}

TEST_CASE("conv1d matches a direct loop and passes finite differences") {
  const Tensor s = randn(Shape{2, 3, 9}, 13), w = randn(Shape{4, 3, 5}, 14), b = randn(Shape{4}, 15);
  Tape tape;
  const Tensor out = conv1d(tape.leaf(s), tape.leaf(w), tape.leaf(b)).value();
  CHECK(rel_err(out, conv_naive(s, w, &b)) < 1e-14);
  const Tensor nobias = conv1d(tape.leaf(s), tape.leaf(w)).value();
  CHECK(rel_err(nobias, conv_naive(s, w, nullptr)) < 1e-14);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, conv1d(v[0], v[1], v[2])); }, {s, w, b}) <
        1e-7);
  // kernel longer than the signal: every tap partially out of range
  const Tensor s2 = randn(Shape{1, 2, 3}, 16), w2 = randn(Shape{2, 2, 7}, 17);
  CHECK(max_grad_error([](Tape& t, const auto& v) { return project(t, conv1d(v[0], v[1])); }, {s2, w2}) < 1e-7);
  CHECK_THROWS_AS(conv1d(tape.leaf(s), tape.leaf(randn(Shape{4, 3, 4}, 1))), ShapeError);
  CHECK_THROWS_AS(conv1d(tape.leaf(s), tape.leaf(randn(Shape{4, 2, 3}, 1))), ShapeError);
}

TEST_CASE("gradients accumulate over fan-out") {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({1.5, -2.0}), true);
  Var y = mul(a, a);
  tape.backward(sum(add(y, a)));
  CHECK(tape.grad(a).values() == std::vector<double>{4.0, -3.0});
}

TEST_CASE("backward twice resets the gradients") {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({2.0}), true);
  Var l = sum(mul(a, a));
  tape.backward(l);
  tape.backward(l);
  CHECK(tape.grad(a)[0] == 4.0);
}
