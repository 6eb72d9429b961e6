#include <catch_amalgamated.hpp>

#include "sgdjit/datagen.hpp"
#include "sgdjit/theory.hpp"
#include "support.hpp"

using namespace sgdjit;
using namespace testing;

namespace {

UnrolledSolver toy_solver(std::uint64_t seed, int K = 10, double eta = 0.1) {
  return {UnrollConfig{K, eta}, GradientNet::build(Architecture::mlp({2, 32, 32, 2}), seed)};
}

UnrolledSolver zero_solver(int K, double eta) {
  return {UnrollConfig{K, eta}, GradientNet::build(Architecture::mlp({2, 8, 2}), 0, true)};
}

QuadraticPotential scaled_identity(double b, std::size_t n) {
  return {b * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n))};
}

}  // namespace

TEST_CASE("perturbation and attack expansions hold across seeds, step sizes and depths") {
  const auto I = LinearOperator::identity(2);
  for (std::uint64_t seed : {0u, 1u, 2u})
    for (double eta : {0.1, 0.5, 1.0})
      for (int K : {1, 2, 10}) {
        const auto s = toy_solver(seed, K, eta);
        const Tensor y = randn(Shape{4, 2}, seed + 10, 0.1);
        const Tensor g = randn(Shape{4, 2}, seed + 20, 0.05);
        const ExpansionCheck p = check_perturbation_expansion(s, I, y, g);
        const ExpansionCheck a = check_attack_expansion(s, I, y, g);
        CHECK(p.passed);
        CHECK(a.passed);
        CHECK(p.perturbed.size() == static_cast<std::size_t>(K + 1));
        CHECK(p.deviation <= 1e-12);
      }
}

TEST_CASE("the expansion needs its correction term for a nonlinear net") {
  const auto s = toy_solver(3);
  const Tensor y = randn(Shape{2, 2}, 4, 0.5);
  const Tensor g = randn(Shape{2, 2}, 5, 0.5);
  const ExpansionCheck c = check_perturbation_expansion(s, LinearOperator::identity(2), y, g);
  REQUIRE(c.passed);
  CHECK(max_abs(c.f_terms.back()) > 1e-6);
  CHECK(max_abs(c.perturbed.back() - (c.clean.back() + g)) > 1e-6);
}

TEST_CASE("zero net: a shift passes straight through") {
  const auto s = zero_solver(10, 0.3);
  const Tensor y = randn(Shape{3, 2}, 6);
  const Tensor g = randn(Shape{3, 2}, 7);
  const ExpansionCheck c = check_perturbation_expansion(s, LinearOperator::identity(2), y, g);
  for (std::size_t k = 0; k < c.perturbed.size(); ++k) {
    CHECK(c.f_terms[k] == Tensor::zeros(y.shape));
    CHECK(max_abs(c.perturbed[k] - (c.clean[k] + g)) <= 1e-15);
  }
}

TEST_CASE("sgd expansion holds and separates noise from regularization") {
  const auto I = LinearOperator::identity(2);
  for (double eta : {0.1, 0.5, 1.0})
    for (int K : {1, 2, 10}) {
      const auto s = toy_solver(8, K, eta);
      const Tensor y = randn(Shape{5, 2}, 9, 0.1);
      const ExpansionCheck c = check_sgd_expansion(s, I, y, JitterSchedule::constant(K, 0.05), 11);
      CHECK(c.passed);
    }
  const auto z = zero_solver(10, 0.1);
  const Tensor y = randn(Shape{2, 2}, 12);
  const ExpansionCheck c = check_sgd_expansion(z, I, y, JitterSchedule::constant(10, 0.05), 13);
  CHECK(c.passed);
  CHECK(c.f_terms.back() == Tensor::zeros(y.shape));
}

TEST_CASE("expansion checks reject unsupported settings") {
  const auto s = toy_solver(0);
  const Tensor y = randn(Shape{1, 2}, 1);
  CHECK_THROWS(check_perturbation_expansion(s, LinearOperator::dense(2, 2, {1, 0, 0, 1}), y, y));
  UnrolledSolver zero_init = s;
  zero_init.config.init = InitRule::zero;
  CHECK_THROWS(check_perturbation_expansion(zero_init, LinearOperator::identity(2), y, y));
  CHECK_THROWS_AS(check_attack_expansion(s, LinearOperator::identity(2), y, randn(Shape{2, 2}, 1)), ShapeError);
  CHECK_THROWS(check_sgd_expansion(s, LinearOperator::identity(2), y, JitterSchedule::constant(3, 0.1), 0));
}

TEST_CASE("noise accumulation oracle") {
  const std::vector<Tensor> w{Tensor::vector({1.0}), Tensor::vector({2.0}), Tensor::vector({4.0})};
  const double eta = 0.5;
  CHECK(noise_accumulation(w, eta, 0)[0] == 0.0);
  CHECK(noise_accumulation(w, eta, 1)[0] == Catch::Approx(-0.5));
  // -(0.5*0.25*1 + 0.5*0.5*2 + 0.5*4)
  CHECK(noise_accumulation(w, eta, 3)[0] == Catch::Approx(-(0.125 + 0.5 + 2.0)));
  CHECK_THROWS(noise_accumulation(w, eta, 4));
}

TEST_CASE("risk decomposition matches the direct jittered error") {
  const auto s = toy_solver(14);
  const auto I = LinearOperator::identity(2);
  const auto [tr, te] = gen_toy(20, 1, 0.01, 14);
  const Tensor x = tr.x.reshaped(Shape{20, 2});
  const Tensor y = tr.y.reshaped(Shape{20, 2});
  const Trajectory clean = trajectory(s, I, y);
  Rng rng(15);
  const auto sched = JitterSchedule::constant(10, 0.01);
  const Jitter j{sched, rng, 2};
  const Trajectory noisy = trajectory(s, I, y, &j);
  const DecompositionCheck d = check_risk_decomposition(x, clean, noisy, 0.1);
  CHECK(d.passed);
  REQUIRE(d.direct.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(d.direct[i] == Catch::Approx(d.decomposed[i]).epsilon(1e-9));
  CHECK(regularization_term(clean, noisy, 0.1) > 0.0);
  CHECK(regularization_term(clean, clean, 0.1) == 0.0);
}

TEST_CASE("variance matching closed form") {
  for (double eta : {0.1, 0.5, 1.0})
    for (int k : {0, 1, 9, 99}) {
      const double sw = variance_matching_sigma(0.2, eta, k);
      double sum = 0.0;
      for (int i = 0; i <= k; ++i) sum += eta * eta * std::pow(1.0 - eta, 2.0 * (k - i)) * sw;
      CHECK(sum == Catch::Approx(0.2).epsilon(1e-12));
    }
  CHECK(variance_matching_sigma(0.3, 1.0, 5) == Catch::Approx(0.3));
  CHECK(variance_matching_sigma(0.0, 0.1, 5) == 0.0);
  CHECK_THROWS(variance_matching_sigma(0.1, 0.0, 3));
  CHECK_THROWS(variance_matching_sigma(0.1, 1.5, 3));
  CHECK_THROWS(variance_matching_sigma(-0.1, 0.5, 3));
}

TEST_CASE("matched jitter gives the zero net an accumulated noise of the target variance") {
  const int K = 10;
  const double eta = 0.1, target = 0.04;
  const double sw = variance_matching_sigma(target, eta, K - 1);
  const auto z = zero_solver(K, eta);
  const std::size_t N = 20000;
  const Tensor y = Tensor::zeros(Shape{N, 2});
  Rng rng(16);
  const auto sched = JitterSchedule::constant(K, sw);
  const Jitter j{sched, rng, 2};
  const Trajectory tr = trajectory(z, LinearOperator::identity(2), y, &j);
  const double mean_sq = squared_norm(tr.iterates.back()) / static_cast<double>(N);
  CHECK(std::abs(mean_sq - target) < 0.05 * target);
}

TEST_CASE("lipschitz check on the gradient field") {
  const auto s = toy_solver(17);
  const LipschitzReport r = check_lipschitz_F(LinearOperator::identity(2), s.net, 1000, 17);
  CHECK(r.passed);
  CHECK(r.passed_probes == 1000);
  CHECK(r.L_hat > 0.0);
  CHECK(r.mu == 1.0);
  CHECK(r.worst_ratio <= 1.0);
  const auto A = LinearOperator::convolution({0.2, 1.0, -0.4}, 2);
  CHECK(check_lipschitz_F(A, s.net, 200, 18).passed);
  const auto prox = GradientNet::build(Architecture::mlp({2, 8, 2}, Activation::tanh, NetRole::proximal), 0);
  CHECK_THROWS(check_lipschitz_F(LinearOperator::identity(2), prox, 10, 0));
  CHECK_THROWS(check_lipschitz_F(LinearOperator::identity(2), s.net, 0, 0));
}

TEST_CASE("quadratic potential") {
  const auto pot = scaled_identity(0.5, 2);
  CHECK(pot.lipschitz() == Catch::Approx(0.5));
  const Tensor x = Tensor::vector({1.0, -2.0});
  CHECK(pot.as_net()(x).values() == std::vector<double>{0.5, -1.0});
  CHECK(pot.value(Eigen::Vector2d(1.0, -2.0)) == Catch::Approx(1.25));
  Eigen::MatrixXd asym(2, 2);
  asym << 1, 2, 0, 1;
  CHECK_THROWS(QuadraticPotential{asym}.validate());
  CHECK_THROWS(scaled_identity(-1.0, 2).validate());
}

TEST_CASE("convergence bound holds for jittered gradient descent") {
  const auto I = LinearOperator::identity(2);
  const Tensor y = Tensor::vector({0.3, -0.2});
  for (int K : {10, 100}) {
    const ConvergenceCertificate c = check_convergence_bound(I, scaled_identity(0.5, 2), y, K, 200, 1e-3, 19);
    CHECK(c.passed);
    CHECK(c.L == Catch::Approx(0.5));
    CHECK(c.L_max == Catch::Approx(1.0).epsilon(1e-5));
    CHECK(c.eta == Catch::Approx(std::sqrt(2.0 / (c.L * c.L_max * K))).epsilon(1e-12));
    CHECK(c.grad_sq.size() == static_cast<std::size_t>(K));
    CHECK(c.lhs <= c.rhs);
    CHECK(c.delta_F >= -1e-12);
  }
  const ConvergenceCertificate zero = check_convergence_bound(I, scaled_identity(0.0, 2), y, 10, 50, 1e-3, 20);
  CHECK(zero.L == zero.mu);
  CHECK(zero.passed);
  CHECK_THROWS(check_convergence_bound(I, scaled_identity(0.5, 3), y, 10, 10, 1e-3, 0));
  CHECK_THROWS(check_convergence_bound(I, scaled_identity(0.5, 2), y, 0, 10, 1e-3, 0));
}

TEST_CASE("convergence certificate is reproducible") {
  const auto I = LinearOperator::identity(2);
  const Tensor y = Tensor::vector({0.3, -0.2});
  const auto a = check_convergence_bound(I, scaled_identity(0.5, 2), y, 10, 30, 1e-3, 21);
  const auto b = check_convergence_bound(I, scaled_identity(0.5, 2), y, 10, 30, 1e-3, 21);
  CHECK(a.grad_sq == b.grad_sq);
  CHECK(a.summary() == b.summary());
}
