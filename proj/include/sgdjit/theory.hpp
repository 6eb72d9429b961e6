#pragma once

// Numerical checks of the algebra behind SGD jittering: trajectory
// expansions for shifted, jittered and attacked inputs (denoising, A = I),
// the regularization term and risk decomposition, variance matching, the
// Lipschitz bound on grad F and the SGD convergence certificate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sgdjit/linops.hpp"
#include "sgdjit/nets.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

struct ExpansionCheck {
  std::string name;
  std::vector<Tensor> clean;      // x'_0 .. x'_K
  std::vector<Tensor> perturbed;  // x_0 .. x_K under shift / jitter / attack
  std::vector<Tensor> expansion;  // closed form for x_0 .. x_K
  std::vector<Tensor> f_terms;    // sum_{i<k} eta (1-eta)^{k-1-i} (f(x'_i) - f(x_i)), k = 0..K
  double deviation = 0.0;         // max_k ||perturbed_k - expansion_k||_inf
  double tolerance = 0.0;
  bool passed = false;

  nlohmann::json summary() const {
    return {{"check", name}, {"deviation", deviation}, {"tolerance", tolerance}, {"passed", passed}};
  }
};

namespace detail {

inline void require_denoising(const UnrolledSolver& solver, const LinearOperator& A, const char* who) {
  if (A.kind() != OperatorKind::identity)
    throw std::invalid_argument(std::string(who) + ": the expansion assumes A = identity");
  if (solver.config.variant != Variant::gd) throw std::invalid_argument(std::string(who) + ": needs a GD solver");
  if (solver.config.init != InitRule::adjoint)
    throw std::invalid_argument(std::string(who) + ": needs x_0 = A^T y");
}

inline double ipow(double b, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= b;
  return r;
}

/// Weighted f-deviation sums for k = 0..K.
inline std::vector<Tensor> f_sums(const Trajectory& clean, const Trajectory& other, double eta) {
  const std::size_t K = clean.net_outputs.size();
  std::vector<Tensor> out;
  for (std::size_t k = 0; k <= K; ++k) {
    Tensor s = Tensor::zeros(clean.iterates[0].shape);
    for (std::size_t i = 0; i < k; ++i)
      s = axpy(eta * ipow(1.0 - eta, static_cast<int>(k - 1 - i)), clean.net_outputs[i] - other.net_outputs[i], s);
    out.push_back(std::move(s));
  }
  return out;
}

inline ExpansionCheck finish_check(std::string name, const Trajectory& clean, const Trajectory& other,
                                   std::vector<Tensor> expansion, std::vector<Tensor> fterms, double ynorm) {
  ExpansionCheck c;
  c.name = std::move(name);
  c.clean = clean.iterates;
  c.perturbed = other.iterates;
  c.expansion = std::move(expansion);
  c.f_terms = std::move(fterms);
  for (std::size_t k = 0; k < c.perturbed.size(); ++k)
    c.deviation = std::max(c.deviation, max_abs(c.perturbed[k] - c.expansion[k]));
  c.tolerance = 1e-9 * (1.0 + ynorm);
  c.passed = c.deviation <= c.tolerance;
  return c;
}

inline ExpansionCheck shift_expansion(const char* name, const UnrolledSolver& solver, const LinearOperator& A,
                                      const Tensor& y, const Tensor& g) {
  require_denoising(solver, A, name);
  if (g.shape != y.shape) throw ShapeError(name, y.shape, g.shape);
  const Trajectory clean = trajectory(solver, A, y);
  const Trajectory shifted = trajectory(solver, A, y + g);
  const double eta = solver.config.step;
  std::vector<Tensor> fs = f_sums(clean, shifted, eta);
  std::vector<Tensor> exp;
  for (std::size_t k = 0; k < clean.iterates.size(); ++k) exp.push_back(clean.iterates[k] + g + fs[k]);
  return finish_check(name, clean, shifted, std::move(exp), std::move(fs), norm(y));
}

}  // namespace detail

/// x_k = x'_k + g + sum_{i<k} eta (1-eta)^{k-1-i} (f(x'_i) - f(x_i)) for the
/// trajectory started from y + g.
inline ExpansionCheck check_perturbation_expansion(const UnrolledSolver& solver, const LinearOperator& A,
                                                   const Tensor& y, const Tensor& g) {
  return detail::shift_expansion("perturbation_expansion", solver, A, y, g);
}

/// Same algebra for a measurement attack y + e.
inline ExpansionCheck check_attack_expansion(const UnrolledSolver& solver, const LinearOperator& A,
                                             const Tensor& y, const Tensor& e) {
  return detail::shift_expansion("attack_expansion", solver, A, y, e);
}

/// Signed noise accumulation after k steps: -sum_{i=1}^{k} eta (1-eta)^{k-i} w_i.
/// noises[i-1] holds w_i; there is no w_0.
inline Tensor noise_accumulation(const std::vector<Tensor>& noises, double eta, std::size_t k) {
  if (k > noises.size()) throw std::invalid_argument("noise_accumulation: k exceeds recorded noises");
  Tensor s = Tensor::zeros(noises.empty() ? Shape{0} : noises[0].shape);
  for (std::size_t i = 1; i <= k; ++i) s = axpy(-eta * detail::ipow(1.0 - eta, static_cast<int>(k - i)), noises[i - 1], s);
  return s;
}

/// x^sgd_k = x'_k + sum_{i<k} eta (1-eta)^{k-1-i} (f(x'_i) - f(x^sgd_i)) + n_k,
/// with n_k the signed noise accumulation.
inline ExpansionCheck check_sgd_expansion(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& y,
                                          const JitterSchedule& schedule, std::uint64_t seed) {
  detail::require_denoising(solver, A, "check_sgd_expansion");
  schedule.validate(solver.config.iterations);
  const Trajectory clean = trajectory(solver, A, y);
  Rng rng = make_rng(seed, streams::jitter);
  const Jitter jitter{schedule, rng, y.shape.back()};
  const Trajectory noisy = trajectory(solver, A, y, &jitter);
  const double eta = solver.config.step;
  std::vector<Tensor> fs = detail::f_sums(clean, noisy, eta);
  std::vector<Tensor> exp;
  for (std::size_t k = 0; k < clean.iterates.size(); ++k)
    exp.push_back(clean.iterates[k] + fs[k] + noise_accumulation(noisy.noises, eta, k));
  return detail::finish_check("sgd_expansion", clean, noisy, std::move(exp), std::move(fs), norm(y));
}

/// s = sum_{i<K} eta (1-eta)^{K-1-i} (f(x'_i) - f(x^sgd_i)).
inline Tensor regularization_vector(const Trajectory& clean, const Trajectory& noisy, double eta) {
  if (clean.net_outputs.size() != noisy.net_outputs.size() || clean.net_outputs.empty())
    throw std::invalid_argument("regularization_term: trajectories differ in length (" +
                                std::to_string(clean.net_outputs.size()) + " vs " +
                                std::to_string(noisy.net_outputs.size()) + ")");
  return detail::f_sums(clean, noisy, eta).back();
}

/// ||s||^2, the regularization term of the SGD jittering risk.
inline double regularization_term(const Trajectory& clean, const Trajectory& noisy, double eta) {
  return squared_norm(regularization_vector(clean, noisy, eta));
}

struct DecompositionCheck {
  std::vector<double> direct;      // ||x - x^sgd_K||^2 per sample
  std::vector<double> decomposed;  // ||x - x'_K - s - n||^2 per sample
  double deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Per-sample risk decomposition; samples are consecutive blocks of
/// `rows_per_sample` rows.
inline DecompositionCheck check_risk_decomposition(const Tensor& x, const Trajectory& clean, const Trajectory& noisy,
                                                   double eta, std::size_t rows_per_sample = 1) {
  const Tensor s = regularization_vector(clean, noisy, eta);
  const Tensor n = noise_accumulation(noisy.noises, eta, noisy.noises.size());
  const Tensor& xk = noisy.iterates.back();
  const Tensor& xc = clean.iterates.back();
  if (x.shape != xk.shape) throw ShapeError("check_risk_decomposition", x.shape, xk.shape);
  const std::size_t samples = x.shape[0] / rows_per_sample;
  const std::size_t block = rows_per_sample * x.shape[1];
  DecompositionCheck c;
  double scale = 0.0;
  for (std::size_t p = 0; p < samples; ++p) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = p * block; i < (p + 1) * block; ++i) {
      const double d1 = x[i] - xk[i];
      const double d2 = x[i] - xc[i] - s[i] - n[i];
      a += d1 * d1;
      b += d2 * d2;
    }
    c.direct.push_back(a);
    c.decomposed.push_back(b);
    c.deviation = std::max(c.deviation, std::abs(a - b));
    scale = std::max(scale, a);
  }
  c.tolerance = 1e-9 * (1.0 + scale);
  c.passed = c.deviation <= c.tolerance;
  return c;
}

/// Constant jitter variance sigma_w^2 such that
/// sum_{i=0}^{k} eta^2 (1-eta)^{2(k-i)} sigma_w^2 = sigma_g^2.
inline double variance_matching_sigma(double sigma_g_sq, double eta, int k) {
  if (!(eta > 0.0 && eta <= 1.0)) throw std::invalid_argument("variance_matching_sigma: eta must be in (0, 1]");
  if (k < 0) throw std::invalid_argument("variance_matching_sigma: k must be >= 0");
  if (sigma_g_sq < 0.0) throw std::invalid_argument("variance_matching_sigma: sigma_g^2 must be >= 0");
  const double q = (1.0 - eta) * (1.0 - eta);
  return sigma_g_sq * (1.0 - q) / (eta * eta * (1.0 - detail::ipow(q, k + 1)));
}

/// r(x) = 1/2 x^T B x with B symmetric positive semidefinite, so f = B x.
struct QuadraticPotential {
  Eigen::MatrixXd B;

  void validate() const {
    if (B.rows() != B.cols() || B.rows() == 0) throw std::invalid_argument("quadratic potential: B must be square");
    if ((B - B.transpose()).norm() > 1e-12 * (1.0 + B.norm()))
      throw std::invalid_argument("quadratic potential: B must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
    if (es.eigenvalues().minCoeff() < -1e-12) throw std::invalid_argument("quadratic potential: B must be PSD");
  }

  std::size_t dim() const { return static_cast<std::size_t>(B.rows()); }
  double value(const Eigen::VectorXd& x) const { return 0.5 * x.dot(B * x); }
  double lipschitz() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
    return std::max(0.0, es.eigenvalues().maxCoeff());
  }

  /// The gradient B x as a one-layer linear network.
  GradientNet as_net() const {
    const std::size_t n = dim();
    Tensor w(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i * n + j] = B(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return GradientNet::from_parameters(Architecture::mlp({n, n}, Activation::identity),
                                        {{"layer0.weight", w}, {"layer0.bias", Tensor::zeros(Shape{n})}});
  }
};

struct LipschitzReport {
  double L_hat = 0.0;
  double mu = 0.0;
  double slack = 0.05;
  int probes = 0;
  int passed_probes = 0;
  double worst_ratio = 0.0;  // max ||grad F(x+d) - grad F(x)|| / ((L_hat (1+slack) + mu) ||d||)
  bool passed = false;

  nlohmann::json summary() const {
    return {{"check", "lipschitz_F"}, {"L_hat", L_hat}, {"mu", mu}, {"slack", slack}, {"probes", probes},
            {"passed_probes", passed_probes}, {"worst_ratio", worst_ratio}, {"passed", passed}};
  }
};

/// Probes ||grad F(x+d) - grad F(x)|| <= (L_hat (1+slack) + mu) ||d|| with
/// grad F(x) = A^T(A x - y) + f(x); the y term cancels in the difference.
/// x is uniform on [-scale, scale]^n and ||d|| spans three decades.
inline LipschitzReport check_lipschitz_F(const LinearOperator& A, const GradientNet& net, int probes,
                                         std::uint64_t seed, double scale = 1.0, int lipschitz_probes = 64) {
  if (probes < 1) throw std::invalid_argument("check_lipschitz_F: probes must be >= 1");
  if (net.role() != NetRole::gradient) throw std::invalid_argument("check_lipschitz_F: net must have role 'gradient'");
  const std::size_t n = A.domain();
  LipschitzReport r;
  r.L_hat = lipschitz_estimate(net, lipschitz_probes, seed, n, scale);
  r.mu = A.mu();
  r.probes = probes;
  const double bound = r.L_hat * (1.0 + r.slack) + r.mu;
  for (int p = 0; p < probes; ++p) {
    Rng rng = make_rng(seed ^ 0x9e3779b97f4a7c15ULL, streams::probes, static_cast<std::uint64_t>(p));
    const Tensor x = uniform(Shape{1, n}, -scale, scale, rng);
    Tensor d = gaussian(Shape{1, n}, 1.0, rng);
    std::uniform_real_distribution<double> mag(-3.0, 0.0);
    d = (scale * std::pow(10.0, mag(rng)) / norm(d)) * d;
    const Tensor diff = A.adjoint(A.apply(d)) + (net(x + d) - net(x));
    const double ratio = norm(diff) / (bound * norm(d));
    r.worst_ratio = std::max(r.worst_ratio, ratio);
    if (ratio <= 1.0) ++r.passed_probes;
  }
  r.passed = r.passed_probes == probes;
  return r;
}

struct ConvergenceCertificate {
  double L = 0.0;        // Lipschitz constant of f = grad r
  double mu = 0.0;       // spectral bound of A^T A
  double L_max = 0.0;
  double eta = 0.0;
  int K = 0;
  int trials = 0;
  double sigma_w_sq = 0.0;
  double F0 = 0.0;       // F(x_0)
  double inf_F = 0.0;
  double delta_F = 0.0;  // F(x*) - inf 1/2||y - Ax||^2 - inf r
  std::vector<double> grad_sq;  // Monte-Carlo E||grad F(x_k)||^2, k = 0..K-1
  double lhs = 0.0;      // min_k of grad_sq
  double lhs_stderr = 0.0;
  int argmin = 0;
  double rhs = 0.0;
  bool passed = false;

  nlohmann::json summary() const {
    return {{"check", "convergence_bound"}, {"L", L}, {"mu", mu}, {"L_max", L_max}, {"eta", eta}, {"K", K},
            {"trials", trials}, {"sigma_w_sq", sigma_w_sq}, {"F0", F0}, {"inf_F", inf_F}, {"delta_F", delta_F},
            {"lhs", lhs}, {"lhs_stderr", lhs_stderr}, {"argmin", argmin}, {"rhs", rhs}, {"passed", passed}};
  }
};

/// Runs `trials` jittered GD trajectories on F(x) = 1/2||y - Ax||^2 + 1/2 x^T B x
/// with eta = sqrt(2 / (L L_max K)) and compares min_k E||grad F(x_k)||^2
/// against sqrt(2 L L_max / K) (2 (F(x_0) - inf F) + delta_F). With a zero
/// potential L is replaced by mu. Passes when the Monte-Carlo mean minus two
/// standard errors stays below the bound.
inline ConvergenceCertificate check_convergence_bound(const LinearOperator& A, const QuadraticPotential& pot,
                                                      const Tensor& y, int K, int trials, double sigma_w_sq,
                                                      std::uint64_t seed) {
  pot.validate();
  if (K < 1 || trials < 1) throw std::invalid_argument("check_convergence_bound: K and trials must be >= 1");
  if (pot.dim() != A.domain()) throw ShapeError("check_convergence_bound", Shape{pot.dim()}, Shape{A.domain()});
  if (y.size() != A.range()) throw ShapeError("check_convergence_bound", y.shape, Shape{A.range()});
  ConvergenceCertificate c;
  c.K = K;
  c.trials = trials;
  c.sigma_w_sq = sigma_w_sq;
  c.mu = A.mu();
  c.L = pot.lipschitz();
  if (c.L == 0.0) c.L = c.mu;
  c.L_max = std::max(c.L, c.mu);
  c.eta = std::sqrt(2.0 / (c.L * c.L_max * K));

  const Eigen::MatrixXd M = dense_matrix(A);
  const Eigen::Map<const Eigen::VectorXd> yv(y.data.data(), static_cast<Eigen::Index>(y.size()));
  auto F = [&](const Eigen::VectorXd& x) { return 0.5 * (yv - M * x).squaredNorm() + pot.value(x); };
  const Eigen::MatrixXd H = M.transpose() * M + pot.B;
  const Eigen::VectorXd xstar = H.completeOrthogonalDecomposition().solve(M.transpose() * yv);
  const Eigen::VectorXd xls = M.completeOrthogonalDecomposition().solve(yv);
  c.inf_F = F(xstar);
  const double inf_data = 0.5 * (yv - M * xls).squaredNorm();
  c.delta_F = c.inf_F - inf_data;  // inf r = 0 for B PSD
  const Eigen::VectorXd x0 = M.transpose() * yv;
  c.F0 = F(x0);
  c.rhs = std::sqrt(2.0 * c.L * c.L_max / K) * (2.0 * (c.F0 - c.inf_F) + c.delta_F);

  // All trials as rows of one batch through the unrolled GD solver.
  UnrolledSolver solver{UnrollConfig{K, c.eta, Variant::gd, InitRule::adjoint}, pot.as_net()};
  Tensor ys(Shape{static_cast<std::size_t>(trials), y.size()});
  for (std::size_t t = 0; t < static_cast<std::size_t>(trials); ++t)
    std::copy(y.data.begin(), y.data.end(), ys.data.begin() + static_cast<std::ptrdiff_t>(t * y.size()));
  Rng rng = make_rng(seed, streams::jitter);
  const JitterSchedule schedule = JitterSchedule::constant(K, sigma_w_sq);
  const Jitter jitter{schedule, rng, A.domain()};
  const Trajectory tr = trajectory(solver, A, ys, &jitter);

  const std::size_t n = A.domain();
  c.lhs = std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const Tensor& xk = tr.iterates[static_cast<std::size_t>(k)];
    const Tensor grad = A.adjoint(A.apply(xk) - ys) + tr.net_outputs[static_cast<std::size_t>(k)];
    double sum = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < static_cast<std::size_t>(trials); ++t) {
      double g2 = 0.0;
      for (std::size_t i = t * n; i < (t + 1) * n; ++i) g2 += grad[i] * grad[i];
      sum += g2;
      sq += g2 * g2;
    }
    const double mean = sum / trials;
    c.grad_sq.push_back(mean);
    if (mean < c.lhs) {
      c.lhs = mean;
      c.argmin = k;
      const double var = trials > 1 ? std::max(0.0, (sq - sum * mean) / (trials - 1)) : 0.0;
      c.lhs_stderr = std::sqrt(var / trials);
    }
  }
  c.passed = std::isfinite(c.lhs) && std::isfinite(c.rhs) && c.lhs - 2.0 * c.lhs_stderr <= c.rhs;
  return c;
}

}  // namespace sgdjit
