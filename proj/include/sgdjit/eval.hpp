#pragma once

// Evaluation: clean error, average-case and worst-case robustness risks,
// generalization risk under consistent shifts, PSNR and SSIM.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/attack.hpp"
#include "sgdjit/datagen.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

enum class PerturbationKind { none, worst_case, average_case, generalization_shift };
enum class Sampling { uniform_ball, gaussian };

NLOHMANN_JSON_SERIALIZE_ENUM(PerturbationKind, {{PerturbationKind::none, "none"},
                                                {PerturbationKind::worst_case, "worst_case"},
                                                {PerturbationKind::average_case, "average_case"},
                                                {PerturbationKind::generalization_shift, "generalization_shift"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Sampling, {{Sampling::uniform_ball, "uniform_ball"}, {Sampling::gaussian, "gaussian"}})

/// What perturbs the measurements at evaluation time.
///   worst_case:            attack (epsilon, steps, step_size)
///   average_case:          magnitude = ball radius (uniform_ball) or sigma_e
///                          with E||e||^2 = sigma_e^2 (gaussian); `draws` per sample
///   generalization_shift:  fixed vector `shift` (per sample signal) or, when
///                          empty, g ~ N(0, magnitude^2/n I); y -> y + A g, x -> x + g
struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::none;
  AttackConfig attack;
  double magnitude = 0.0;
  Sampling sampling = Sampling::uniform_ball;
  std::vector<double> shift;
  int draws = 16;
  std::uint64_t seed = 0;

  static PerturbationSpec worst(const AttackConfig& a) {
    PerturbationSpec s;
    s.kind = PerturbationKind::worst_case;
    s.attack = a;
    return s;
  }
  static PerturbationSpec average(double magnitude, Sampling sampling, std::uint64_t seed, int draws = 16) {
    PerturbationSpec s;
    s.kind = PerturbationKind::average_case;
    s.magnitude = magnitude;
    s.sampling = sampling;
    s.seed = seed;
    s.draws = draws;
    return s;
  }
  static PerturbationSpec fixed_shift(std::vector<double> g) {
    PerturbationSpec s;
    s.kind = PerturbationKind::generalization_shift;
    s.shift = std::move(g);
    s.draws = 1;
    return s;
  }
  static PerturbationSpec random_shift(double sigma_g, std::uint64_t seed, int draws = 16) {
    PerturbationSpec s;
    s.kind = PerturbationKind::generalization_shift;
    s.magnitude = sigma_g;
    s.seed = seed;
    s.draws = draws;
    return s;
  }

  void validate() const {
    if (!(magnitude >= 0.0)) throw std::invalid_argument("perturbation magnitude must be >= 0");
    if (draws < 1) throw std::invalid_argument("perturbation draws must be >= 1");
    if (kind == PerturbationKind::worst_case) attack.validate();
  }
};

inline void to_json(nlohmann::json& j, const PerturbationSpec& s) {
  j = {{"kind", s.kind}, {"attack", s.attack}, {"magnitude", s.magnitude}, {"sampling", s.sampling},
       {"shift", s.shift}, {"draws", s.draws}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, PerturbationSpec& s) {
  j.at("kind").get_to(s.kind);
  j.at("attack").get_to(s.attack);
  j.at("magnitude").get_to(s.magnitude);
  j.at("sampling").get_to(s.sampling);
  j.at("shift").get_to(s.shift);
  j.at("draws").get_to(s.draws);
  j.at("seed").get_to(s.seed);
}

/// Returned for zero error.
inline constexpr double psnr_sentinel = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / mean squared error per entry).
inline double psnr_from_mse(double mse, double peak) {
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be > 0");
  if (mse == 0.0) return psnr_sentinel;
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Tensor& xhat, const Tensor& x, double peak) {
  if (xhat.shape != x.shape) throw ShapeError("psnr", xhat.shape, x.shape);
  const double mse = squared_norm(xhat - x) / static_cast<double>(x.size());
  return psnr_from_mse(mse, peak);
}

/// Mean SSIM over all `window` x `window` patches (stride 1, uniform weights)
/// of two 2D arrays with dynamic range L.
inline double ssim2d(const Tensor& a, const Tensor& b, double L, std::size_t window = 8) {
  if (a.shape != b.shape) throw ShapeError("ssim2d", a.shape, b.shape);
  if (a.rank() != 2) throw ShapeError("ssim2d expects a 2D array, got " + to_string(a.shape));
  if (!(L > 0.0)) throw std::invalid_argument("ssim2d: L must be > 0");
  const std::size_t H = a.shape[0], W = a.shape[1];
  if (window < 1 || window > H || window > W)
    throw std::invalid_argument("ssim2d: window larger than the image");
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  const double npx = static_cast<double>(window * window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= H; ++r)
    for (std::size_t c = 0; c + window <= W; ++c) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = r; i < r + window; ++i)
        for (std::size_t j = c; j < c + window; ++j) {
          const double va = a[i * W + j], vb = b[i * W + j];
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      const double ma = sa / npx, mb = sb / npx;
      const double va = saa / npx - ma * ma, vb = sbb / npx - mb * mb, cov = sab / npx - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

struct SampleMetrics {
  double mse = 0.0;   // ||x - xhat||^2 (sum over the sample)
  double psnr = 0.0;  // from the per-entry mean of the same error
  double ssim = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  std::string label;
  PerturbationSpec spec;
  double peak = 1.0;
  std::vector<SampleMetrics> samples;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double risk_stderr = 0.0;  // Monte-Carlo standard error of `mse`
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const {
    auto num = [](double v) -> nlohmann::json {
      if (std::isnan(v)) return nullptr;
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      return v;
    };
    return {{"label", label}, {"perturbation", spec}, {"peak", peak}, {"n", samples.size()},
            {"mse", num(mse)}, {"psnr", num(psnr)}, {"ssim", num(ssim)}, {"risk_stderr", num(risk_stderr)},
            {"seed", seed}, {"wall_seconds", wall_seconds}};
  }

  void write_csv(std::ostream& os) const {
    os << "sample,mse,psnr,ssim\n";
    os.precision(17);
    for (std::size_t i = 0; i < samples.size(); ++i)
      os << i << ',' << samples[i].mse << ',' << samples[i].psnr << ',' << samples[i].ssim << '\n';
  }
};

namespace detail {

inline Tensor batch_rows(const Dataset& d, const Tensor& t, std::size_t first, std::size_t count) {
  const std::size_t rows = d.rows();
  return slice_rows(t.reshaped(Shape{d.size() * rows, t.shape[2]}), first * rows, count * rows);
}

inline void finish_report(EvalReport& r, const Dataset& d, bool with_ssim) {
  const std::size_t n = r.samples.size();
  const double entries = static_cast<double>(d.sample_dim());
  double sum = 0, sq = 0, ssim = 0;
  for (auto& s : r.samples) {
    s.psnr = psnr_from_mse(s.mse / entries, r.peak);
    sum += s.mse;
    sq += s.mse * s.mse;
    ssim += s.ssim;
  }
  r.mse = sum / static_cast<double>(n);
  r.psnr = psnr_from_mse(r.mse / entries, r.peak);
  if (with_ssim) r.ssim = ssim / static_cast<double>(n);
  const double var = n > 1 ? std::max(0.0, (sq - sum * sum / static_cast<double>(n)) / static_cast<double>(n - 1)) : 0.0;
  r.risk_stderr = std::sqrt(var / static_cast<double>(n));
}

inline double default_peak(const Dataset& d) {
  const double p = dynamic_range(d);
  return p > 0.0 ? p : 1.0;
}

}  // namespace detail

/// Per-sample error ||x - H(y + e)||^2 for one batch of samples under a
/// fixed perturbation of the measurements.
inline std::vector<double> batch_errors(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& x,
                                        const Tensor& y, std::size_t samples) {
  const Tensor xhat = reconstruct(solver, A, y);
  return detail::per_sample_sq(xhat, x, samples);
}

struct EvalOptions {
  std::size_t batch = 64;        // samples per forward pass
  double peak = 0.0;             // 0: dynamic range of the split (1 if flat)
  bool ssim = false;             // per-sample SSIM of the rows x n section
  std::string label;
};

/// Single-sample worst-case attack; x [rows x n], y [rows x m].
struct AttackResult {
  Tensor perturbation;
  double loss = 0.0;
  double clean_loss = 0.0;
};

inline AttackResult worst_case_attack(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& x,
                                      const Tensor& y, const AttackConfig& cfg) {
  BatchAttack b = worst_case_batch(solver, A, x, y, 1, cfg);
  return {std::move(b.perturbation), b.loss[0], b.clean_loss[0]};
}

/// Evaluates `solver` on every sample of `d` under `spec`. The per-sample
/// error is the one the spec's risk averages:
///   none:                 ||x - H(y)||^2
///   worst_case:           max_{||e|| <= eps} ||x - H(y + e)||^2 (attack estimate)
///   average_case:         mean over draws of ||x - H(y + e)||^2
///   generalization_shift: mean over draws of ||x + g - H(y + A g)||^2
/// Randomness for sample i comes from its own stream (seed, eval, i).
inline EvalReport evaluate(const UnrolledSolver& solver, const LinearOperator& A, const Dataset& d,
                           const PerturbationSpec& spec, const EvalOptions& opt = {}) {
  spec.validate();
  d.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport r;
  r.label = opt.label;
  r.spec = spec;
  r.seed = spec.seed;
  r.peak = opt.peak > 0.0 ? opt.peak : detail::default_peak(d);
  const std::size_t N = d.size(), rows = d.rows(), n = d.signal_length(), m = d.measurement_length();
  r.samples.resize(N);
  std::vector<Tensor> recon(opt.ssim ? N : 0);
  const std::size_t bs = std::max<std::size_t>(1, opt.batch);

  for (std::size_t first = 0; first < N; first += bs) {
    const std::size_t cnt = std::min(bs, N - first);
    const Tensor x = detail::batch_rows(d, d.x, first, cnt);
    const Tensor y = detail::batch_rows(d, d.y, first, cnt);
    std::vector<double> err(cnt, 0.0);
    Tensor last_recon;
    switch (spec.kind) {
      case PerturbationKind::none: {
        last_recon = reconstruct(solver, A, y);
        err = detail::per_sample_sq(last_recon, x, cnt);
        break;
      }
      case PerturbationKind::worst_case: {
        BatchAttack adv = worst_case_batch(solver, A, x, y, cnt, spec.attack);
        err = adv.loss;
        if (opt.ssim) last_recon = reconstruct(solver, A, y + adv.perturbation);
        break;
      }
      case PerturbationKind::average_case:
      case PerturbationKind::generalization_shift: {
        const bool shift = spec.kind == PerturbationKind::generalization_shift;
        std::vector<Rng> rngs;
        for (std::size_t s = 0; s < cnt; ++s) rngs.push_back(make_rng(spec.seed, streams::eval, first + s));
        if (shift && !spec.shift.empty() && spec.shift.size() != rows * n)
          throw ShapeError("generalization shift", Shape{spec.shift.size()}, Shape{rows * n});
        for (int k = 0; k < spec.draws; ++k) {
          Tensor xs = x, ys = y;
          for (std::size_t s = 0; s < cnt; ++s) {
            if (shift) {
              Tensor g(Shape{rows, n});
              if (!spec.shift.empty())
                g = Tensor(g.shape, spec.shift);
              else
                fill_gaussian(g, spec.magnitude / std::sqrt(static_cast<double>(rows * n)), rngs[s]);
              const Tensor ag = A.apply(g);
              for (std::size_t i = 0; i < rows * n; ++i) xs[s * rows * n + i] += g[i];
              for (std::size_t i = 0; i < rows * m; ++i) ys[s * rows * m + i] += ag[i];
            } else {
              Tensor e(Shape{rows * m});
              if (spec.sampling == Sampling::uniform_ball)
                fill_uniform_ball(e, spec.magnitude, rngs[s]);
              else
                fill_gaussian(e, spec.magnitude / std::sqrt(static_cast<double>(rows * m)), rngs[s]);
              for (std::size_t i = 0; i < rows * m; ++i) ys[s * rows * m + i] += e[i];
            }
          }
          last_recon = reconstruct(solver, A, ys);
          const std::vector<double> e = detail::per_sample_sq(last_recon, xs, cnt);
          for (std::size_t s = 0; s < cnt; ++s) err[s] += e[s] / spec.draws;
          if (k + 1 == spec.draws && opt.ssim) {
            for (std::size_t s = 0; s < cnt; ++s) {
              const Tensor xr = slice_rows(last_recon, s * rows, rows);
              const Tensor xt = slice_rows(xs, s * rows, rows);
              r.samples[first + s].ssim = ssim2d(xr, xt, r.peak);
            }
          }
        }
        break;
      }
    }
    for (std::size_t s = 0; s < cnt; ++s) {
      r.samples[first + s].mse = err[s];
      if (opt.ssim && spec.kind != PerturbationKind::average_case &&
          spec.kind != PerturbationKind::generalization_shift)
        r.samples[first + s].ssim = ssim2d(slice_rows(last_recon, s * rows, rows), slice_rows(x, s * rows, rows), r.peak);
    }
  }
  detail::finish_report(r, d, opt.ssim);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline double clean_risk(const UnrolledSolver& solver, const LinearOperator& A, const Dataset& d) {
  return evaluate(solver, A, d, PerturbationSpec{}).mse;
}

/// Monte-Carlo estimate of E||x - H(y + e)||^2.
inline double avg_case_risk(const UnrolledSolver& solver, const LinearOperator& A, const Dataset& d,
                            const PerturbationSpec& spec) {
  if (spec.kind != PerturbationKind::average_case) throw std::invalid_argument("avg_case_risk: spec is not average_case");
  return evaluate(solver, A, d, spec).mse;
}

/// Mean over samples of the worst-case attacked error.
inline double worst_case_risk(const UnrolledSolver& solver, const LinearOperator& A, const Dataset& d,
                              const AttackConfig& cfg) {
  return evaluate(solver, A, d, PerturbationSpec::worst(cfg)).mse;
}

/// Monte-Carlo estimate of E||x + g - H(y + A g)||^2.
inline double generalization_risk(const UnrolledSolver& solver, const LinearOperator& A, const Dataset& d,
                                  const PerturbationSpec& spec) {
  if (spec.kind != PerturbationKind::generalization_shift)
    throw std::invalid_argument("generalization_risk: spec is not generalization_shift");
  return evaluate(solver, A, d, spec).mse;
}

}  // namespace sgdjit
