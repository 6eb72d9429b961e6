#pragma once

// Training schemes for unrolled solvers: plain MSE, adversarial training,
// input jittering, SGD jittering (GD solver) and SPGD jittering (PGD solver).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/attack.hpp"
#include "sgdjit/datagen.hpp"
#include "sgdjit/optim.hpp"
#include "sgdjit/rng.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

enum class SchemeKind { mse, adversarial, input_jitter, sgd_jitter, spgd_jitter };

NLOHMANN_JSON_SERIALIZE_ENUM(SchemeKind, {{SchemeKind::mse, "mse"},
                                          {SchemeKind::adversarial, "at"},
                                          {SchemeKind::input_jitter, "input_jitter"},
                                          {SchemeKind::sgd_jitter, "sgd_jitter"},
                                          {SchemeKind::spgd_jitter, "spgd_jitter"}})

inline std::string scheme_name(SchemeKind k) { return nlohmann::json(k).get<std::string>(); }

struct TrainingScheme {
  SchemeKind kind = SchemeKind::mse;
  AttackConfig attack;          // adversarial
  double input_variance = 0.0;  // input_jitter: E||w||^2
  double jitter_variance = 0.0; // sgd/spgd: constant sigma^2_{w,k} unless `schedule` is set
  std::vector<double> schedule; // explicit per-iteration variances (optional)
  int epochs = 500;
  std::size_t batch_size = 256;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;

  JitterSchedule jitter_schedule(int iterations) const {
    if (!schedule.empty()) return JitterSchedule{schedule};
    return JitterSchedule::constant(iterations, jitter_variance);
  }

  void validate(const UnrolledSolver& solver) const {
    if (epochs < 0) throw std::invalid_argument("scheme: epochs must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("scheme: batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("scheme: learning rate must be > 0");
    if (input_variance < 0.0 || jitter_variance < 0.0) throw std::invalid_argument("scheme: variances must be >= 0");
    if (kind == SchemeKind::adversarial) attack.validate();
    if (kind == SchemeKind::sgd_jitter || kind == SchemeKind::spgd_jitter)
      jitter_schedule(solver.config.iterations).validate(solver.config.iterations);
    if (kind == SchemeKind::spgd_jitter && solver.config.variant != Variant::pgd)
      throw std::invalid_argument("scheme: spgd_jitter requires a PGD solver");
    if (kind == SchemeKind::sgd_jitter && solver.config.variant != Variant::gd)
      throw std::invalid_argument("scheme: sgd_jitter requires a GD solver");
  }
};

inline void to_json(nlohmann::json& j, const TrainingScheme& s) {
  j = {{"kind", s.kind}, {"attack", s.attack}, {"input_variance", s.input_variance},
       {"jitter_variance", s.jitter_variance}, {"schedule", s.schedule}, {"epochs", s.epochs},
       {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, TrainingScheme& s) {
  j.at("kind").get_to(s.kind);
  j.at("attack").get_to(s.attack);
  j.at("input_variance").get_to(s.input_variance);
  j.at("jitter_variance").get_to(s.jitter_variance);
  j.at("schedule").get_to(s.schedule);
  j.at("epochs").get_to(s.epochs);
  j.at("batch_size").get_to(s.batch_size);
  j.at("learning_rate").get_to(s.learning_rate);
  j.at("seed").get_to(s.seed);
}

/// A minibatch: x [B*rows x n], y [B*rows x m], B samples.
struct Batch {
  Tensor x;
  Tensor y;
  std::size_t samples = 0;

  static Batch from(const Dataset& d, std::span<const std::size_t> idx) {
    return Batch{d.gather_x(idx), d.gather_y(idx), idx.size()};
  }
  std::size_t sample_dim() const { return x.size() / samples; }
  std::size_t measurement_dim() const { return y.size() / samples; }
};

struct StepResult {
  double loss = 0.0;          // mean over the batch of ||x - x_K||^2
  std::vector<Tensor> grads;  // d loss / d theta, one per parameter
};

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(int ep, std::size_t b, const std::string& why)
      : std::runtime_error("training diverged at epoch " + std::to_string(ep) + ", batch " +
                           std::to_string(b) + ": " + why),
        epoch(ep),
        batch(b) {}
  int epoch;
  std::size_t batch;
};

namespace detail {

inline StepResult loss_and_grad(const UnrolledSolver& solver, const LinearOperator& A, const Tensor& x,
                                const Tensor& y_in, std::size_t samples, const Jitter* jitter) {
  Tape tape;
  auto pv = solver.net.bind(tape, true);
  Var out = run_solver(tape, pv, solver, A, tape.constant(y_in), jitter).output;
  Var loss = scale(mse_loss(out, tape.constant(x)), 1.0 / static_cast<double>(samples));
  tape.backward(loss);
  StepResult r;
  r.loss = loss.value().item();
  r.grads.reserve(pv.size());
  for (Var p : pv) r.grads.push_back(tape.grad(p));
  return r;
}

}  // namespace detail

/// Jitter off; loss = mean over the batch of ||x - x_K||^2.
inline StepResult mse_step(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b) {
  return detail::loss_and_grad(solver, A, b.x, b.y, b.samples, nullptr);
}

/// Attacks every sample inside the epsilon ball, then takes the MSE step
/// on the attacked measurements. Attack gradients run through the solver.
inline StepResult at_step(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b,
                          const AttackConfig& attack) {
  if (attack.epsilon == 0.0) return mse_step(solver, A, b);
  BatchAttack adv = worst_case_batch(solver, A, b.x, b.y, b.samples, attack);
  return detail::loss_and_grad(solver, A, b.x, b.y + adv.perturbation, b.samples, nullptr);
}

/// One draw w ~ N(0, variance/m I) per sample added to y and held fixed
/// across all unrolled iterations.
inline StepResult input_jitter_step(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b,
                                    double variance, Rng& rng) {
  if (variance == 0.0) return mse_step(solver, A, b);
  const Tensor w = gaussian(b.y.shape, std::sqrt(variance / static_cast<double>(b.measurement_dim())), rng);
  return detail::loss_and_grad(solver, A, b.x, b.y + w, b.samples, nullptr);
}

/// Fresh noise in every unrolled iteration; loss against the clean x.
/// Works for both the GD (SGD jittering) and PGD (SPGD jittering) solvers.
inline StepResult sgd_jitter_step(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b,
                                  const JitterSchedule& schedule, Rng& rng) {
  schedule.validate(solver.config.iterations);
  if (schedule.is_zero()) return mse_step(solver, A, b);
  const Jitter jitter{schedule, rng, b.sample_dim()};
  return detail::loss_and_grad(solver, A, b.x, b.y, b.samples, &jitter);
}

inline StepResult spgd_jitter_step(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b,
                                   const JitterSchedule& schedule, Rng& rng) {
  if (solver.config.variant != Variant::pgd) throw std::invalid_argument("spgd_jitter_step: solver must be PGD");
  return sgd_jitter_step(solver, A, b, schedule, rng);
}

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> history;
  double wall_seconds = 0.0;
  std::size_t items = 0;
  std::size_t batches = 0;
};

/// Runs one scheme step on `b`, drawing from the scheme's noise streams.
class SchemeStepper {
 public:
  SchemeStepper(const TrainingScheme& scheme, const UnrollConfig& cfg)
      : scheme_(scheme),
        schedule_(scheme.jitter_schedule(cfg.iterations)),
        jitter_rng_(make_rng(scheme.seed, streams::jitter)),
        input_rng_(make_rng(scheme.seed, streams::input_jitter)) {}

  StepResult operator()(const UnrolledSolver& solver, const LinearOperator& A, const Batch& b) {
    switch (scheme_.kind) {
      case SchemeKind::mse: return mse_step(solver, A, b);
      case SchemeKind::adversarial: return at_step(solver, A, b, scheme_.attack);
      case SchemeKind::input_jitter: return input_jitter_step(solver, A, b, scheme_.input_variance, input_rng_);
      case SchemeKind::sgd_jitter: return sgd_jitter_step(solver, A, b, schedule_, jitter_rng_);
      case SchemeKind::spgd_jitter: return spgd_jitter_step(solver, A, b, schedule_, jitter_rng_);
    }
    throw std::logic_error("unknown scheme");
  }

 private:
  TrainingScheme scheme_;
  JitterSchedule schedule_;
  Rng jitter_rng_;
  Rng input_rng_;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `solver` in place with Adam. Shuffling depends only on the seed, so
/// all schemes see the same batch sequence under a shared seed.
inline TrainReport train(const TrainingScheme& scheme, UnrolledSolver& solver, const LinearOperator& A,
                         const Dataset& data, const EpochCallback& on_epoch = {}) {
  scheme.validate(solver);
  solver.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  TrainReport rep;
  AdamState adam;
  adam.learning_rate = scheme.learning_rate;
  SchemeStepper step(scheme, solver.config);
  Rng shuffle_rng = make_rng(scheme.seed, streams::shuffle);
  std::vector<std::size_t> order(data.size());
  const std::size_t bs = std::min(scheme.batch_size, data.size());
  for (int ep = 0; ep < scheme.epochs; ++ep) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    std::size_t bi = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++bi) {
      const std::size_t n = std::min(bs, order.size() - start);
      const Batch b = Batch::from(data, std::span<const std::size_t>(order).subspan(start, n));
      StepResult r;
      try {
        r = step(solver, A, b);
      } catch (const DivergenceError& e) {
        throw TrainingDivergence(ep, bi, e.what());
      }
      if (!std::isfinite(r.loss)) throw TrainingDivergence(ep, bi, "non-finite loss");
      adam_update(adam, solver.net.parameters(), r.grads);
      total += r.loss * static_cast<double>(n);
      rep.items += n;
      ++rep.batches;
    }
    EpochRecord rec{ep, total / static_cast<double>(data.size()),
                    std::chrono::duration<double>(clock::now() - t0).count()};
    rep.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  rep.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return rep;
}

}  // namespace sgdjit
