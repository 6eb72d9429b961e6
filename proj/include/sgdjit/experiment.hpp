#pragma once

// Experiment orchestration shared by the CLI and the acceptance suite:
// datasets and solvers from a config, per-scheme training and evaluation,
// the jitter-variance sweep and the training-speed benchmark.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/config.hpp"
#include "sgdjit/datagen.hpp"
#include "sgdjit/eval.hpp"
#include "sgdjit/io.hpp"
#include "sgdjit/schemes.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

struct TaskData {
  Dataset train;
  Dataset test;
  Dataset ood;
  LinearOperator op = LinearOperator::identity(1);
  double peak = 1.0;  // PSNR peak: dynamic range of the test ground truth, 1 when flat
};

/// Train/test/OOD splits for `seed`.
inline TaskData make_task_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& d = cfg.raw.at("data");
  TaskData t;
  if (cfg.task() == "toy") {
    const double var = d.at("noise_variance").get<double>();
    const bool pc = d.at("per_coordinate").get<bool>();
    auto [tr, te] = gen_toy(d.at("n_train").get<std::size_t>(), d.at("n_test").get<std::size_t>(), var, seed, pc);
    t.train = std::move(tr);
    t.test = std::move(te);
    t.ood = gen_toy_ood(d.at("ood_bias").get<std::vector<double>>(), d.at("n_ood").get<std::size_t>(), var, seed, pc);
    t.op = LinearOperator::identity(2);
  } else {
    SeismicConfig sc = cfg.seismic();
    sc.noise_variance = d.at("noise_variance").get<double>();
    t.train = gen_seismic(d.at("n_train").get<std::size_t>(), sc, seed, "train");
    t.test = gen_seismic(d.at("n_test").get<std::size_t>(), sc, seed, "test");
    t.ood = gen_seismic_ood(d.at("n_ood").get<std::size_t>(), sc, d.at("ood_layer_magnitude").get<double>(),
                            d.at("ood_layer_time").get<std::size_t>(), seed);
    t.op = sc.op();
  }
  const double range = dynamic_range(t.test);
  t.peak = range > 0.0 ? range : 1.0;
  return t;
}

inline UnrolledSolver make_solver(const ExperimentConfig& cfg, std::uint64_t seed) {
  UnrolledSolver s{cfg.solver(), GradientNet::build(cfg.net(), seed)};
  s.validate();
  return s;
}

inline std::string rng_digest(std::uint64_t seed) {
  return "mt19937_64+splitmix64 seed=" + std::to_string(seed) +
         " streams=init,shuffle,jitter,input_jitter,data_signal,data_noise,eval";
}

struct SchemeRun {
  TrainingScheme scheme;
  UnrolledSolver solver;
  TrainReport report;
};

/// Trains a fresh solver (init from `seed`) under `kind`, with the other
/// scheme hyperparameters taken from the config.
inline SchemeRun train_scheme(const ExperimentConfig& cfg, SchemeKind kind, const TaskData& data, std::uint64_t seed,
                              const EpochCallback& on_epoch = {}) {
  SchemeRun run{cfg.scheme(seed), make_solver(cfg, seed), {}};
  run.scheme.kind = kind;
  run.report = train(run.scheme, run.solver, data.op, data.train, on_epoch);
  return run;
}

struct SolverEval {
  EvalReport clean;
  EvalReport attacked;
  EvalReport average;
  EvalReport ood;
  EvalReport shifted;  // toy: generalization risk with the fixed bias on the test split

  nlohmann::json to_json() const {
    nlohmann::json j = {{"clean", clean.to_json()}, {"attacked", attacked.to_json()},
                        {"average", average.to_json()}, {"ood", ood.to_json()}};
    if (!shifted.samples.empty()) j["generalization"] = shifted.to_json();
    return j;
  }
};

inline SolverEval evaluate_solver(const ExperimentConfig& cfg, const UnrolledSolver& solver, const TaskData& data,
                                  std::uint64_t seed) {
  SolverEval r;
  EvalOptions o = cfg.eval_options();
  o.peak = data.peak;
  o.label = "clean";
  r.clean = evaluate(solver, data.op, data.test, PerturbationSpec{}, o);
  o.label = "attacked";
  r.attacked = evaluate(solver, data.op, data.test, PerturbationSpec::worst(cfg.eval_attack()), o);
  o.label = "average";
  r.average = evaluate(solver, data.op, data.test, cfg.average_spec(seed), o);
  o.label = "ood";
  r.ood = evaluate(solver, data.op, data.ood, PerturbationSpec{}, o);
  if (cfg.task() == "toy") {
    o.label = "generalization";
    r.shifted = evaluate(solver, data.op, data.test,
                         PerturbationSpec::fixed_shift(cfg.raw.at("data").at("ood_bias").get<std::vector<double>>()), o);
  }
  for (EvalReport* e : {&r.clean, &r.attacked, &r.average, &r.ood, &r.shifted}) e->seed = seed;
  return r;
}

inline void write_loss_csv(std::ostream& os, const std::vector<EpochRecord>& history, bool deterministic) {
  os << "epoch,mean_loss,wall_seconds\n";
  os.precision(17);
  for (const auto& r : history) os << r.epoch << ',' << r.mean_loss << ',' << (deterministic ? 0.0 : r.wall_seconds) << '\n';
}

struct SweepRow {
  double sigma = 0.0;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  double risk = std::numeric_limits<double>::quiet_NaN();  // worst-case risk at epsilon (clean risk at 0)
  double id_mse = std::numeric_limits<double>::quiet_NaN();
  double ood_mse = std::numeric_limits<double>::quiet_NaN();
  bool argmin = false;  // best sigma for this (epsilon, seed)
  std::string error;
};

/// Trains one SGD-jittered solver per (sigma, seed) and evaluates the
/// worst-case risk for every epsilon. A cell whose training diverges keeps
/// its error message and NaN metrics; the sweep continues.
inline std::vector<SweepRow> sweep_jitter_variance(const ExperimentConfig& cfg, const std::vector<double>& sigmas,
                                                   const std::vector<double>& epsilons,
                                                   const std::vector<std::uint64_t>& seeds) {
  if (sigmas.empty() || epsilons.empty() || seeds.empty()) throw std::invalid_argument("sweep: empty grid");
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    const TaskData data = make_task_data(cfg, seed);
    const std::size_t first = rows.size();
    for (double sigma : sigmas) {
      ExperimentConfig c = cfg;
      c.raw["scheme"]["jitter_variance"] = sigma;
      c.raw["scheme"]["schedule"] = nlohmann::json::array();
      std::string error;
      double id = std::numeric_limits<double>::quiet_NaN(), ood = id;
      std::vector<double> risks(epsilons.size(), id);
      try {
        const SchemeRun run = train_scheme(c, SchemeKind::sgd_jitter, data, seed);
        EvalOptions o = c.eval_options();
        o.peak = data.peak;
        id = evaluate(run.solver, data.op, data.test, PerturbationSpec{}, o).mse;
        ood = evaluate(run.solver, data.op, data.ood, PerturbationSpec{}, o).mse;
        for (std::size_t e = 0; e < epsilons.size(); ++e) {
          AttackConfig a = c.eval_attack();
          a.epsilon = epsilons[e];
          risks[e] = epsilons[e] == 0.0 ? id : evaluate(run.solver, data.op, data.test, PerturbationSpec::worst(a), o).mse;
        }
      } catch (const std::exception& ex) {
        error = ex.what();
      }
      for (std::size_t e = 0; e < epsilons.size(); ++e)
        rows.push_back({sigma, epsilons[e], seed, risks[e], id, ood, false, error});
    }
    for (double eps : epsilons) {
      SweepRow* best = nullptr;
      for (std::size_t i = first; i < rows.size(); ++i)
        if (rows[i].epsilon == eps && std::isfinite(rows[i].risk) && (!best || rows[i].risk < best->risk))
          best = &rows[i];
      if (best) best->argmin = true;
    }
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "sigma,epsilon,seed,risk,id_mse,ood_mse,argmin,error\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.sigma << ',' << r.epsilon << ',' << r.seed << ',' << r.risk << ',' << r.id_mse << ',' << r.ood_mse << ','
       << (r.argmin ? 1 : 0) << ",\"" << r.error << "\"\n";
}

struct BenchResult {
  SchemeKind kind = SchemeKind::mse;
  std::vector<double> window_rates;  // items/second per measurement window
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t batch_size = 0;
};

struct BenchOptions {
  int warmup_batches = 10;
  int windows = 5;
  int batches_per_window = 20;
};

/// Steady-state training throughput of each scheme on the same batches.
/// Warmup batches are excluded; every scheme runs the same batch count, and
/// measurement windows alternate between schemes so machine drift is shared.
inline std::vector<BenchResult> bench_training_speed(const ExperimentConfig& cfg, const std::vector<SchemeKind>& kinds,
                                                     std::uint64_t seed, const BenchOptions& opt) {
  if (opt.windows < 1 || opt.batches_per_window < 1 || opt.warmup_batches < 0)
    throw std::invalid_argument("bench: windows and batches per window must be >= 1");
  const TaskData data = make_task_data(cfg, seed);

  struct Runner {
    UnrolledSolver solver;
    SchemeStepper step;
    AdamState adam;
    std::size_t cursor = 0;
  };
  std::vector<std::unique_ptr<Runner>> runners;
  std::vector<BenchResult> out;
  for (SchemeKind kind : kinds) {
    TrainingScheme scheme = cfg.scheme(seed);
    scheme.kind = kind;
    UnrolledSolver solver = make_solver(cfg, seed);
    if (kind == SchemeKind::sgd_jitter && solver.config.variant == Variant::pgd) scheme.kind = SchemeKind::spgd_jitter;
    scheme.validate(solver);
    AdamState adam;
    adam.learning_rate = scheme.learning_rate;
    runners.push_back(std::make_unique<Runner>(Runner{solver, SchemeStepper(scheme, solver.config), adam}));
    BenchResult br;
    br.kind = kind;
    br.batch_size = std::min(scheme.batch_size, data.train.size());
    out.push_back(std::move(br));
  }
  auto run_batch = [&](std::size_t s) {
    Runner& r = *runners[s];
    std::vector<std::size_t> idx(out[s].batch_size);
    for (auto& i : idx) i = r.cursor++ % data.train.size();
    const Batch b = Batch::from(data.train, idx);
    StepResult res = r.step(r.solver, data.op, b);
    adam_update(r.adam, r.solver.net.parameters(), res.grads);
  };
  for (std::size_t s = 0; s < runners.size(); ++s)
    for (int i = 0; i < opt.warmup_batches; ++i) run_batch(s);
  for (int w = 0; w < opt.windows; ++w)
    for (std::size_t s = 0; s < runners.size(); ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < opt.batches_per_window; ++i) run_batch(s);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out[s].window_rates.push_back(static_cast<double>(out[s].batch_size) * opt.batches_per_window / dt);
    }
  for (BenchResult& br : out) {
    const double n = static_cast<double>(br.window_rates.size());
    br.mean = std::accumulate(br.window_rates.begin(), br.window_rates.end(), 0.0) / n;
    double ss = 0.0;
    for (double r : br.window_rates) ss += (r - br.mean) * (r - br.mean);
    br.stddev = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }
  return out;
}

/// Common envelope of every JSON report.
inline nlohmann::json report_envelope(const ExperimentConfig& cfg, const std::string& command) {
  return {{"schema_version", report_schema_version}, {"version", version_string}, {"command", command},
          {"config", cfg.raw}, {"config_hash", cfg.hash()}};
}

/// Zeroes every "wall_seconds" field so deterministic runs compare byte for byte.
inline void scrub_wall_clock(nlohmann::json& j) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "wall_seconds")
        *it = 0.0;
      else
        scrub_wall_clock(*it);
    }
  } else if (j.is_array()) {
    for (auto& v : j) scrub_wall_clock(v);
  }
}

}  // namespace sgdjit
