// Command-line driver: sgdjit <datagen|train|eval|attack|sweep|verify|bench|report> [options]

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgdjit/config.hpp"
#include "sgdjit/experiment.hpp"
#include "sgdjit/io.hpp"
#include "sgdjit/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sgdjit;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string task;
  std::string out_dir;
};

ExperimentConfig build_config(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (!c.task.empty()) ov.insert(ov.begin(), "task=\"" + c.task + "\"");
  if (!c.out_dir.empty()) ov.push_back("output_dir=\"" + c.out_dir + "\"");
  return load_config(c.config_path, ov);
}

fs::path run_dir(const ExperimentConfig& cfg, const std::string& command) {
  fs::path p = fs::path(cfg.output_dir()) / (command + "_" + cfg.run_id());
  fs::create_directories(p);
  std::ofstream(p / "config.json") << cfg.raw.dump(2) << '\n';
  return p;
}

void write_json(const fs::path& p, json j, const ExperimentConfig& cfg) {
  if (cfg.deterministic()) scrub_wall_clock(j);
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << j.dump(2) << '\n';
}

SchemeKind parse_scheme(const std::string& s) {
  const SchemeKind k = json(s).get<SchemeKind>();
  if (json(k).get<std::string>() != s) throw ConfigError("unknown scheme '" + s + "'");
  return k;
}

std::vector<SchemeKind> parse_schemes(const json& list) {
  std::vector<SchemeKind> out;
  for (const auto& s : list) out.push_back(parse_scheme(s.get<std::string>()));
  return out;
}

int cmd_datagen(const ExperimentConfig& cfg) {
  const fs::path dir = run_dir(cfg, "datagen");
  json files = json::array();
  for (std::uint64_t seed : cfg.seeds()) {
    const TaskData d = make_task_data(cfg, seed);
    for (const Dataset* ds : {&d.train, &d.test, &d.ood}) {
      const fs::path p = dir / (ds->split + "_seed" + std::to_string(seed) + ".bin");
      save_dataset(p.string(), *ds);
      files.push_back(p.filename().string());
    }
  }
  json rep = report_envelope(cfg, "datagen");
  rep["files"] = files;
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::vector<std::string>& schemes) {
  const fs::path dir = run_dir(cfg, "train");
  json rep = report_envelope(cfg, "train");
  std::vector<SchemeKind> kinds;
  if (schemes.empty())
    kinds.push_back(cfg.scheme(0).kind);
  else
    for (const auto& s : schemes) kinds.push_back(parse_scheme(s));
  for (std::uint64_t seed : cfg.seeds()) {
    const TaskData data = make_task_data(cfg, seed);
    for (SchemeKind k : kinds) {
      const std::string tag = scheme_name(k) + "_seed" + std::to_string(seed);
      SchemeRun run = train_scheme(cfg, k, data, seed);
      json echo = cfg.raw;
      echo["scheme"]["kind"] = k;
      echo["scheme"]["seed"] = seed;
      Checkpoint ck = Checkpoint::of(run.solver.net, echo, rng_digest(seed), run.report.history);
      if (cfg.deterministic())
        for (auto& h : ck.history) h.wall_seconds = 0.0;
      save_checkpoint((dir / (tag + ".ckpt")).string(), ck);
      std::ofstream loss(dir / (tag + "_loss.csv"));
      write_loss_csv(loss, run.report.history, cfg.deterministic());
      const double ips = run.report.wall_seconds > 0 ? run.report.items / run.report.wall_seconds : 0.0;
      rep["runs"].push_back({{"scheme", k}, {"seed", seed}, {"checkpoint", tag + ".ckpt"},
                             {"final_loss", run.report.history.empty() ? 0.0 : run.report.history.back().mean_loss},
                             {"epochs", run.report.history.size()}, {"items", run.report.items},
                             {"wall_seconds", run.report.wall_seconds},
                             {"items_per_second", cfg.deterministic() ? 0.0 : ips}});
    }
  }
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return 0;
}

UnrolledSolver solver_from_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  UnrolledSolver s{cfg.solver(), ck.net_as(cfg.net())};
  s.validate();
  return s;
}

int cmd_eval(const ExperimentConfig& cfg, const std::vector<std::string>& checkpoints, bool attack_only) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one --checkpoint");
  const std::string command = attack_only ? "attack" : "eval";
  const fs::path dir = run_dir(cfg, command);
  json rep = report_envelope(cfg, command);
  const std::uint64_t seed = cfg.seeds().front();
  const TaskData data = make_task_data(cfg, seed);
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const UnrolledSolver solver = solver_from_checkpoint(cfg, checkpoints[i]);
    const std::string tag = fs::path(checkpoints[i]).stem().string();
    json entry = {{"checkpoint", checkpoints[i]}, {"peak", data.peak}};
    if (attack_only) {
      EvalOptions o = cfg.eval_options("attacked");
      o.peak = data.peak;
      const EvalReport r = evaluate(solver, data.op, data.test, PerturbationSpec::worst(cfg.eval_attack()), o);
      entry["attacked"] = r.to_json();
      std::ofstream csv(dir / (tag + "_attacked.csv"));
      r.write_csv(csv);
    } else {
      const SolverEval ev = evaluate_solver(cfg, solver, data, seed);
      entry["metrics"] = ev.to_json();
      for (const EvalReport* r : {&ev.clean, &ev.attacked, &ev.average, &ev.ood}) {
        std::ofstream csv(dir / (tag + "_" + r->label + ".csv"));
        r->write_csv(csv);
      }
    }
    rep["evaluations"].push_back(entry);
  }
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  const fs::path dir = run_dir(cfg, "sweep");
  const auto& sw = cfg.raw.at("sweep");
  const auto rows = sweep_jitter_variance(cfg, sw.at("sigmas").get<std::vector<double>>(),
                                          sw.at("epsilons").get<std::vector<double>>(), cfg.seeds());
  std::ofstream csv(dir / "sweep.csv");
  write_sweep_csv(csv, rows);
  json rep = report_envelope(cfg, "sweep");
  for (const auto& r : rows)
    if (r.argmin) rep["argmin"].push_back({{"epsilon", r.epsilon}, {"seed", r.seed}, {"sigma", r.sigma}, {"risk", r.risk}});
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_verify(const ExperimentConfig& cfg) {
  const fs::path dir = run_dir(cfg, "verify");
  json checks = json::array();
  bool ok = true;
  auto add = [&](json j) {
    ok = ok && j.at("passed").get<bool>();
    checks.push_back(std::move(j));
  };
  const LinearOperator I = LinearOperator::identity(2);
  for (std::uint64_t seed : cfg.seeds()) {
    for (double eta : {0.1, 0.5, 1.0}) {
      for (int K : {1, 2, 10}) {
        UnrolledSolver s{UnrollConfig{K, eta, Variant::gd, InitRule::adjoint},
                         GradientNet::build(Architecture::mlp({2, 32, 32, 2}), seed)};
        Rng rng = make_rng(seed, streams::probes, static_cast<std::uint64_t>(K));
        const Tensor y = gaussian(Shape{8, 2}, 0.5, rng);
        const Tensor g = gaussian(Shape{8, 2}, 0.1, rng);
        auto tag = [&](json j) {
          j["seed"] = seed;
          j["eta"] = eta;
          j["K"] = K;
          return j;
        };
        add(tag(check_perturbation_expansion(s, I, y, g).summary()));
        add(tag(check_attack_expansion(s, I, y, g).summary()));
        add(tag(check_sgd_expansion(s, I, y, JitterSchedule::constant(K, 0.05), seed).summary()));
      }
    }
  }
  int worst_k = 0;
  double worst = 0.0;
  for (int k = 0; k <= 50; ++k) {
    for (double eta : {0.05, 0.1, 0.5, 0.9, 1.0}) {
      const double sw = variance_matching_sigma(1.0, eta, k);
      double sum = 0.0;
      for (int i = 0; i <= k; ++i) sum += eta * eta * std::pow(1.0 - eta, 2 * (k - i)) * sw;
      if (std::abs(sum - 1.0) > worst) {
        worst = std::abs(sum - 1.0);
        worst_k = k;
      }
    }
  }
  add({{"check", "variance_matching"}, {"deviation", worst}, {"worst_k", worst_k}, {"tolerance", 1e-12},
       {"passed", worst <= 1e-12}});
  add(check_lipschitz_F(I, GradientNet::build(Architecture::mlp({2, 32, 32, 2}), cfg.seeds().front()), 1000,
                        cfg.seeds().front())
          .summary());
  QuadraticPotential pot{Eigen::MatrixXd::Identity(2, 2) * 0.5};
  for (int K : {10, 100})
    add(check_convergence_bound(I, pot, Tensor::vector({0.3, -0.2}), K, 200, 1e-3, cfg.seeds().front()).summary());
  json rep = report_envelope(cfg, "verify");
  rep["checks"] = checks;
  rep["passed"] = ok;
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return ok ? 0 : 3;
}

int cmd_bench(const ExperimentConfig& cfg) {
  const fs::path dir = run_dir(cfg, "bench");
  const auto& b = cfg.raw.at("bench");
  BenchOptions opt{b.at("warmup_batches").get<int>(), b.at("windows").get<int>(), b.at("batches_per_window").get<int>()};
  const auto res = bench_training_speed(cfg, parse_schemes(b.at("schemes")), cfg.seeds().front(), opt);
  json rep = report_envelope(cfg, "bench");
  std::ofstream csv(dir / "bench.csv");
  csv << "scheme,items_per_second,stddev,batch_size\n";
  for (const auto& r : res) {
    rep["schemes"].push_back({{"scheme", r.kind}, {"items_per_second", r.mean}, {"stddev", r.stddev},
                              {"windows", r.window_rates}, {"batch_size", r.batch_size}});
    csv << scheme_name(r.kind) << ',' << r.mean << ',' << r.stddev << ',' << r.batch_size << '\n';
  }
  // throughput is wall-clock by nature; never scrubbed
  std::ofstream(dir / "report.json") << rep.dump(2) << '\n';
  std::cout << dir.string() << '\n';
  return 0;
}

// Collects eval reports below the given directories into one table:
// rows = checkpoints (schemes), columns = ID / attack / OOD PSNR and SSIM,
// plus a scatter CSV of (clean mse, attacked mse) per checkpoint.
int cmd_report(const ExperimentConfig& cfg, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw ConfigError("report needs at least one --input run directory");
  const fs::path dir = run_dir(cfg, "report");
  std::ofstream table(dir / "table.csv");
  std::ofstream scatter(dir / "scatter.csv");
  table << "run,checkpoint,id_psnr,id_ssim,attack_psnr,attack_ssim,ood_psnr,ood_ssim\n";
  scatter << "run,checkpoint,clean_mse,attacked_mse,ood_mse\n";
  auto cell = [](const json& j, const char* k) -> std::string {
    if (!j.contains(k) || j.at(k).is_null()) return "";
    return j.at(k).is_string() ? j.at(k).get<std::string>() : j.at(k).dump();
  };
  std::size_t rows = 0;
  for (const auto& in : inputs) {
    std::ifstream f(fs::path(in) / "report.json");
    if (!f) throw std::runtime_error("missing report.json in '" + in + "'");
    const json r = json::parse(f);
    if (r.value("command", "") != "eval") continue;
    for (const auto& e : r.at("evaluations")) {
      const json& m = e.at("metrics");
      const std::string ck = fs::path(e.at("checkpoint").get<std::string>()).stem().string();
      table << in << ',' << ck << ',' << cell(m.at("clean"), "psnr") << ',' << cell(m.at("clean"), "ssim") << ','
            << cell(m.at("attacked"), "psnr") << ',' << cell(m.at("attacked"), "ssim") << ','
            << cell(m.at("ood"), "psnr") << ',' << cell(m.at("ood"), "ssim") << '\n';
      scatter << in << ',' << ck << ',' << cell(m.at("clean"), "mse") << ',' << cell(m.at("attacked"), "mse") << ','
              << cell(m.at("ood"), "mse") << '\n';
      ++rows;
    }
  }
  json rep = report_envelope(cfg, "report");
  rep["rows"] = rows;
  rep["inputs"] = inputs;
  write_json(dir / "report.json", rep, cfg);
  std::cout << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SGD jittering for unrolled inverse-problem solvers"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config file");
    sub->add_option("-s,--set", common.overrides, "Dotted override key=value (repeatable)");
    sub->add_option("--task", common.task, "toy or seismic");
    sub->add_option("-o,--out", common.out_dir, "Output directory");
  };
  std::vector<std::string> schemes, checkpoints, inputs;
  auto* datagen = app.add_subcommand("datagen", "Generate and save datasets");
  auto* trainc = app.add_subcommand("train", "Train solvers and save checkpoints");
  trainc->add_option("--scheme", schemes, "Scheme(s): mse, at, input_jitter, sgd_jitter, spgd_jitter");
  auto* evalc = app.add_subcommand("eval", "Evaluate checkpoints (clean, attack, average, OOD)");
  evalc->add_option("--checkpoint", checkpoints, "Checkpoint file(s)")->required();
  auto* attackc = app.add_subcommand("attack", "Worst-case attack on checkpoints");
  attackc->add_option("--checkpoint", checkpoints, "Checkpoint file(s)")->required();
  auto* sweepc = app.add_subcommand("sweep", "SGD jittering variance sweep");
  auto* verifyc = app.add_subcommand("verify", "Run the numerical theory checks");
  auto* benchc = app.add_subcommand("bench", "Training throughput per scheme");
  auto* reportc = app.add_subcommand("report", "Aggregate eval run directories into tables");
  reportc->add_option("--input", inputs, "Run directories")->required();
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the effective config and exit");
  for (auto* s : {datagen, trainc, evalc, attackc, sweepc, verifyc, benchc, reportc}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const ExperimentConfig cfg = build_config(common);
    if (print_config) {
      std::cout << cfg.raw.dump(2) << '\n';
      return 0;
    }
    if (datagen->parsed()) return cmd_datagen(cfg);
    if (trainc->parsed()) return cmd_train(cfg, schemes);
    if (evalc->parsed()) return cmd_eval(cfg, checkpoints, false);
    if (attackc->parsed()) return cmd_eval(cfg, checkpoints, true);
    if (sweepc->parsed()) return cmd_sweep(cfg);
    if (verifyc->parsed()) return cmd_verify(cfg);
    if (benchc->parsed()) return cmd_bench(cfg);
    if (reportc->parsed()) return cmd_report(cfg, inputs);
  } catch (const ConfigError& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "config"}}.dump() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "format"}}.dump() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "runtime"}}.dump() << '\n';
    return 1;
  }
  return 1;
}
