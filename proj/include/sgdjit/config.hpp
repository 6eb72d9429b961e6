#pragma once

// Experiment configuration: a JSON document with nested sections. A file
// only needs the keys it changes; everything else comes from the task
// defaults. Keys absent from the defaults are rejected, and `--set a.b=v`
// overrides address the same tree with dotted paths.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdjit/datagen.hpp"
#include "sgdjit/eval.hpp"
#include "sgdjit/nets.hpp"
#include "sgdjit/schemes.hpp"
#include "sgdjit/unroll.hpp"

namespace sgdjit {

inline constexpr const char* version_string = "sgdjit 0.1.0";
inline constexpr int report_schema_version = 1;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline nlohmann::json toy_defaults() {
  using nlohmann::json;
  TrainingScheme scheme;
  scheme.epochs = 500;
  scheme.batch_size = 256;
  scheme.attack = {0.01, 50, 0.05};
  scheme.input_variance = 0.01;
  scheme.jitter_variance = 0.01;
  json s = scheme;
  s.erase("seed");
  return {
      {"task", "toy"},
      {"data",
       {{"n_train", 200},
        {"n_test", 50},
        {"n_ood", 50},
        {"noise_variance", 0.01},
        {"per_coordinate", false},
        {"ood_bias", {0.005, 0.0}},
        {"seismic", SeismicConfig{}},
        {"ood_layer_magnitude", 0.1},
        {"ood_layer_time", 32}}},
      {"solver", UnrollConfig{}},
      {"net", Architecture::mlp({2, 32, 32, 2})},
      {"scheme", s},
      {"eval",
       {{"attack", AttackConfig{0.01, 50, 0.05}},
        {"average_radius", 0.01},
        {"average_sampling", Sampling::uniform_ball},
        {"average_draws", 16},
        {"batch", 64},
        {"ssim", false}}},
      {"sweep", {{"sigmas", {0.0, 1e-3, 1e-2, 1e-1}}, {"epsilons", {0.0, 0.01}}}},
      {"bench", {{"warmup_batches", 20}, {"windows", 7}, {"batches_per_window", 60},
                 {"schemes", {"mse", "at", "input_jitter", "sgd_jitter"}}}},
      {"seeds", {0, 1, 2}},
      {"output_dir", "runs"},
      {"deterministic", true},
  };
}

inline nlohmann::json seismic_defaults() {
  nlohmann::json j = toy_defaults();
  j["task"] = "seismic";
  j["data"]["n_train"] = 32;
  j["data"]["n_test"] = 8;
  j["data"]["n_ood"] = 8;
  j["data"]["noise_variance"] = 0.5;
  j["net"] = Architecture::dncnn1d(5, 16, 3);
  j["scheme"]["epochs"] = 30;
  j["scheme"]["batch_size"] = 16;
  j["scheme"]["learning_rate"] = 1e-3;
  j["scheme"]["attack"] = AttackConfig{1.0, 5, 0.25};
  j["scheme"]["input_variance"] = 0.05;
  j["scheme"]["jitter_variance"] = 0.1;
  j["eval"]["attack"] = AttackConfig{1.0, 20, 0.1};
  j["eval"]["average_radius"] = 1.0;
  j["eval"]["batch"] = 8;
  j["eval"]["ssim"] = true;
  j["sweep"]["epsilons"] = {0.0, 1.0};
  return j;
}

inline nlohmann::json task_defaults(const std::string& task) {
  if (task == "toy") return toy_defaults();
  if (task == "seismic") return seismic_defaults();
  throw ConfigError("unknown task '" + task + "' (expected toy or seismic)");
}

namespace detail {

/// Overlays `patch` on `base`; objects merge key by key, anything else
/// replaces. Every key of `patch` must already exist in `base`.
inline void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    nlohmann::json& dst = base[it.key()];
    if (dst.is_object() && it->is_object())
      merge_strict(dst, *it, key);
    else if (dst.is_object() != it->is_object())
      throw ConfigError("config key '" + key + "' has the wrong type");
    else
      dst = *it;
  }
}

inline nlohmann::json parse_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

}  // namespace detail

/// Applies one dotted override such as `scheme.epochs=10` or
/// `eval.attack.epsilon=0.5`. Values parse as JSON, falling back to a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  std::string walked;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    walked += (walked.empty() ? "" : ".") + key;
    if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + walked + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value = detail::parse_value(assignment.substr(eq + 1));
  if (node->is_object() && !value.is_object()) throw ConfigError("config key '" + path + "' is a section");
  if (node->is_number() && !value.is_number()) throw ConfigError("config key '" + path + "' expects a number");
  *node = std::move(value);
}

struct ExperimentConfig {
  nlohmann::json raw;

  std::string task() const { return raw.at("task").get<std::string>(); }
  UnrollConfig solver() const { return raw.at("solver").get<UnrollConfig>(); }
  Architecture net() const { return raw.at("net").get<Architecture>(); }
  std::vector<std::uint64_t> seeds() const { return raw.at("seeds").get<std::vector<std::uint64_t>>(); }
  std::string output_dir() const { return raw.at("output_dir").get<std::string>(); }
  bool deterministic() const { return raw.at("deterministic").get<bool>(); }
  SeismicConfig seismic() const { return raw.at("data").at("seismic").get<SeismicConfig>(); }

  TrainingScheme scheme(std::uint64_t seed) const {
    nlohmann::json s = raw.at("scheme");
    s["seed"] = seed;
    return s.get<TrainingScheme>();
  }

  AttackConfig eval_attack() const { return raw.at("eval").at("attack").get<AttackConfig>(); }

  PerturbationSpec average_spec(std::uint64_t seed) const {
    const auto& e = raw.at("eval");
    return PerturbationSpec::average(e.at("average_radius").get<double>(), e.at("average_sampling").get<Sampling>(),
                                     seed, e.at("average_draws").get<int>());
  }

  EvalOptions eval_options(const std::string& label = {}) const {
    EvalOptions o;
    o.batch = raw.at("eval").at("batch").get<std::size_t>();
    o.ssim = raw.at("eval").at("ssim").get<bool>();
    o.label = label;
    return o;
  }

  /// Cross-section consistency: scheme, solver variant and net role agree.
  void validate() const {
    const UnrollConfig sc = solver();
    sc.validate();
    const Architecture a = net();
    a.validate();
    const TrainingScheme ts = scheme(0);
    if (ts.kind == SchemeKind::spgd_jitter && sc.variant != Variant::pgd)
      throw ConfigError("scheme spgd_jitter requires solver.variant = pgd");
    if (ts.kind == SchemeKind::sgd_jitter && sc.variant != Variant::gd)
      throw ConfigError("scheme sgd_jitter requires solver.variant = gd");
    if (sc.variant == Variant::pgd && a.role != NetRole::proximal)
      throw ConfigError("solver.variant = pgd requires net.role = proximal");
    if (sc.variant == Variant::gd && a.role != NetRole::gradient)
      throw ConfigError("solver.variant = gd requires net.role = gradient");
    const std::string t = task();
    if (t == "toy" && a.kind != ArchKind::mlp) throw ConfigError("task toy expects an mlp net");
    if (t == "seismic") seismic().validate();
    if (seeds().empty()) throw ConfigError("seeds must not be empty");
  }

  /// FNV-1a over the canonical dump.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : raw.dump()) h = (h ^ c) * 0x100000001b3ULL;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }

  /// Config hash; prefixed with a UTC timestamp outside deterministic mode.
  std::string run_id() const {
    if (deterministic()) return hash();
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << '_' << hash();
    return os.str();
  }
};

/// Task defaults, overlaid with `file` (may be null) and then `overrides`.
inline ExperimentConfig make_config(const nlohmann::json& file, const std::vector<std::string>& overrides,
                                    const std::string& task_hint = {}) {
  std::string task = task_hint.empty() ? "toy" : task_hint;
  if (file.is_object() && file.contains("task")) task = file.at("task").get<std::string>();
  for (const auto& o : overrides)
    if (o.rfind("task=", 0) == 0) task = detail::parse_value(o.substr(5)).get<std::string>();
  nlohmann::json cfg = task_defaults(task);
  if (!file.is_null()) {
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    detail::merge_strict(cfg, file, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  ExperimentConfig ec{cfg};
  try {
    ec.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return ec;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json file;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    try {
      file = nlohmann::json::parse(f, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
  }
  return make_config(file, overrides);
}

}  // namespace sgdjit
