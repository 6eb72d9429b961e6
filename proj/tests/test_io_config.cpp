#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "sgdjit/experiment.hpp"
#include "sgdjit/io.hpp"
#include "support.hpp"

using namespace sgdjit;
using namespace testing;

namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sgdjit_test_io";
  fs::create_directories(dir);
  return dir / name;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f);
  return nlohmann::json::parse(f);
}

std::string expect_format_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.what();
  }
  FAIL("expected a FormatError");
  return {};
}

Checkpoint sample_checkpoint() {
  const auto net = GradientNet::build(Architecture::mlp({2, 8, 2}), 3);
  return Checkpoint::of(net, {{"lr", 1e-4}}, "digest", {{0, 0.5, 0.0}, {1, 0.25, 0.0}});
}

// tiny pipeline: data, training, evaluation, report
std::string run_report(const ExperimentConfig& cfg) {
  const TaskData data = make_task_data(cfg, 0);
  const SchemeRun run = train_scheme(cfg, SchemeKind::sgd_jitter, data, 0);
  nlohmann::json rep = report_envelope(cfg, "eval");
  rep["result"] = evaluate_solver(cfg, run.solver, data, 0).to_json();
  scrub_wall_clock(rep);
  return rep.dump(2);
}

}  // namespace

TEST_CASE("dataset round trip is bit exact") {
  SeismicConfig cfg;
  cfg.traces = 4;
  for (const Dataset& d : {gen_toy(20, 5, 0.01, 1).first, gen_seismic(3, cfg, 2, "test")}) {
    const std::string bytes = encode_dataset(d);
    const Dataset back = decode_dataset(bytes);
    CHECK(back == d);
    CHECK(encode_dataset(back) == bytes);
  }
  const fs::path p = scratch("toy.ds");
  const Dataset d = gen_toy(10, 2, 0.01, 3).first;
  save_dataset(p.string(), d);
  CHECK(load_dataset(p.string()) == d);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const Checkpoint c = sample_checkpoint();
  const std::string bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.parameters == c.parameters);
  CHECK(back.architecture == c.architecture);
  CHECK(back.config == c.config);
  CHECK(back.rng_digest == "digest");
  CHECK(back.history.size() == 2);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.net().parameters() == c.parameters);
  const fs::path p = scratch("net.ckpt");
  save_checkpoint(p.string(), c);
  CHECK(load_checkpoint(p.string()).parameters == c.parameters);
}

TEST_CASE("truncated and corrupted files are rejected") {
  const std::string ds = encode_dataset(gen_toy(10, 2, 0.01, 4).first);
  CHECK(expect_format_error([&] { decode_dataset(ds.substr(0, ds.size() - 3)); }).find("corrupt payload") !=
        std::string::npos);
  CHECK(expect_format_error([&] { decode_dataset(ds + "x"); }).find("corrupt payload") != std::string::npos);
  CHECK(expect_format_error([&] { decode_dataset(ds.substr(0, 10)); }).find("bad magic") != std::string::npos);
  const std::string ck = encode_checkpoint(sample_checkpoint());
  CHECK(expect_format_error([&] { decode_checkpoint(ck.substr(0, ck.size() - 8)); }).find("corrupt payload") !=
        std::string::npos);
  CHECK(expect_format_error([&] { decode_checkpoint(ds); }).find("bad magic") != std::string::npos);
  std::string broken = ck;
  broken[24] = '}';
  CHECK_THROWS_AS(decode_checkpoint(broken), FormatError);
}

TEST_CASE("format version mismatch is reported") {
  std::string ck = encode_checkpoint(sample_checkpoint());
  ck[8] = 7;
  const std::string msg = expect_format_error([&] { decode_checkpoint(ck); });
  CHECK(msg.find("format version 7") != std::string::npos);
}

TEST_CASE("loading a checkpoint into another architecture names the tensor") {
  const Checkpoint c = sample_checkpoint();
  try {
    (void)c.net_as(Architecture::mlp({2, 16, 2}));
    FAIL("expected a mismatch");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer0.weight") != std::string::npos);
  }
}

TEST_CASE("toy defaults match the golden config") {
  CHECK(toy_defaults() == read_json(fs::path(SGDJIT_GOLDEN_DIR) / "default_toy.json"));
  CHECK(seismic_defaults() == read_json(fs::path(SGDJIT_GOLDEN_DIR) / "default_seismic.json"));
}

TEST_CASE("config files overlay the defaults strictly") {
  const auto cfg = make_config({{"scheme", {{"epochs", 7}}}, {"seeds", {4}}}, {});
  CHECK(cfg.scheme(4).epochs == 7);
  CHECK(cfg.scheme(4).seed == 4);
  CHECK(cfg.scheme(4).batch_size == 256);
  CHECK(cfg.seeds() == std::vector<std::uint64_t>{4});
  CHECK_THROWS_AS(make_config({{"schem", {{"epochs", 7}}}}, {}), ConfigError);
  CHECK_THROWS_AS(make_config({{"scheme", {{"epoch", 7}}}}, {}), ConfigError);
  CHECK_THROWS_AS(make_config({{"scheme", 3}}, {}), ConfigError);
  CHECK_THROWS_AS(make_config(nlohmann::json::array(), {}), ConfigError);
  CHECK(make_config({{"task", "seismic"}}, {}).task() == "seismic");
  CHECK_THROWS_AS(make_config({{"task", "mri"}}, {}), ConfigError);
}

TEST_CASE("dotted overrides") {
  const auto cfg = make_config(nullptr, {"scheme.epochs=3", "eval.attack.epsilon=0.5", "scheme.kind=\"at\""});
  CHECK(cfg.scheme(0).epochs == 3);
  CHECK(cfg.eval_attack().epsilon == 0.5);
  CHECK(cfg.scheme(0).kind == SchemeKind::adversarial);
  CHECK(make_config(nullptr, {"scheme.kind=at"}).scheme(0).kind == SchemeKind::adversarial);
  CHECK(make_config(nullptr, {"task=seismic"}).task() == "seismic");
  CHECK_THROWS_AS(make_config(nullptr, {"scheme.nope=1"}), ConfigError);
  CHECK_THROWS_AS(make_config(nullptr, {"scheme=1"}), ConfigError);
  CHECK_THROWS_AS(make_config(nullptr, {"scheme.epochs=many"}), ConfigError);
  CHECK_THROWS_AS(make_config(nullptr, {"noequals"}), ConfigError);
}

TEST_CASE("cross-section validation") {
  CHECK_THROWS_AS(make_config(nullptr, {"scheme.kind=spgd_jitter"}), ConfigError);
  CHECK_THROWS_AS(make_config(nullptr, {"solver.variant=pgd"}), ConfigError);
  CHECK_NOTHROW(make_config(nullptr, {"solver.variant=pgd", "net.role=proximal", "scheme.kind=spgd_jitter"}));
  CHECK_THROWS_AS(make_config(nullptr, {"seeds=[]"}), ConfigError);
  CHECK_THROWS(make_config(nullptr, {"solver.K=0"}));
}

TEST_CASE("run ids are the config hash in deterministic mode") {
  const auto a = make_config(nullptr, {});
  const auto b = make_config(nullptr, {});
  CHECK(a.run_id() == b.run_id());
  CHECK(a.run_id() == a.hash());
  CHECK(a.hash().size() == 16);
  CHECK_FALSE(make_config(nullptr, {"scheme.epochs=3"}).hash() == a.hash());
  CHECK_FALSE(make_config(nullptr, {"deterministic=false"}).run_id() == make_config(nullptr, {"deterministic=false"}).hash());
}

TEST_CASE("deterministic reports are byte identical") {
  const auto cfg = make_config(nullptr, {"scheme.epochs=5", "data.n_train=40", "data.n_test=10", "data.n_ood=10",
                                         "eval.attack.steps=5"});
  const std::string a = run_report(cfg);
  CHECK(a == run_report(cfg));
  CHECK(a.find("\"wall_seconds\": 0.0") != std::string::npos);
  CHECK_FALSE(a == run_report(make_config(cfg.raw, {"scheme.jitter_variance=0.02"})));
}

TEST_CASE("loss csv zeroes the clock in deterministic mode") {
  std::ostringstream det, live;
  const std::vector<EpochRecord> h{{0, 0.5, 1.25}};
  write_loss_csv(det, h, true);
  write_loss_csv(live, h, false);
  CHECK(det.str() == "epoch,mean_loss,wall_seconds\n0,0.5,0\n");
  CHECK(live.str() == "epoch,mean_loss,wall_seconds\n0,0.5,1.25\n");
}
