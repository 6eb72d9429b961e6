#include <catch_amalgamated.hpp>

#include "sgdjit/eval.hpp"
#include "support.hpp"

using namespace sgdjit;
using namespace testing;

namespace {

// zero net with A = I: H(y) = y exactly
UnrolledSolver passthrough(std::size_t n) {
  return {UnrollConfig{}, GradientNet::build(Architecture::mlp({n, 4, n}), 0, true)};
}

UnrolledSolver toy_solver(std::uint64_t seed) {
  return {UnrollConfig{}, GradientNet::build(Architecture::mlp({2, 32, 32, 2}), seed)};
}

double mean_sq_residual(const Dataset& d) {
  return squared_norm(d.y - d.x) / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("psnr oracles") {
  CHECK(psnr_from_mse(0.01, 1.0) == Catch::Approx(20.0).epsilon(1e-14));
  CHECK(psnr_from_mse(1e-4, 2.0) == Catch::Approx(10.0 * std::log10(4e4)).epsilon(1e-14));
  CHECK(psnr_from_mse(0.0, 1.0) == psnr_sentinel);
  CHECK(std::isinf(psnr_sentinel));
  CHECK_THROWS(psnr_from_mse(0.1, 0.0));
  const Tensor a = Tensor::vector({0.0, 0.0, 0.0, 0.0});
  const Tensor b = Tensor::vector({0.1, -0.1, 0.1, -0.1});
  CHECK(psnr(b, a, 1.0) == Catch::Approx(20.0).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, Tensor::vector({1.0}), 1.0), ShapeError);
}

TEST_CASE("ssim oracles") {
  const Tensor img = randn(Shape{10, 12}, 1);
  CHECK(ssim2d(img, img, 4.0) == Catch::Approx(1.0).epsilon(1e-12));
  // constant images: only the luminance term survives
  const double L = 1.0, c1 = 1e-4, p = 0.3, q = 0.5;
  const double expect = (2 * p * q + c1) / (p * p + q * q + c1);
  CHECK(ssim2d(Tensor::full(Shape{8, 8}, p), Tensor::full(Shape{8, 8}, q), L) == Catch::Approx(expect).epsilon(1e-12));
  // symmetric in its arguments and below one for distinct images
  const Tensor other = randn(Shape{10, 12}, 2);
  CHECK(ssim2d(img, other, 4.0) == Catch::Approx(ssim2d(other, img, 4.0)).epsilon(1e-12));
  CHECK(ssim2d(img, other, 4.0) < 1.0);
  // negation flips both the luminance and the structure term
  CHECK(ssim2d(img, -1.0 * img, 4.0) > 0.0);
  CHECK(ssim2d(img, 0.5 * img, 4.0) < 1.0);
  CHECK_THROWS(ssim2d(randn(Shape{4, 4}, 3), randn(Shape{4, 4}, 4), 1.0));
  CHECK_THROWS(ssim2d(img, img, 0.0));
  CHECK_THROWS(ssim2d(randn(Shape{64}, 3), randn(Shape{64}, 3), 1.0));
}

TEST_CASE("clean evaluation of the identity solver is the measurement error") {
  const auto [tr, te] = gen_toy(5, 40, 0.01, 2);
  const EvalReport r = evaluate(passthrough(2), LinearOperator::identity(2), te, PerturbationSpec{});
  REQUIRE(r.samples.size() == 40);
  for (std::size_t i = 0; i < 40; ++i) {
    const Tensor z = te.sample_y(i) - te.sample_x(i);
    CHECK(r.samples[i].mse == Catch::Approx(squared_norm(z)).epsilon(1e-13));
    CHECK(r.samples[i].psnr == Catch::Approx(psnr_from_mse(squared_norm(z) / 2.0, 1.0)).epsilon(1e-12));
  }
  CHECK(r.mse == Catch::Approx(mean_sq_residual(te)).epsilon(1e-12));
  CHECK(r.peak == 1.0);
  CHECK(std::isnan(r.ssim));
  double sq = 0;
  for (const auto& s : r.samples) sq += (s.mse - r.mse) * (s.mse - r.mse);
  CHECK(r.risk_stderr == Catch::Approx(std::sqrt(sq / 39.0 / 40.0)).epsilon(1e-10));
  CHECK(clean_risk(passthrough(2), LinearOperator::identity(2), te) == r.mse);
}

TEST_CASE("worst case on the identity solver adds epsilon to every residual norm") {
  const auto [tr, te] = gen_toy(5, 20, 0.01, 3);
  const AttackConfig cfg{0.02, 30, 0.05};
  const EvalReport r = evaluate(passthrough(2), LinearOperator::identity(2), te, PerturbationSpec::worst(cfg));
  for (std::size_t i = 0; i < 20; ++i) {
    const double res = norm(te.sample_y(i) - te.sample_x(i));
    CHECK(r.samples[i].mse == Catch::Approx((res + 0.02) * (res + 0.02)).epsilon(1e-10));
  }
  CHECK(worst_case_risk(passthrough(2), LinearOperator::identity(2), te, cfg) == r.mse);
}

TEST_CASE("worst case dominates clean and average case for a trained-free net") {
  const auto [tr, te] = gen_toy(5, 30, 0.01, 4);
  const auto s = toy_solver(4);
  const auto I = LinearOperator::identity(2);
  const double clean = clean_risk(s, I, te);
  const double avg = avg_case_risk(s, I, te, PerturbationSpec::average(0.05, Sampling::uniform_ball, 1));
  const double worst = worst_case_risk(s, I, te, {0.05, 20, 0.02});
  CHECK(worst >= clean);
  CHECK(worst >= avg);
}

TEST_CASE("average case on the identity solver recovers E||e||^2 of the ball") {
  // noiseless data: error = ||e||^2, and E||e||^2 = r^2 d / (d + 2) for the uniform ball in R^d
  const Dataset d = gen_points({0.0, 0.0}, 2000, 0.0, 5, "test");
  const auto spec = PerturbationSpec::average(0.1, Sampling::uniform_ball, 6, 8);
  const double risk = avg_case_risk(passthrough(2), LinearOperator::identity(2), d, spec);
  CHECK(std::abs(risk - 0.01 * 2.0 / 4.0) < 0.03 * 0.005);
  const auto gspec = PerturbationSpec::average(0.1, Sampling::gaussian, 6, 8);
  CHECK(std::abs(avg_case_risk(passthrough(2), LinearOperator::identity(2), d, gspec) - 0.01) < 0.03 * 0.01);
  CHECK_THROWS(avg_case_risk(passthrough(2), LinearOperator::identity(2), d, PerturbationSpec{}));
}

TEST_CASE("a shift of the ground truth does not change the identity solver's error") {
  const auto [tr, te] = gen_toy(5, 25, 0.01, 7);
  const auto I = LinearOperator::identity(2);
  const double clean = clean_risk(passthrough(2), I, te);
  CHECK(generalization_risk(passthrough(2), I, te, PerturbationSpec::fixed_shift({0.005, 0.0})) ==
        Catch::Approx(clean).epsilon(1e-12));
  CHECK(generalization_risk(passthrough(2), I, te, PerturbationSpec::random_shift(0.3, 1)) ==
        Catch::Approx(clean).epsilon(1e-10));
  CHECK_THROWS_AS(generalization_risk(passthrough(2), I, te, PerturbationSpec::fixed_shift({1.0, 2.0, 3.0})),
                  ShapeError);
}

TEST_CASE("fixed shift equals evaluating on the shifted split") {
  const auto s = toy_solver(8);
  const auto I = LinearOperator::identity(2);
  const Dataset base = gen_points({0.0, 0.0}, 30, 0.01, 8, "ood");
  const Dataset moved = gen_points({0.005, 0.0}, 30, 0.01, 8, "ood");
  const double shifted = generalization_risk(s, I, base, PerturbationSpec::fixed_shift({0.005, 0.0}));
  CHECK(shifted == Catch::Approx(clean_risk(s, I, moved)).epsilon(1e-10));
}

TEST_CASE("per-sample randomness does not depend on the batch size") {
  const auto [tr, te] = gen_toy(5, 37, 0.01, 9);
  const auto s = toy_solver(9);
  const auto I = LinearOperator::identity(2);
  for (const auto& spec : {PerturbationSpec::average(0.05, Sampling::uniform_ball, 3, 4),
                           PerturbationSpec::random_shift(0.01, 3, 4)}) {
    const EvalReport a = evaluate(s, I, te, spec, {1});
    const EvalReport b = evaluate(s, I, te, spec, {16});
    for (std::size_t i = 0; i < 37; ++i) CHECK(a.samples[i].mse == Catch::Approx(b.samples[i].mse).epsilon(1e-12));
    const EvalReport c = evaluate(s, I, te, spec, {16});
    CHECK(b.mse == c.mse);
  }
  CHECK_FALSE(evaluate(s, I, te, PerturbationSpec::average(0.05, Sampling::gaussian, 3)).mse ==
              evaluate(s, I, te, PerturbationSpec::average(0.05, Sampling::gaussian, 4)).mse);
}

TEST_CASE("ssim and psnr on a perfect seismic reconstruction") {
  SeismicConfig cfg;
  cfg.peak_frequency = 1e5;
  cfg.noise_variance = 0.0;
  cfg.traces = 8;
  const Dataset d = gen_seismic(3, cfg, 10);
  const auto A = LinearOperator::from_descriptor(d.op);
  const UnrolledSolver s{UnrollConfig{}, GradientNet::build(Architecture::dncnn1d(3, 4, 3), 0, true)};
  const EvalReport r = evaluate(s, A, d, PerturbationSpec{}, {64, 0.0, true, "perfect"});
  CHECK(r.mse == 0.0);
  CHECK(r.psnr == psnr_sentinel);
  CHECK(r.ssim == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(r.peak == dynamic_range(d));
  CHECK(r.label == "perfect");
}

TEST_CASE("explicit peak overrides the split's dynamic range") {
  const auto [tr, te] = gen_toy(5, 10, 0.01, 11);
  const auto I = LinearOperator::identity(2);
  const EvalReport a = evaluate(passthrough(2), I, te, PerturbationSpec{});
  const EvalReport b = evaluate(passthrough(2), I, te, PerturbationSpec{}, {64, 2.0});
  CHECK(b.psnr == Catch::Approx(a.psnr + 20.0 * std::log10(2.0)).epsilon(1e-12));
}

TEST_CASE("report json encodes infinities as strings and NaN as null") {
  EvalReport r;
  r.label = "x";
  r.psnr = psnr_sentinel;
  r.mse = 0.0;
  const nlohmann::json j = r.to_json();
  CHECK(j.at("psnr") == "inf");
  CHECK(j.at("ssim").is_null());
  CHECK(j.at("mse") == 0.0);
  const std::string text = j.dump();
  CHECK(text.find("NaN") == std::string::npos);
  CHECK(nlohmann::json::parse(text) == j);
  std::ostringstream os;
  r.samples.push_back({0.25, 6.0, 0.5});
  r.write_csv(os);
  CHECK(os.str() == "sample,mse,psnr,ssim\n0,0.25,6,0.5\n");
}

TEST_CASE("perturbation spec validation and json") {
  CHECK_THROWS(PerturbationSpec::average(-0.1, Sampling::gaussian, 0).validate());
  CHECK_THROWS(PerturbationSpec::average(0.1, Sampling::gaussian, 0, 0).validate());
  CHECK_THROWS(PerturbationSpec::worst({0.1, 0, 0.01}).validate());
  const auto spec = PerturbationSpec::random_shift(0.3, 9, 5);
  const nlohmann::json j = spec;
  const auto back = j.get<PerturbationSpec>();
  CHECK(back.kind == spec.kind);
  CHECK(back.magnitude == 0.3);
  CHECK(back.draws == 5);
  CHECK(back.seed == 9);
}
