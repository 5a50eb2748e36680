#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "advood/detectors.hpp"
#include "advood/metrics.hpp"
#include "advood/rng.hpp"
#include "gtest/gtest.h"
#include "support/detector_oracle.hpp"
#include "support/toy_models.hpp"

namespace advood {
namespace {

constexpr std::size_t kD = 6, kC = 4;

struct Toy {
  IdStats stats;
  ForwardTaps test;
};

Tensor random_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Logits come from the same head the detectors re-project through.
ForwardTaps make_taps(std::size_t n, const Tensor& w, const Tensor& b, Rng& rng) {
  Tensor f = random_tensor(Shape{n, kD}, rng, 0.0, 2.0);
  ForwardTaps t = ForwardTaps::from_logits(f, kernels::linear(f, w, b));
  t.block_outputs.push_back(random_tensor(Shape{n, 2, 2, 2}, rng, -1.0, 1.0));
  t.block_outputs.push_back(random_tensor(Shape{n, 3, 1, 2}, rng, 0.0, 1.5));
  return t;
}

Toy make_toy(std::uint64_t seed = 21) {
  Rng rng(seed);
  Toy toy;
  toy.stats.head_weight = random_tensor(Shape{kC, kD}, rng, -1.0, 1.0);
  toy.stats.head_bias = random_tensor(Shape{kC}, rng, -0.2, 0.2);
  toy.stats.taps = make_taps(40, toy.stats.head_weight, toy.stats.head_bias, rng);
  for (std::size_t i = 0; i < 40; ++i) toy.stats.labels.push_back(static_cast<int>(i % kC));
  toy.test = make_taps(5, toy.stats.head_weight, toy.stats.head_bias, rng);
  return toy;
}

std::vector<double> run(DetectorKind k, const Toy& toy, const Hyperparams& hp = {}) {
  return score(fit(k, toy.stats, hp), toy.test);
}

using testing::AffineNet;

void expect_close(const std::vector<double>& got, const std::vector<double>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got[i], want[i], 1e-9 * std::max(1.0, std::abs(want[i]))) << "record " << i;
  }
}

TEST(DetectorKind, SixteenNamesRoundTrip) {
  EXPECT_EQ(kAllDetectors.size(), 16u);
  for (DetectorKind k : kAllDetectors) EXPECT_EQ(parse_detector_kind(to_string(k)), k);
  try {
    parse_detector_kind("bogus");
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    for (DetectorKind k : kAllDetectors) EXPECT_NE(msg.find(to_string(k)), std::string::npos);
  }
}

TEST(Mds, TwoPointClassesGiveRidgeCovariance) {
  IdStats s;
  s.taps = ForwardTaps::from_logits(Tensor(Shape{2, 2}, std::vector<double>{0, 0, 2, 0}),
                                    Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
  s.labels = {0, 1};
  const DetectorState st = fit(DetectorKind::kMds, s);
  const Tensor& mu = st.artifacts.at("means");
  EXPECT_EQ(mu.vec(), (std::vector<double>{0, 0, 2, 0}));
  // Zero scatter: trace 0, so the ridge is added as-is.
  const Tensor& p = st.artifacts.at("precision");
  EXPECT_NEAR(p[0], 1.0 / 1e-3, 1e-6);
  EXPECT_NEAR(p[3], 1.0 / 1e-3, 1e-6);
  EXPECT_EQ(p[1], 0.0);
}

TEST(Mds, IdentityCovarianceIsSquaredDistance) {
  DetectorState st;
  st.kind = DetectorKind::kMds;
  st.artifacts.set("means", Tensor(Shape{2, 2}, std::vector<double>{0, 0, 2, 0}));
  st.artifacts.set("precision", Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
  const ForwardTaps t = ForwardTaps::from_logits(Tensor(Shape{1, 2}, std::vector<double>{1, 0}),
                                                 Tensor(Shape{1, 2}, 0.0));
  EXPECT_EQ(score(st, t)[0], -1.0);
}

TEST(Knn, SingleBankVector) {
  IdStats s;
  s.taps = ForwardTaps::from_logits(Tensor(Shape{1, 2}, std::vector<double>{3, 0}),
                                    Tensor(Shape{1, 2}, 0.0));
  s.labels = {0};
  Hyperparams hp;
  hp.knn_k = 1;
  const DetectorState st = fit(DetectorKind::kKnn, s, hp);
  EXPECT_EQ(st.artifacts.at("bank").vec(), (std::vector<double>{1, 0}));
  const ForwardTaps q = ForwardTaps::from_logits(Tensor(Shape{1, 2}, std::vector<double>{0, 1}),
                                                 Tensor(Shape{1, 2}, 0.0));
  EXPECT_DOUBLE_EQ(score(st, q)[0], -std::numbers::sqrt2);
}

TEST(Msp, UniformProbabilities) {
  IdStats s;
  s.taps = ForwardTaps::from_logits(Tensor(Shape{1, 1}, 0.0), Tensor(Shape{1, 4}, 0.0));
  EXPECT_DOUBLE_EQ(score(fit(DetectorKind::kMsp, s), s.taps)[0], 0.25);
}

TEST(Ebo, ZeroLogits) {
  IdStats s;
  s.taps = ForwardTaps::from_logits(Tensor(Shape{1, 1}, 0.0), Tensor(Shape{1, 2}, 0.0));
  EXPECT_DOUBLE_EQ(score(fit(DetectorKind::kEbo, s), s.taps)[0], std::numbers::ln2);
}

TEST(Klm, TemplateMatchScoresZero) {
  const Toy toy = make_toy();
  const DetectorState st = fit(DetectorKind::kKlm, toy.stats);
  const Tensor& tpl = st.artifacts.at("templates");
  Tensor logits(Shape{1, kC});
  for (std::size_t j = 0; j < kC; ++j) logits[j] = std::log(tpl[j]);
  const ForwardTaps t = ForwardTaps::from_logits(Tensor(Shape{1, kD}, 1.0), logits);
  EXPECT_NEAR(score(st, t)[0], 0.0, 1e-12);
  for (double v : run(DetectorKind::kKlm, toy)) EXPECT_LE(v, 1e-15);
}

TEST(Vim, FullSubspaceIsEbo) {
  const Toy toy = make_toy();
  Hyperparams hp;
  hp.vim_dim = static_cast<int>(kD);
  const DetectorState st = fit(DetectorKind::kVim, toy.stats, hp);
  EXPECT_FALSE(st.artifacts.contains("residual"));
  EXPECT_EQ(score(st, toy.test), run(DetectorKind::kEbo, toy));
}

TEST(Shaping, NoOpSettingsReproduceEbo) {
  const Toy toy = make_toy();
  const std::vector<double> ebo = run(DetectorKind::kEbo, toy);
  Hyperparams hp;
  hp.react_percentile = 100;
  hp.dice_sparsity = 0;
  hp.ash_percentile = 0;
  EXPECT_EQ(run(DetectorKind::kReact, toy, hp), ebo);
  EXPECT_EQ(run(DetectorKind::kDice, toy, hp), ebo);
  EXPECT_EQ(run(DetectorKind::kAsh, toy, hp), ebo);
}

// With nothing pruned the scale factor is exp(1) on every unit.
TEST(Shaping, ScaleAtZeroPercentileIsEboOnScaledFeatures) {
  const Toy toy = make_toy();
  Hyperparams hp;
  hp.scale_percentile = 0;
  Tensor f = toy.test.features;
  for (double& v : f.data()) v *= std::exp(1.0);
  const ForwardTaps scaled =
      ForwardTaps::from_logits(f, kernels::linear(f, toy.stats.head_weight, toy.stats.head_bias));
  const std::vector<double> ebo = score(fit(DetectorKind::kEbo, toy.stats), scaled);
  expect_close(run(DetectorKind::kScale, toy, hp), ebo);
}

TEST(Oracle, FeatureAndLogitDetectors) {
  const Toy toy = make_toy();
  using namespace oracle;
  const Mat train = rows(toy.stats.taps.features), train_logits = rows(toy.stats.taps.logits);
  const Mat x = rows(toy.test.features), logits = rows(toy.test.logits);
  const Mat w = rows(toy.stats.head_weight);
  const Vec b(toy.stats.head_bias.data().begin(), toy.stats.head_bias.data().end());
  const Hyperparams hp;
  const ClassGaussian g = fit_gaussian(train, toy.stats.labels, kC, hp.ridge);
  const std::size_t k = detail::knn_default(train.size());

  auto each = [&](auto fn) {
    std::vector<double> out;
    for (std::size_t i = 0; i < x.size(); ++i) out.push_back(fn(i));
    return out;
  };
  expect_close(run(DetectorKind::kMsp, toy),
               each([&](std::size_t i) { auto p = softmax(logits[i]); return *std::max_element(p.begin(), p.end()); }));
  expect_close(run(DetectorKind::kMls, toy),
               each([&](std::size_t i) { return *std::max_element(logits[i].begin(), logits[i].end()); }));
  expect_close(run(DetectorKind::kEbo, toy), each([&](std::size_t i) { return energy(logits[i]); }));
  expect_close(run(DetectorKind::kMds, toy), each([&](std::size_t i) { return mds(g, x[i]); }));
  expect_close(run(DetectorKind::kRmds, toy), each([&](std::size_t i) { return rmds(g, x[i]); }));
  expect_close(run(DetectorKind::kReact, toy),
               each([&](std::size_t i) { return react(train, w, b, hp.react_percentile, x[i]); }));
  expect_close(run(DetectorKind::kKlm, toy), each([&](std::size_t i) { return klm(train_logits, logits[i]); }));
  expect_close(run(DetectorKind::kVim, toy),
               each([&](std::size_t i) { return vim(train, train_logits, (kD + 1) / 2, x[i], logits[i]); }));
  expect_close(run(DetectorKind::kKnn, toy), each([&](std::size_t i) { return knn(train, x[i], k); }));
  expect_close(run(DetectorKind::kNnGuide, toy),
               each([&](std::size_t i) { return nnguide(train, train_logits, x[i], logits[i], k); }));
  expect_close(run(DetectorKind::kDice, toy),
               each([&](std::size_t i) { return dice(train, w, b, hp.dice_sparsity, x[i]); }));
  expect_close(run(DetectorKind::kAsh, toy),
               each([&](std::size_t i) { return ash(w, b, hp.ash_percentile, x[i]); }));
  expect_close(run(DetectorKind::kScale, toy),
               each([&](std::size_t i) { return scale(w, b, hp.scale_percentile, x[i]); }));
  expect_close(run(DetectorKind::kGen, toy),
               each([&](std::size_t i) { return gen(logits[i], hp.gen_gamma, std::min<std::size_t>(kC, 10)); }));
  const GramFit gf = gram_fit(toy.stats.taps.block_outputs, toy.stats.taps.predicted, kC,
                             hp.gram_orders);
  expect_close(run(DetectorKind::kGram, toy), each([&](std::size_t i) {
                 return gram_score(gf, toy.test.block_outputs, i, toy.test.predicted[i],
                                   hp.gram_orders);
               }));
}

TEST(Oracle, Odin) {
  Rng rng(31);
  const Tensor w = random_tensor(Shape{3, 4}, rng, -1.0, 1.0);
  const Tensor b = random_tensor(Shape{3}, rng, -0.1, 0.1);
  const AffineNet net(w, b);
  const Tensor images = random_tensor(Shape{5, 1, 2, 2}, rng, 0.0, 1.0);
  Graph g;
  const Tensor logits = net.logits(g, g.constant(images)).value();
  IdStats s;
  s.taps = ForwardTaps::from_logits(images.reshaped(Shape{5, 4}), logits);
  const DetectorState st = fit(DetectorKind::kOdin, s);
  const std::vector<double> got = score(st, s.taps, {&net, &images});
  const oracle::Mat wm = oracle::rows(w), xm = oracle::rows(images.reshaped(Shape{5, 4}));
  const oracle::Vec bv(b.data().begin(), b.data().end());
  std::vector<double> want;
  for (const auto& x : xm) {
    want.push_back(oracle::odin(wm, bv, x, st.hp.odin_temperature, st.hp.odin_epsilon));
  }
  expect_close(got, want);
  EXPECT_THROW(score(st, s.taps), Error);
}

TEST(Properties, RangesAndDeterminism) {
  const Toy toy = make_toy();
  for (double v : run(DetectorKind::kMsp, toy)) {
    EXPECT_GE(v, 1.0 / kC);
    EXPECT_LE(v, 1.0);
  }
  for (double v : run(DetectorKind::kKnn, toy)) EXPECT_LE(v, 0.0);
  for (DetectorKind k : kAllDetectors) {
    if (k == DetectorKind::kOdin) continue;
    const std::vector<double> a = run(k, toy), b = run(k, toy);
    EXPECT_EQ(a, b) << to_string(k);
    for (double v : a) EXPECT_TRUE(std::isfinite(v)) << to_string(k);
  }
}

TEST(Properties, AurocInvariantUnderAffineMap) {
  const Toy toy = make_toy();
  const Toy other = make_toy(22);
  for (DetectorKind k : {DetectorKind::kMds, DetectorKind::kEbo, DetectorKind::kKnn}) {
    const DetectorState st = fit(k, toy.stats);
    std::vector<double> id = score(st, toy.test), ood = score(st, other.test);
    const double before = auroc(id, ood);
    for (double& v : id) v = 2 * v + 1;
    for (double& v : ood) v = 2 * v + 1;
    EXPECT_EQ(auroc(id, ood), before) << to_string(k);
  }
}

TEST(Fit, MissingTapOrHeadThrows) {
  IdStats s;
  s.taps = ForwardTaps::from_logits(Tensor(Shape{3, 2}, 1.0), Tensor(Shape{3, 2}, 0.0));
  s.labels = {0, 1, 0};
  EXPECT_THROW(fit(DetectorKind::kGram, s), Error);
  EXPECT_THROW(fit(DetectorKind::kReact, s), Error);
}

TEST(Detect, ThresholdConvention) {
  DetectorState st;
  EXPECT_THROW(detect(st, std::vector<double>{1.0}), Error);
  std::vector<double> id;
  for (int i = 0; i < 200; ++i) id.push_back(i * 0.5);
  calibrate(st, id);
  const std::vector<bool> d = detect(st, id);
  const double rate = static_cast<double>(std::count(d.begin(), d.end(), true)) / 200.0;
  EXPECT_GE(rate, 0.95);
  EXPECT_LE(rate, 0.95 + 1.0 / 200.0);
  EXPECT_EQ(detect(st, std::vector<double>{st.tau})[0], true);
  const std::vector<bool> low = detect(st, std::vector<double>{st.tau - 1, st.tau - 2});
  EXPECT_FALSE(low[0] || low[1]);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const Toy toy = make_toy();
  const auto dir = std::filesystem::temp_directory_path() / "advood_detectors_test";
  std::filesystem::create_directories(dir);
  for (DetectorKind k : kAllDetectors) {
    if (k == DetectorKind::kOdin) continue;
    DetectorState st = fit(k, toy.stats);
    calibrate(st, score(st, toy.stats.taps));
    const std::string stem = (dir / std::string(to_string(k))).string();
    save_detector(st, stem);
    const DetectorState back = load_detector(stem);
    EXPECT_EQ(back.tau, st.tau);
    EXPECT_EQ(score(back, toy.test), score(st, toy.test)) << to_string(k);
  }
  std::filesystem::remove_all(dir);
}

TEST(Hyperparams, JsonRoundTripAndValidation) {
  Hyperparams hp;
  hp.knn_k = 7;
  hp.gram_orders = {1, 3};
  const Hyperparams back = hyperparams_from_json(to_json(hp), "/hyperparams", {});
  EXPECT_EQ(to_json(back), to_json(hp));
  EXPECT_THROW(hyperparams_from_json({{"nope", 1}}, "/hyperparams", {}), ConfigError);
  EXPECT_THROW(hyperparams_from_json({{"ash_percentile", 120}}, "/hyperparams", {}), ConfigError);
}

}  // namespace
}  // namespace advood
