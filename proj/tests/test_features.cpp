#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "uir/features.hpp"
#include "uir/rng.hpp"

using namespace uir;
namespace fs = std::filesystem;

namespace {

Tensor random_input(int h, int w, uint64_t seed) {
  Tensor t({3, h, w});
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform();
  return t;
}

FeatureExtractorConfig small_perceptual() {
  FeatureExtractorConfig cfg;
  cfg.profile = ExtractorProfile::perceptual16;
  cfg.stage_widths = {8, 16, 32};
  return cfg;
}

FeatureExtractorConfig small_contrastive() {
  FeatureExtractorConfig cfg;
  cfg.profile = ExtractorProfile::contrastive19;
  cfg.stage_widths = {8, 16, 32, 32, 32};
  return cfg;
}

}  // namespace

TEST_CASE("tap naming and minimum input per profile") {
  FeatureExtractor p16 = FeatureExtractor::seeded_random(small_perceptual(), 1);
  CHECK(p16.tap_names() == std::vector<std::string>{"relu1_2", "relu2_2", "relu3_3"});
  CHECK(p16.min_input() == 8);

  FeatureExtractor c19 = FeatureExtractor::seeded_random(small_contrastive(), 1);
  CHECK(c19.tap_names() ==
        std::vector<std::string>{"relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"});
  CHECK(c19.min_input() == 32);
  CHECK(c19.default_tap_weights() ==
        std::vector<double>{1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0});
}

TEST_CASE("extraction is deterministic and tap sizes are non-increasing") {
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_contrastive(), 2);
  Tensor x = random_input(32, 32, 3);
  auto a = fx.extract(x);
  auto b = fx.extract(x);
  REQUIRE(a.size() == 5);
  int prev_h = 1 << 20;
  for (const std::string& name : fx.tap_names()) {
    REQUIRE(a.at(name).data == b.at(name).data);
    int h = a.at(name).dim(1);
    CHECK(h <= prev_h);
    prev_h = h;
  }
}

TEST_CASE("input below the extractor minimum raises InputTooSmall") {
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_contrastive(), 4);
  Tensor x = random_input(16, 16, 5);
  try {
    fx.extract(x);
    FAIL("expected InputTooSmall");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InputTooSmall);
  }
}

TEST_CASE("feature distance identity, symmetry and weight linearity") {
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_perceptual(), 6);
  Tensor a = random_input(16, 16, 7);
  Tensor b = random_input(16, 16, 8);
  std::map<std::string, double> w{{"relu1_2", 1.0}, {"relu2_2", 1.0}, {"relu3_3", 1.0}};

  CHECK(feature_distance(fx, a, a, w) == 0.0);
  double dab = feature_distance(fx, a, b, w);
  double dba = feature_distance(fx, b, a, w);
  CHECK(dab == dba);
  CHECK(dab > 0.0);

  std::map<std::string, double> zero{{"relu1_2", 0.0}, {"relu2_2", 0.0}, {"relu3_3", 0.0}};
  CHECK(feature_distance(fx, a, b, zero) == 0.0);

  std::map<std::string, double> twice{{"relu1_2", 2.0}, {"relu2_2", 2.0}, {"relu3_3", 2.0}};
  CHECK_THAT(feature_distance(fx, a, b, twice), Catch::Matchers::WithinRel(2.0 * dab, 1e-12));
}

TEST_CASE("negative tap weight is rejected") {
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_perceptual(), 9);
  Tensor a = random_input(16, 16, 10);
  std::map<std::string, double> w{{"relu1_2", -0.5}};
  try {
    feature_distance(fx, a, a, w);
    FAIL("expected NegativeWeight");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NegativeWeight);
  }
}

TEST_CASE("input gradient through the taps matches finite differences") {
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_perceptual(), 11);
  Tensor x = random_input(32, 32, 12);

  ad::Tape tape;
  ad::Var vx = tape.leaf(x, true);
  auto taps = fx.extract_vars(tape, vx);
  ad::Var total = ad::mean_all(tape, taps[0]);
  for (size_t i = 1; i < taps.size(); ++i)
    total = ad::add(tape, total, ad::mean_all(tape, taps[i]));
  tape.backward(total);
  Tensor grad = tape.gradient(vx);

  auto eval_plain = [&]() {
    ad::Tape t;
    auto tp = fx.extract_vars(t, t.constant(x));
    double s = 0.0;
    for (ad::Var v : tp) s += t.scalar(ad::mean_all(t, v));
    return s;
  };

  Rng pick(13);
  for (int trial = 0; trial < 10; ++trial) {
    size_t idx = static_cast<size_t>(pick.uniform_int(static_cast<int>(x.numel())));
    double h = 1e-5;
    double keep = x.data[idx];
    x.data[idx] = keep + h;
    double fp = eval_plain();
    x.data[idx] = keep - h;
    double fm = eval_plain();
    x.data[idx] = keep;
    double fd = (fp - fm) / (2.0 * h);
    double denom = std::max({std::fabs(fd), std::fabs(grad.data[idx]), 1e-8});
    INFO("coord " << idx);
    CHECK(std::fabs(fd - grad.data[idx]) / denom < 1e-3);
  }
}

TEST_CASE("weights are frozen across checkpoint round trip") {
  fs::path dir = fs::temp_directory_path() / "uir_features_test";
  fs::create_directories(dir);
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_contrastive(), 14);
  fx.save_checkpoint(dir / "fx.uirc");
  FeatureExtractor loaded = FeatureExtractor::from_checkpoint(dir / "fx.uirc", small_contrastive());
  Tensor x = random_input(32, 32, 15);
  auto a = fx.extract(x);
  auto b = loaded.extract(x);
  for (const std::string& name : fx.tap_names()) REQUIRE(a.at(name).data == b.at(name).data);
}

TEST_CASE("checkpoint with wrong config digest is rejected") {
  fs::path dir = fs::temp_directory_path() / "uir_features_test";
  fs::create_directories(dir);
  FeatureExtractor fx = FeatureExtractor::seeded_random(small_contrastive(), 16);
  fx.save_checkpoint(dir / "fx2.uirc");
  try {
    FeatureExtractor::from_checkpoint(dir / "fx2.uirc", small_perceptual());
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidConfig);
  }
}

TEST_CASE("reduced-depth contrastive profile accepts small inputs") {
  FeatureExtractorConfig cfg;
  cfg.profile = ExtractorProfile::contrastive19;
  cfg.num_stages = 3;
  cfg.stage_widths = {8, 16, 32};
  FeatureExtractor fx = FeatureExtractor::seeded_random(cfg, 17);
  CHECK(fx.min_input() == 8);
  CHECK(fx.tap_names() == std::vector<std::string>{"relu1_1", "relu2_1", "relu3_1"});
  CHECK(fx.default_tap_weights() == std::vector<double>{1.0 / 8, 1.0 / 4, 1.0});
  Tensor x = random_input(16, 16, 18);
  auto taps = fx.extract(x);
  CHECK(taps.size() == 3);
}
