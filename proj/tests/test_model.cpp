#include <catch2/catch_amalgamated.hpp>

#include "uir/model.hpp"
#include "uir/rng.hpp"

using namespace uir;

namespace {

Image random_image(int h, int w, uint64_t seed) {
  Image im(h, w);
  Rng rng(seed);
  for (double& v : im.data) v = rng.uniform();
  return im;
}

ModelConfig tiny_config(int c = 8) {
  ModelConfig cfg;
  cfg.base_channels = c;
  cfg.patch_h = 16;
  cfg.patch_w = 16;
  return cfg;
}

double forward_sum_restored(const ModelWeights& w, const ModelConfig& cfg, const Image& x,
                            const IlluminationMap& xl) {
  ModelOutput out = forward(w, x, xl, cfg);
  double s = 0.0;
  for (double v : out.restored.data) s += v;
  return s;
}

}  // namespace

TEST_CASE("build_model is deterministic in (config, seed)") {
  ModelConfig cfg = tiny_config();
  ModelWeights a = build_model(cfg, 42);
  ModelWeights b = build_model(cfg, 42);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, t] : a.params) {
    REQUIRE(b.params.count(name) == 1);
    REQUIRE(t.data == b.params.at(name).data);
  }
  ModelWeights c = build_model(cfg, 43);
  bool any_diff = false;
  for (const auto& [name, t] : a.params)
    if (t.data != c.params.at(name).data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("doubling base channels strictly increases the parameter count") {
  int64_t n8 = count_parameters(build_model(tiny_config(8), 0));
  int64_t n16 = count_parameters(build_model(tiny_config(16), 0));
  CHECK(n16 > n8);
}

TEST_CASE("paper-scale configuration approaches the published parameter budget") {
  ModelConfig cfg = ModelConfig::paper_scale();
  int64_t n = count_parameters(build_model(cfg, 0));
  INFO("paper-scale parameter count: " << n);
  // calibration target, not an equality: published budget is 1.675M
  CHECK(n > 1'200'000);
  CHECK(n < 2'200'000);
}

TEST_CASE("count_parameters basics") {
  ModelWeights empty;
  CHECK(count_parameters(empty) == 0);
  ModelWeights one;
  one.params.emplace("k.w", Tensor({8, 4, 3, 3}));
  one.params.emplace("k.b", Tensor({8}));
  CHECK(count_parameters(one) == 296);
  // equal configs imply equal counts
  CHECK(count_parameters(build_model(tiny_config(), 1)) ==
        count_parameters(build_model(tiny_config(), 2)));
}

TEST_CASE("config validation rejects bad settings") {
  ModelConfig cfg = tiny_config();
  cfg.base_channels = 6;  // not a multiple of 4 dilation branches
  CHECK_THROWS_AS(build_model(cfg, 0), Error);
  cfg = tiny_config();
  cfg.patch_h = 18;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.mdb_dilations = {};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.mdb_dilations = {1, 0, 2, 3};
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("forward preserves shapes and is deterministic") {
  for (auto [h, w] : {std::pair{16, 16}, std::pair{16, 24}, std::pair{32, 16}}) {
    ModelConfig cfg = tiny_config(4);
    ModelWeights weights = build_model(cfg, 5);
    Image x = random_image(h, w, 6);
    IlluminationMap xl = estimate_illumination(x);
    ModelOutput a = forward(weights, x, xl, cfg);
    REQUIRE(a.restored.dims == std::vector<int>{3, h, w});
    REQUIRE(a.gradient.dims == std::vector<int>{1, h, w});
    ModelOutput b = forward(weights, x, xl, cfg);
    CHECK(a.restored.data == b.restored.data);
    CHECK(a.gradient.data == b.gradient.data);
  }
}

TEST_CASE("indivisible spatial size is rejected") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 5);
  Image x = random_image(18, 18, 6);
  IlluminationMap xl = estimate_illumination(x);
  CHECK_THROWS_AS(forward(weights, x, xl, cfg), Error);
}

TEST_CASE("zero final convolution zeroes the outputs") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 7);
  std::fill(weights.params.at("out.w").data.begin(), weights.params.at("out.w").data.end(), 0.0);
  std::fill(weights.params.at("out.b").data.begin(), weights.params.at("out.b").data.end(), 0.0);
  Image x = random_image(16, 16, 8);
  ModelOutput out = forward(weights, x, estimate_illumination(x), cfg);
  for (double v : out.restored.data) CHECK(v == 0.0);
  for (double v : out.gradient.data) CHECK(v == 0.0);
}

TEST_CASE("gradient branch is severable") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 9);
  Image x = random_image(16, 16, 10);
  IlluminationMap xl = estimate_illumination(x);
  ModelOutput base = forward(weights, x, xl, cfg);
  for (auto& [name, t] : weights.params)
    if (name.rfind("gb.", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0);
  ModelOutput cut = forward(weights, x, xl, cfg);  // still runs
  CHECK(cut.gradient.data != base.gradient.data);
}

TEST_CASE("illumination input influences the restored output") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 11);
  Image x = random_image(16, 16, 12);
  IlluminationMap xl = estimate_illumination(x);
  ModelOutput base = forward(weights, x, xl, cfg);
  IlluminationMap xl2 = xl;
  for (double& v : xl2.data) v = std::min(1.0, v + 0.25);
  ModelOutput moved = forward(weights, x, xl2, cfg);
  double delta = 0.0;
  for (size_t i = 0; i < base.restored.data.size(); ++i)
    delta += std::fabs(base.restored.data[i] - moved.restored.data[i]);
  CHECK(delta > 0.0);
}

TEST_CASE("nlsa and deformable variants run and add parameters") {
  ModelConfig plain = tiny_config(4);
  ModelConfig fancy = plain;
  fancy.use_nlsa = true;
  fancy.use_deformable = true;
  int64_t n_plain = count_parameters(build_model(plain, 0));
  int64_t n_fancy = count_parameters(build_model(fancy, 0));
  CHECK(n_fancy > n_plain);
  ModelWeights weights = build_model(fancy, 13);
  Image x = random_image(16, 16, 14);
  ModelOutput out = forward(weights, x, estimate_illumination(x), fancy);
  CHECK(out.restored.all_finite());
}

TEST_CASE("autodiff gradient of sum(restored) matches finite differences") {
  ModelConfig cfg = tiny_config(8);
  ModelWeights weights = build_model(cfg, 15);
  Image x = random_image(16, 16, 16);
  IlluminationMap xl = estimate_illumination(x);
  Tensor gin = gradient_map(x).to_tensor();

  ad::Tape tape;
  ModelGraph graph(tape, cfg, weights, true);
  auto [restored, gmap] = graph.forward(tape.constant(x.to_tensor()),
                                        tape.constant(xl.to_tensor()), tape.constant(gin));
  ad::Var s = ad::scale(tape, ad::mean_all(tape, restored), 3.0 * 16 * 16);  // sum
  tape.backward(s);

  Rng pick(17);
  std::vector<std::string> names;
  for (const auto& [n, v] : weights.params) names.push_back(n);
  int checked = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const std::string& name = names[pick.uniform_int(static_cast<int>(names.size()))];
    Tensor& t = weights.params.at(name);
    size_t idx = static_cast<size_t>(pick.uniform_int(static_cast<int>(t.numel())));
    double ad_grad = tape.gradient(graph.param_vars().at(name)).data[idx];

    double h = 1e-4;
    double keep = t.data[idx];
    t.data[idx] = keep + h;
    double fp = forward_sum_restored(weights, cfg, x, xl);
    t.data[idx] = keep - h;
    double fm = forward_sum_restored(weights, cfg, x, xl);
    t.data[idx] = keep;
    double fd = (fp - fm) / (2.0 * h);

    double denom = std::max({std::fabs(fd), std::fabs(ad_grad), 1e-6});
    INFO(name << "[" << idx << "] fd=" << fd << " ad=" << ad_grad);
    CHECK(std::fabs(fd - ad_grad) / denom < 1e-3);
    ++checked;
  }
  CHECK(checked == 12);
}

TEST_CASE("every named parameter receives a finite gradient") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 18);
  Image x = random_image(16, 16, 19);
  IlluminationMap xl = estimate_illumination(x);

  ad::Tape tape;
  ModelGraph graph(tape, cfg, weights, true);
  auto [restored, gmap] = graph.forward(tape.constant(x.to_tensor()),
                                        tape.constant(xl.to_tensor()),
                                        tape.constant(gradient_map(x).to_tensor()));
  // scalar objective touching both heads
  ad::Var s = ad::add(tape, ad::mean_abs_diff(tape, restored, Tensor({3, 16, 16}, 0.5)),
                      ad::mean_abs_diff(tape, gmap, Tensor({1, 16, 16}, 0.1)));
  tape.backward(s);
  for (const auto& [name, var] : graph.param_vars()) {
    Tensor g = tape.gradient(var);
    bool finite = g.all_finite();
    INFO("parameter " << name);
    CHECK(finite);
  }
}

TEST_CASE("frozen teacher graph leaves no parameter gradients") {
  ModelConfig cfg = tiny_config(4);
  ModelWeights weights = build_model(cfg, 20);
  Image x = random_image(16, 16, 21);
  ad::Tape tape;
  ModelGraph graph(tape, cfg, weights, false);
  auto [restored, gmap] = graph.forward(tape.constant(x.to_tensor()),
                                        tape.constant(estimate_illumination(x).to_tensor()),
                                        tape.constant(gradient_map(x).to_tensor()));
  CHECK_FALSE(tape.needs_grad(restored));
}
