#include <catch2/catch_amalgamated.hpp>

#include "uir/augment.hpp"
#include "uir/rng.hpp"

using namespace uir;

namespace {

Image random_image(int h, int w, uint64_t seed) {
  Image im(h, w);
  Rng rng(seed);
  for (double& v : im.data) v = rng.uniform();
  return im;
}

}  // namespace

TEST_CASE("weak policy at input size is the identity") {
  Image x = random_image(24, 24, 1);
  auto p = AugmentationPolicy::weak_policy(24, 24, 99);
  Image out = augment(x, p);
  CHECK(out.data == x.data);
}

TEST_CASE("weak policy output equals plain resize") {
  Image x = random_image(32, 48, 2);
  auto p = AugmentationPolicy::weak_policy(16, 16, 3);
  Image out = augment(x, p);
  Image expect = resize_bilinear(x, 16, 16);
  CHECK(out.data == expect.data);
}

TEST_CASE("strong with gray_scale forced on yields equal channels") {
  Image x = random_image(20, 20, 4);
  auto p = AugmentationPolicy::strong_policy(20, 20, 5);
  p.enabled_ops = {AugOp::resize, AugOp::gray_scale};
  p.gray_prob = 1.0;
  Image out = augment(x, p);
  for (int y = 0; y < 20; ++y)
    for (int xx = 0; xx < 20; ++xx) {
      CHECK(out.at(0, y, xx) == out.at(1, y, xx));
      CHECK(out.at(1, y, xx) == out.at(2, y, xx));
    }
}

TEST_CASE("augment determinism over 100 seeds") {
  Image x = random_image(24, 24, 6);
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto p = AugmentationPolicy::strong_policy(16, 16, seed);
    Image a = augment(x, p);
    Image b = augment(x, p);
    REQUIRE(a.data == b.data);
  }
}

TEST_CASE("strong output stays in [0,1]") {
  Image x = random_image(24, 24, 7);
  for (uint64_t seed = 0; seed < 32; ++seed) {
    auto p = AugmentationPolicy::strong_policy(24, 24, seed);
    Image out = augment(x, p);
    for (double v : out.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("policy invariants are enforced") {
  auto weak = AugmentationPolicy::weak_policy(16, 16, 0);
  weak.enabled_ops.insert(AugOp::color_jitter);
  CHECK_THROWS_AS(weak.validate(), Error);

  auto strong = AugmentationPolicy::strong_policy(16, 16, 0);
  strong.enabled_ops.insert(AugOp::crop);
  CHECK_THROWS_AS(strong.validate(), Error);

  auto labeled = AugmentationPolicy::labeled_policy(16, 16, 0);
  labeled.enabled_ops.insert(AugOp::gaussian_blur);
  try {
    Image x = random_image(24, 24, 9);
    augment_pair(x, x, labeled);
    FAIL("expected InvalidPolicy");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidPolicy);
  }
}

TEST_CASE("augment_pair keeps identical inputs identical") {
  Image x = random_image(40, 40, 10);
  for (uint64_t seed = 0; seed < 16; ++seed) {
    auto p = AugmentationPolicy::labeled_policy(24, 24, seed);
    auto [ax, ay] = augment_pair(x, x, p);
    REQUIRE(ax.data == ay.data);
  }
}

TEST_CASE("augment_pair dimension mismatch raises") {
  Image x = random_image(24, 24, 11);
  Image y = random_image(24, 25, 12);
  auto p = AugmentationPolicy::labeled_policy(16, 16, 0);
  try {
    augment_pair(x, y, p);
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DimensionMismatch);
  }
}

TEST_CASE("identity geometry: rotation 0 and full-frame crop reduce to resize") {
  Image x = random_image(24, 24, 13);
  Image y = random_image(24, 24, 14);
  // find a seed whose draws give k=0 and the full-frame crop (target == source)
  for (uint64_t seed = 0; seed < 64; ++seed) {
    auto p = AugmentationPolicy::labeled_policy(24, 24, seed);
    std::vector<std::string> trace;
    auto [ax, ay] = augment_pair(x, y, p, &trace);
    bool identity = true;
    for (const auto& line : trace)
      if (line.find("rotate k=0") == std::string::npos && line.rfind("crop", 0) == 0 &&
          line.find("y=0 x=0") == std::string::npos)
        identity = false;
    if (trace.size() == 2 && trace[0] == "crop y=0 x=0 h=24 w=24" && trace[1] == "rotate k=0") {
      CHECK(ax.data == x.data);
      CHECK(ay.data == y.data);
      return;
    }
    (void)identity;
  }
  SUCCEED("no identity draw found in 64 seeds; geometry covered by replay test");
}

TEST_CASE("traced transform replayed independently reproduces the pair output") {
  Image x = random_image(48, 48, 15);
  Image y = random_image(48, 48, 16);
  for (uint64_t seed = 0; seed < 24; ++seed) {
    auto p = AugmentationPolicy::labeled_policy(32, 32, seed);
    std::vector<std::string> trace;
    auto [ax, ay] = augment_pair(x, y, p, &trace);
    Image replay = replay_geometric_trace(y, trace);
    REQUIRE(replay.height == ay.height);
    REQUIRE(replay.width == ay.width);
    for (size_t i = 0; i < replay.data.size(); ++i)
      REQUIRE_THAT(replay.data[i], Catch::Matchers::WithinAbs(ay.data[i], 1e-6));
  }
}

TEST_CASE("crop window recorded in trace equals the window applied") {
  Image x(40, 40);
  for (int y = 0; y < 40; ++y)
    for (int xx = 0; xx < 40; ++xx)
      for (int c = 0; c < 3; ++c) x.at(c, y, xx) = (y * 40 + xx) / 1600.0;
  auto p = AugmentationPolicy::labeled_policy(16, 16, 77);
  p.enabled_ops = {AugOp::crop};  // no rotation, pure crop
  std::vector<std::string> trace;
  Image out = augment(x, p, &trace);
  REQUIRE(trace.size() == 1);
  int y0, x0, h, w;
  REQUIRE(std::sscanf(trace[0].c_str(), "crop y=%d x=%d h=%d w=%d", &y0, &x0, &h, &w) == 4);
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) CHECK(out.at(0, y, xx) == x.at(0, y0 + y, x0 + xx));
}

TEST_CASE("rotation requires a square target") {
  auto p = AugmentationPolicy::labeled_policy(16, 24, 0);
  CHECK_THROWS_AS(p.validate(), Error);
}
