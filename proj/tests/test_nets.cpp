#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include "terrafuse/nets.hpp"

using namespace terrafuse;
using oracles::fill_uniform;

namespace {

template <typename T>
Tensor<T> random_input(size_t n, size_t h, size_t w, uint64_t seed) {
  Tensor<T> x = Tensor<T>::zeros({n, kNumChannels, h, w});
  Rng rng(seed);
  fill_uniform(x, rng);
  return x;
}

}  // namespace

TEST_CASE("unet shape contract and determinism") {
  EncoderConfig cfg;
  auto m1 = build_unet<float>(cfg, 0);
  auto x = random_input<float>(1, 64, 64, 1);
  auto y = m1.forward(x, false);
  REQUIRE(y.shape == Shape{1, 3, 64, 64});

  auto m2 = build_unet<float>(cfg, 0);
  NamedParams<float> p1, b1, p2, b2;
  m1.collect(p1, b1);
  m2.collect(p2, b2);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    REQUIRE(p1[i].first == p2[i].first);
    REQUIRE(std::memcmp(p1[i].second->data(), p2[i].second->data(),
                        p1[i].second->size() * sizeof(float)) == 0);
  }
  // a different seed gives different parameters
  auto m3 = build_unet<float>(cfg, 1);
  NamedParams<float> p3, b3;
  m3.collect(p3, b3);
  REQUIRE(std::memcmp(p1[0].second->data(), p3[0].second->data(),
                      p1[0].second->size() * sizeof(float)) != 0);
}

TEST_CASE("parameter counts are frozen") {
  EncoderConfig cfg;
  auto u = build_model<float>("unet", cfg, 0);
  auto d = build_model<float>("deeplab", cfg, 0);
  REQUIRE(parameter_count(u) == 440771);
  REQUIRE(parameter_count(d) == 381395);
}

TEST_CASE("deeplab shape contracts") {
  EncoderConfig cfg;
  auto m = build_deeplab_lite<float>(cfg, 0);
  auto y64 = m.forward(random_input<float>(1, 64, 64, 2), false);
  REQUIRE(y64.shape == Shape{1, 3, 64, 64});
  auto y96 = m.forward(random_input<float>(1, 96, 96, 3), false);
  REQUIRE(y96.shape == Shape{1, 3, 96, 96});
}

TEST_CASE("atrous rate changes alter values but not shapes") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  auto normal = build_deeplab_lite<float>(cfg, 0, {2, 4, 6});
  auto flat = build_deeplab_lite<float>(cfg, 0, {1, 1, 1});
  auto x = random_input<float>(1, 32, 32, 4);
  auto yn = normal.forward(x, false);
  auto yf = flat.forward(x, false);
  REQUIRE(yn.shape == yf.shape);
  bool differs = false;
  for (size_t i = 0; i < yn.size() && !differs; ++i) differs = yn[i] != yf[i];
  REQUIRE(differs);
}

TEST_CASE("forward rejects indivisible sizes naming the multiple") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  auto u = build_unet<float>(cfg, 0);
  try {
    u.forward(random_input<float>(1, 40, 40, 5), false);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("16") != std::string::npos);
  }
  auto d = build_deeplab_lite<float>(cfg, 0);
  try {
    d.forward(random_input<float>(1, 20, 20, 6), false);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("8") != std::string::npos);
  }
}

TEST_CASE("fresh models give finite logits on zero and random inputs") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  for (const char* kind : {"unet", "deeplab"}) {
    auto m = build_model<float>(kind, cfg, 7);
    for (bool training : {false, true}) {
      auto zero = Tensor<float>::zeros({2, kNumChannels, 16, 16});
      auto y = m.forward(zero, training);
      for (size_t i = 0; i < y.size(); ++i) REQUIRE(std::isfinite(y[i]));
      auto r = m.forward(random_input<float>(2, 16, 16, 8), training);
      for (size_t i = 0; i < r.size(); ++i) REQUIRE(std::isfinite(r[i]));
    }
  }
}

TEST_CASE("eval forward treats batch entries independently") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  auto m = build_model<float>("unet", cfg, 9);
  auto one = random_input<float>(1, 16, 16, 10);
  auto two = Tensor<float>::zeros({2, kNumChannels, 16, 16});
  std::copy(one.data(), one.data() + one.size(), two.data());
  std::copy(one.data(), one.data() + one.size(), two.data() + one.size());
  auto y = m.forward(two, false);
  const size_t half = y.size() / 2;
  REQUIRE(std::memcmp(y.data(), y.data() + half, half * sizeof(float)) == 0);
}

TEST_CASE("output stays well formed under input flips") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  auto m = build_model<float>("deeplab", cfg, 12);
  auto x = random_input<float>(1, 16, 16, 13);
  auto flipped = x.clone();
  for (size_t c = 0; c < kNumChannels; ++c)
    for (size_t y = 0; y < 16; ++y)
      for (size_t xx = 0; xx < 16; ++xx)
        flipped.at(0, c, y, xx) = x.at(0, c, y, 15 - xx);
  auto ya = m.forward(x, false);
  auto yb = m.forward(flipped, false);
  REQUIRE(ya.shape == yb.shape);
  for (size_t i = 0; i < yb.size(); ++i) REQUIRE(std::isfinite(yb[i]));
}

TEST_CASE("end-to-end input gradients match finite differences") {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  for (const char* kind : {"unet", "deeplab"}) {
    auto m = build_model<double>(kind, cfg, 21);
    auto x = random_input<double>(1, 16, 16, 22);
    auto res = oracles::fd_check(
        {&x}, [&] { return mean_all(m.forward(x, false)); }, 1e-6, 8);
    INFO(kind);
    REQUIRE(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("config validation") {
  EncoderConfig bad;
  bad.stage_widths = {16, 32};
  REQUIRE_THROWS_AS(build_unet<float>(bad, 0), Error);
  EncoderConfig cfg;
  REQUIRE_THROWS_AS(build_deeplab_lite<float>(cfg, 0, {}), Error);
  REQUIRE_THROWS_AS(build_deeplab_lite<float>(cfg, 0, {0}), Error);
  REQUIRE_THROWS_AS(build_model<float>("resnet", cfg, 0), Error);
}
