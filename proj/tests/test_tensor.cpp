#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include "terrafuse/tensor.hpp"

#include <cstring>

using namespace terrafuse;
using oracles::fd_check;
using oracles::fill_uniform;
using oracles::weighted_mean;

TEST_CASE("tensor basics") {
  auto t = Tensor<double>::zeros({2, 3});
  REQUIRE(t.size() == 6);
  REQUIRE(t.rank() == 2);
  for (size_t i = 0; i < 6; ++i) REQUIRE(t[i] == 0.0);

  auto f = Tensor<double>::full({2, 2}, 3.5);
  REQUIRE(f[3] == 3.5);

  REQUIRE_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0}), ShapeError);
  REQUIRE_THROWS_AS(f.item(), ShapeError);
  REQUIRE(Tensor<double>::scalar(4.0).item() == 4.0);

  // copies alias storage; clone() detaches
  auto alias = f;
  alias[0] = -1;
  REQUIRE(f[0] == -1);
  auto deep = f.clone();
  deep[0] = 7;
  REQUIRE(f[0] == -1);
}

TEST_CASE("conv2d output shapes") {
  Rng rng(0);
  auto x = Tensor<double>::zeros({1, 11, 64, 64});
  auto w = Tensor<double>::zeros({16, 11, 3, 3});
  auto b = Tensor<double>::zeros({16});
  auto y = conv2d(x, w, b, 1, 1, 1);
  REQUIRE(y.shape == Shape{1, 16, 64, 64});

  auto x2 = Tensor<double>::zeros({1, 8, 64, 64});
  auto w2 = Tensor<double>::zeros({8, 8, 3, 3});
  auto y2 = conv2d(x2, w2, 1, 2, 2);  // atrous same-size case
  REQUIRE(y2.shape == Shape{1, 8, 64, 64});
}

TEST_CASE("conv2d rejects mismatched channel axis with a named error") {
  auto x = Tensor<double>::zeros({1, 4, 8, 8});
  auto w = Tensor<double>::zeros({2, 3, 3, 3});
  try {
    conv2d(x, w, 1, 1, 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    REQUIRE(std::string(e.what()).find("channel") != std::string::npos);
  }
}

TEST_CASE("conv2d hand example: 1x1 identity kernel") {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor<double>::from({1, 1, 1, 1}, {2.0});
  auto y = conv2d(x, w, 1, 0, 1);
  for (size_t i = 0; i < 4; ++i) REQUIRE(y[i] == Catch::Approx(2.0 * x[i]));
}

TEST_CASE("conv2d gradients vs finite differences") {
  Rng rng(42);
  auto x = Tensor<double>::zeros({1, 2, 6, 6});
  auto w = Tensor<double>::zeros({3, 2, 3, 3});
  auto b = Tensor<double>::zeros({3});
  fill_uniform(x, rng);
  fill_uniform(w, rng);
  fill_uniform(b, rng);
  for (auto [stride, pad, dil] : {std::tuple{1, 1, 1}, {2, 1, 1}, {1, 2, 2}}) {
    auto res = fd_check({&x, &w, &b},
                        [&] { return weighted_mean(conv2d(x, w, b, stride, pad, dil)); });
    INFO("stride " << stride << " pad " << pad << " dil " << dil);
    REQUIRE(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("conv_transpose2d shapes and scaling") {
  auto x = Tensor<double>::zeros({1, 32, 16, 16});
  auto w = Tensor<double>::zeros({32, 16, 2, 2});
  auto y = conv_transpose2d(x, w, 2, 0);
  REQUIRE(y.shape == Shape{1, 16, 32, 32});

  auto x2 = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w2 = Tensor<double>::from({1, 1, 1, 1}, {3.0});
  auto y2 = conv_transpose2d(x2, w2, 1, 0);
  REQUIRE(y2.shape == x2.shape);
  for (size_t i = 0; i < 4; ++i) REQUIRE(y2[i] == Catch::Approx(3.0 * x2[i]));
}

TEST_CASE("conv_transpose2d is the exact adjoint of conv2d") {
  // <conv2d(x), y> == <x, conv_transpose2d(y)> with the SAME weight buffer:
  // the conv layout (Cout,Cin,kh,kw) reads as (Cin_t,Cout_t,kh,kw) here.
  // 9x9 inputs keep the stride-2 geometry self-adjoint (no output padding).
  Rng rng(7);
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + int(rng.uniform_int(2));
    auto x = Tensor<double>::zeros({2, 3, 9, 9});
    auto w = Tensor<double>::zeros({4, 3, 3, 3});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    auto cx = conv2d(x, w, stride, 1, 1);
    auto y = Tensor<double>::zeros(cx.shape);
    fill_uniform(y, rng);
    auto aty = conv_transpose2d(y, w, stride, 1);
    REQUIRE(aty.shape == x.shape);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (size_t i = 0; i < x.size(); ++i) rhs += x[i] * aty[i];
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-6));
  }
}

TEST_CASE("conv_transpose2d gradients vs finite differences") {
  Rng rng(11);
  auto x = Tensor<double>::zeros({1, 3, 4, 4});
  auto w = Tensor<double>::zeros({3, 2, 2, 2});
  auto b = Tensor<double>::zeros({2});
  fill_uniform(x, rng);
  fill_uniform(w, rng);
  fill_uniform(b, rng);
  auto res = fd_check({&x, &w, &b}, [&] { return weighted_mean(conv_transpose2d(x, w, b, 2, 0)); });
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("maxpool2d forward and tie handling") {
  std::vector<double> asc(16);
  std::iota(asc.begin(), asc.end(), 0.0);
  auto x = Tensor<double>::from({1, 1, 4, 4}, asc);
  auto y = maxpool2d(x, 2, 2);
  REQUIRE(y.shape == Shape{1, 1, 2, 2});
  REQUIRE(y[0] == 5);
  REQUIRE(y[1] == 7);
  REQUIRE(y[2] == 13);
  REQUIRE(y[3] == 15);

  // constant input: first element of each window receives the gradient
  auto c = Tensor<double>::full({1, 1, 4, 4}, 2.0);
  c.requires_grad = true;
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto p = maxpool2d(c, 2, 2);
    REQUIRE(p[0] == 2.0);
    tape.backward(mean_all(p));
  }
  const double* g = c.grad();
  for (size_t y0 = 0; y0 < 4; ++y0)
    for (size_t x0 = 0; x0 < 4; ++x0) {
      const bool first = (y0 % 2 == 0) && (x0 % 2 == 0);
      REQUIRE(g[y0 * 4 + x0] == Catch::Approx(first ? 0.25 : 0.0));
    }

  REQUIRE_THROWS_AS(maxpool2d(Tensor<double>::zeros({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST_CASE("maxpool2d gradient vs finite differences") {
  Rng rng(5);
  auto x = Tensor<double>::zeros({1, 3, 8, 8});
  fill_uniform(x, rng);  // continuous values: ties have probability zero
  auto res = fd_check({&x}, [&] { return weighted_mean(maxpool2d(x, 2, 2)); });
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("bilinear_upsample basics") {
  auto c = Tensor<double>::full({1, 1, 2, 2}, 3.25);
  auto up = bilinear_upsample(c, 4, 4);
  for (size_t i = 0; i < up.size(); ++i) REQUIRE(up[i] == Catch::Approx(3.25));

  auto x = Tensor<double>::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto same = bilinear_upsample(x, 2, 3);
  for (size_t i = 0; i < x.size(); ++i) REQUIRE(same[i] == Catch::Approx(x[i]));
}

TEST_CASE("bilinear_upsample matches the scalar interpolation oracle") {
  std::vector<double> vals = {0, 1, 2, 3};
  auto x = Tensor<double>::from({1, 1, 2, 2}, vals);
  auto y = bilinear_upsample(x, 4, 4);
  for (size_t oy = 0; oy < 4; ++oy)
    for (size_t ox = 0; ox < 4; ++ox)
      REQUIRE(y[oy * 4 + ox] ==
              Catch::Approx(oracles::bilinear_scalar(vals, 2, 2, 4, 4, oy, ox)).epsilon(0).margin(0));

  // a non-integer ratio, random input
  Rng rng(3);
  auto x2 = Tensor<double>::zeros({1, 2, 5, 7});
  fill_uniform(x2, rng);
  auto y2 = bilinear_upsample(x2, 8, 10);
  for (size_t c = 0; c < 2; ++c) {
    std::vector<double> plane(x2.data() + c * 35, x2.data() + (c + 1) * 35);
    for (size_t oy = 0; oy < 8; ++oy)
      for (size_t ox = 0; ox < 10; ++ox)
        REQUIRE(y2[(c * 8 + oy) * 10 + ox] ==
                Catch::Approx(oracles::bilinear_scalar(plane, 5, 7, 8, 10, oy, ox)).margin(1e-12));
  }
}

TEST_CASE("bilinear_upsample gradient vs finite differences") {
  Rng rng(9);
  auto x = Tensor<double>::zeros({1, 2, 3, 3});
  fill_uniform(x, rng);
  auto res = fd_check({&x}, [&] { return weighted_mean(bilinear_upsample(x, 7, 5)); });
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("batchnorm2d forward conventions") {
  // exactly zero-mean unit-variance channel -> output ~ input
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, -1, 1, -1});
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::full({1}, 0.0);
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
  for (size_t i = 0; i < 4; ++i) REQUIRE(y[i] == Catch::Approx(x[i]).margin(1e-5));
  // running stats blended with momentum 0.9: mean 0, biased var 1
  REQUIRE(rm[0] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(rv[0] == Catch::Approx(0.9 * 1.0 + 0.1 * 1.0).margin(1e-12));

  // eval mode with identity running stats is the affine map gamma*x+beta
  auto g2 = Tensor<double>::full({2}, 1.5);
  auto b2 = Tensor<double>::full({2}, -0.25);
  auto rm2 = Tensor<double>::zeros({2});
  auto rv2 = Tensor<double>::full({2}, 1.0);
  Rng rng(1);
  auto x2 = Tensor<double>::zeros({2, 2, 3, 3});
  fill_uniform(x2, rng);
  auto y2 = batchnorm2d(x2, g2, b2, rm2, rv2, false);
  const double inv = 1.0 / std::sqrt(1.0 + 1e-5);
  for (size_t i = 0; i < x2.size(); ++i)
    REQUIRE(y2[i] == Catch::Approx(1.5 * x2[i] * inv - 0.25).margin(1e-9));

  REQUIRE_THROWS_AS(batchnorm2d(x2, gamma, beta, rm, rv, true), ShapeError);
}

TEST_CASE("batchnorm2d training-mode gradients vs finite differences") {
  Rng rng(21);
  auto x = Tensor<double>::zeros({2, 3, 4, 4});
  auto gamma = Tensor<double>::zeros({3});
  auto beta = Tensor<double>::zeros({3});
  fill_uniform(x, rng);
  fill_uniform(gamma, rng, 0.5, 1.5);
  fill_uniform(beta, rng, -0.5, 0.5);
  auto res = fd_check({&x, &gamma, &beta}, [&] {
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::full({3}, 1.0);
    return weighted_mean(batchnorm2d(x, gamma, beta, rm, rv, true));
  });
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("softmax_channels contracts") {
  auto x = Tensor<double>::zeros({1, 3, 1, 1});
  auto p = softmax_channels(x);
  for (int c = 0; c < 3; ++c) REQUIRE(p[size_t(c)] == Catch::Approx(1.0 / 3));

  auto big = Tensor<double>::from({1, 3, 1, 1}, {100, 0, 0});
  auto pb = softmax_channels(big);
  REQUIRE(std::isfinite(pb[0]));
  REQUIRE(pb[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(pb[1] == Catch::Approx(0.0).margin(1e-12));

  Rng rng(17);
  auto xr = Tensor<double>::zeros({2, 3, 4, 4});
  fill_uniform(xr, rng, -5, 5);
  auto pr = softmax_channels(xr);
  for (size_t n = 0; n < 2; ++n)
    for (size_t i = 0; i < 16; ++i) {
      double s = 0;
      for (size_t c = 0; c < 3; ++c) s += pr[(n * 3 + c) * 16 + i];
      REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }

  REQUIRE_THROWS_AS(softmax_channels(Tensor<double>::zeros({1, 2, 2, 2})), ShapeError);
}

TEST_CASE("softmax_channels gradient vs finite differences") {
  Rng rng(23);
  auto x = Tensor<double>::zeros({1, 3, 3, 3});
  fill_uniform(x, rng, -2, 2);
  auto res = fd_check({&x}, [&] { return weighted_mean(softmax_channels(x)); });
  REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("elementwise ops and reductions: gradients") {
  Rng rng(31);
  auto a = Tensor<double>::zeros({2, 2, 3, 3});
  auto b = Tensor<double>::zeros({2, 2, 3, 3});
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  REQUIRE(fd_check({&a, &b}, [&] { return weighted_mean(add(a, b)); }).max_rel_err < 1e-4);
  REQUIRE(fd_check({&a, &b}, [&] { return weighted_mean(mul(a, b)); }).max_rel_err < 1e-4);
  REQUIRE(fd_check({&a}, [&] { return weighted_mean(scale(a, 2.5)); }).max_rel_err < 1e-4);
  REQUIRE(fd_check({&a}, [&] { return weighted_mean(relu(a)); }).max_rel_err < 1e-4);
  REQUIRE(fd_check({&a}, [&] { return weighted_mean(global_avg_pool(a)); }).max_rel_err < 1e-4);
  REQUIRE(fd_check({&a, &b}, [&] { return weighted_mean(concat_channels(a, b)); }).max_rel_err <
          1e-4);
  REQUIRE(fd_check({&a}, [&] { return mean_all(a); }).max_rel_err < 1e-4);
}

TEST_CASE("relu forward and concat layout") {
  auto x = Tensor<double>::from({1, 1, 1, 4}, {-2, -0.5, 0, 3});
  auto y = relu(x);
  REQUIRE(y[0] == 0);
  REQUIRE(y[1] == 0);
  REQUIRE(y[2] == 0);
  REQUIRE(y[3] == 3);

  auto a = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({1, 2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
  auto c = concat_channels(a, b);
  REQUIRE(c.shape == Shape{1, 3, 2, 2});
  REQUIRE(c[0] == 1);
  REQUIRE(c[4] == 5);
  REQUIRE(c[8] == 9);

  auto gap = global_avg_pool(b);
  REQUIRE(gap.shape == Shape{1, 2, 1, 1});
  REQUIRE(gap[0] == Catch::Approx((5 + 6 + 7 + 8) / 4.0));
  REQUIRE(gap[1] == Catch::Approx((9 + 10 + 11 + 12) / 4.0));
}

TEST_CASE("adamw hand-simulated steps") {
  // zero gradient, zero weight decay: parameters unchanged
  {
    auto p = Tensor<float>::from({2}, {1.0f, -2.0f});
    p.requires_grad = true;
    p.ensure_grad();
    NamedParams<float> params{{"p", &p}};
    AdamWState<float> st;
    st.weight_decay = 0.0f;
    adamw_step(params, st);
    REQUIRE(p[0] == 1.0f);
    REQUIRE(p[1] == -2.0f);
  }
  // grad=1, param=0, defaults: first step moves by ~ -lr
  {
    auto p = Tensor<float>::from({1}, {0.0f});
    p.requires_grad = true;
    p.ensure_grad();
    p.grad()[0] = 1.0f;
    NamedParams<float> params{{"p", &p}};
    AdamWState<float> st;
    st.weight_decay = 0.0f;
    adamw_step(params, st);
    REQUIRE(p[0] == Catch::Approx(-0.001).margin(1e-7));
  }
  // weight_decay=0.1, zero grad, param=1: param = 1 - lr*0.1
  {
    auto p = Tensor<float>::from({1}, {1.0f});
    p.requires_grad = true;
    p.ensure_grad();
    NamedParams<float> params{{"p", &p}};
    AdamWState<float> st;
    st.weight_decay = 0.1f;
    adamw_step(params, st);
    REQUIRE(p[0] == Catch::Approx(1.0 - 0.001 * 0.1).margin(1e-9));
  }
  // NaN gradient aborts naming the parameter
  {
    auto p = Tensor<float>::from({1}, {0.0f});
    p.requires_grad = true;
    p.ensure_grad();
    p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    NamedParams<float> params{{"badparam", &p}};
    AdamWState<float> st;
    try {
      adamw_step(params, st);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      REQUIRE(std::string(e.what()).find("badparam") != std::string::npos);
    }
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(77);
  auto x = Tensor<double>::zeros({1, 2, 4, 4});
  fill_uniform(x, rng);
  x.requires_grad = true;

  auto run = [&](int which) {
    x.zero_grad();
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    auto y = relu(conv_transpose2d(x, Tensor<double>::full({2, 2, 2, 2}, 0.3), 2, 0));
    auto l1 = mean_all(y);
    auto l2 = weighted_mean(y, 5);
    Tensor<double> loss = which == 0 ? l1 : (which == 1 ? l2 : add(l1, l2));
    tape.backward(loss);
    return std::vector<double>(x.grad(), x.grad() + x.size());
  };
  auto g1 = run(0), g2 = run(1), gs = run(2);
  for (size_t i = 0; i < g1.size(); ++i)
    REQUIRE(gs[i] == Catch::Approx(g1[i] + g2[i]).margin(1e-6));
}

TEST_CASE("forward and backward are bit-deterministic") {
  auto run_once = [](uint64_t seed) {
    Rng rng(seed);
    auto x = Tensor<float>::zeros({1, 3, 8, 8});
    auto w = Tensor<float>::zeros({4, 3, 3, 3});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    x.requires_grad = true;
    w.requires_grad = true;
    GradTape<float> tape;
    std::vector<float> out;
    {
      TapeScope<float> scope(tape);
      auto y = relu(conv2d(x, w, 1, 1, 1));
      auto loss = mean_all(y);
      tape.backward(loss);
      out.assign(y.data(), y.data() + y.size());
    }
    out.insert(out.end(), x.grad(), x.grad() + x.size());
    out.insert(out.end(), w.grad(), w.grad() + w.size());
    return out;
  };
  auto a = run_once(123), b = run_once(123);
  REQUIRE(a.size() == b.size());
  REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
