#pragma once

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "terrafuse/common.hpp"
#include "terrafuse/data.hpp"
#include "terrafuse/tensor.hpp"

namespace terrafuse {

struct EncoderConfig {
  size_t in_channels = kNumChannels;
  std::vector<size_t> stage_widths = {16, 32, 64, 128};
  int blocks_per_stage = 1;

  void validate() const {
    if (stage_widths.size() != 4)
      throw Error("encoder wants exactly 4 stage widths, got " +
                  std::to_string(stage_widths.size()));
    if (blocks_per_stage < 1) throw Error("blocks_per_stage must be >= 1");
    for (size_t w : stage_widths)
      if (w == 0) throw Error("stage widths must be positive");
  }
};

namespace detail {

template <typename T>
Tensor<T> he_uniform(Shape shape, size_t fan_in, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (size_t i = 0; i < t.size(); ++i) t[i] = T(rng.uniform(-bound, bound));
  t.requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> param_const(Shape shape, T value) {
  Tensor<T> t = Tensor<T>::full(std::move(shape), value);
  t.requires_grad = true;
  return t;
}

}  // namespace detail

/// conv (no bias) -> batchnorm -> relu
template <typename T>
struct ConvBnRelu {
  Tensor<T> w, gamma, beta, rmean, rvar;
  int stride = 1, pad = 1, dil = 1;

  void init(size_t cin, size_t cout, int k, int pad_, int dil_, Rng& rng) {
    pad = pad_;
    dil = dil_;
    w = detail::he_uniform<T>({cout, cin, size_t(k), size_t(k)}, cin * size_t(k) * size_t(k), rng);
    gamma = detail::param_const<T>({cout}, T(1));
    beta = detail::param_const<T>({cout}, T(0));
    rmean = Tensor<T>::zeros({cout});
    rvar = Tensor<T>::full({cout}, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> y = conv2d(x, w, stride, pad, dil);
    y = batchnorm2d(y, gamma, beta, rmean, rvar, training);
    return relu(y);
  }

  void collect(const std::string& prefix, NamedParams<T>& params, NamedParams<T>& buffers) {
    params.push_back({prefix + ".conv.w", &w});
    params.push_back({prefix + ".bn.gamma", &gamma});
    params.push_back({prefix + ".bn.beta", &beta});
    buffers.push_back({prefix + ".bn.rmean", &rmean});
    buffers.push_back({prefix + ".bn.rvar", &rvar});
  }
};

namespace detail {

// Shared 4-stage encoder. Stages run at full, /2, /4 and either /8 or /16
// resolution depending on how the caller pools between them.
template <typename T>
std::vector<std::vector<ConvBnRelu<T>>> make_stages(const EncoderConfig& cfg, int last_dil,
                                                    Rng& rng) {
  std::vector<std::vector<ConvBnRelu<T>>> enc(4);
  size_t cin = cfg.in_channels;
  for (size_t s = 0; s < 4; ++s) {
    const int dil = (s == 3) ? last_dil : 1;
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      ConvBnRelu<T> blk;
      blk.init(b == 0 ? cin : cfg.stage_widths[s], cfg.stage_widths[s], 3, dil, dil, rng);
      enc[s].push_back(std::move(blk));
    }
    cin = cfg.stage_widths[s];
  }
  return enc;
}

template <typename T>
Tensor<T> run_stage(std::vector<ConvBnRelu<T>>& stage, Tensor<T> x, bool training) {
  for (auto& blk : stage) x = blk.forward(x, training);
  return x;
}

inline void check_multiple(size_t h, size_t w, size_t mult, const char* kind) {
  if (h % mult != 0 || w % mult != 0)
    throw ShapeError(std::string(kind) + " needs H and W divisible by " + std::to_string(mult) +
                     ", got " + std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace detail

// -------------------------------------------------------------------- U-Net

template <typename T>
struct UNetModel {
  EncoderConfig cfg;
  std::vector<std::vector<ConvBnRelu<T>>> enc;  // 4 stages, pooled after each
  ConvBnRelu<T> bott;
  struct Up {
    Tensor<T> w, b;  // 2x2 stride-2 transposed conv
  };
  std::vector<Up> ups;                          // deepest first
  std::vector<std::vector<ConvBnRelu<T>>> dec;  // deepest first
  Tensor<T> head_w, head_b;

  static constexpr size_t spatial_multiple = 16;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels)
      throw ShapeError("unet forward wants (N," + std::to_string(cfg.in_channels) + ",H,W)");
    detail::check_multiple(x.dim(2), x.dim(3), spatial_multiple, "unet");
    std::vector<Tensor<T>> skips;
    Tensor<T> cur = x;
    for (size_t s = 0; s < 4; ++s) {
      cur = detail::run_stage(enc[s], cur, training);
      skips.push_back(cur);
      cur = maxpool2d(cur, 2, 2);
    }
    cur = bott.forward(cur, training);
    for (size_t i = 0; i < 4; ++i) {
      Tensor<T> up = conv_transpose2d(cur, ups[i].w, ups[i].b, 2, 0);
      cur = detail::run_stage(dec[i], concat_channels(up, skips[3 - i]), training);
    }
    return conv2d(cur, head_w, head_b, 1, 0);
  }

  void collect(NamedParams<T>& params, NamedParams<T>& buffers) {
    for (size_t s = 0; s < 4; ++s)
      for (size_t b = 0; b < enc[s].size(); ++b)
        enc[s][b].collect("enc" + std::to_string(s + 1) + ".b" + std::to_string(b), params, buffers);
    bott.collect("bott.b0", params, buffers);
    for (size_t i = 0; i < 4; ++i) {
      const std::string p = "up" + std::to_string(4 - i);
      params.push_back({p + ".w", &ups[i].w});
      params.push_back({p + ".b", &ups[i].b});
      for (size_t b = 0; b < dec[i].size(); ++b)
        dec[i][b].collect("dec" + std::to_string(4 - i) + ".b" + std::to_string(b), params, buffers);
    }
    params.push_back({"head.w", &head_w});
    params.push_back({"head.b", &head_b});
  }
};

template <typename T>
UNetModel<T> build_unet(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  UNetModel<T> m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, 0x754e6574));  // model-kind tag keeps streams apart
  m.enc = detail::make_stages<T>(cfg, 1, rng);
  const auto& w = cfg.stage_widths;
  m.bott.init(w[3], w[3], 3, 1, 1, rng);
  // decoder channel plan: deepest out w[2], then w[1], w[0], w[0]
  const size_t dec_out[4] = {w[2], w[1], w[0], w[0]};
  size_t below = w[3];  // channels entering each up stage from below
  for (size_t i = 0; i < 4; ++i) {
    typename UNetModel<T>::Up up;
    up.w = detail::he_uniform<T>({below, dec_out[i], 2, 2}, below * 4, rng);
    up.b = detail::param_const<T>({dec_out[i]}, T(0));
    m.ups.push_back(std::move(up));
    std::vector<ConvBnRelu<T>> stage;
    size_t cin = dec_out[i] + w[3 - i];  // upsampled + skip
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      ConvBnRelu<T> blk;
      blk.init(b == 0 ? cin : dec_out[i], dec_out[i], 3, 1, 1, rng);
      stage.push_back(std::move(blk));
    }
    m.dec.push_back(std::move(stage));
    below = dec_out[i];
  }
  m.head_w = detail::he_uniform<T>({size_t(kNumClasses), w[0], 1, 1}, w[0], rng);
  m.head_b = detail::param_const<T>({size_t(kNumClasses)}, T(0));
  return m;
}

// ------------------------------------------------------------- DeepLab-lite

template <typename T>
struct DeepLabLiteModel {
  EncoderConfig cfg;
  std::vector<int> rates = {2, 4, 6};
  std::vector<std::vector<ConvBnRelu<T>>> enc;  // pooled after stages 1-3; stage 4 dilated
  ConvBnRelu<T> aspp_1x1;
  std::vector<ConvBnRelu<T>> aspp_atrous;  // one per rate
  ConvBnRelu<T> aspp_img;                  // 1x1 after global average pooling
  ConvBnRelu<T> aspp_proj;                 // 1x1 over concatenated branches
  ConvBnRelu<T> low_reduce;                // 1x1 on the stage-2 skip
  ConvBnRelu<T> dec_conv;                  // 3x3 after skip fusion
  Tensor<T> head_w, head_b;

  static constexpr size_t spatial_multiple = 8;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels)
      throw ShapeError("deeplab forward wants (N," + std::to_string(cfg.in_channels) + ",H,W)");
    detail::check_multiple(x.dim(2), x.dim(3), spatial_multiple, "deeplab");
    const size_t H = x.dim(2), W = x.dim(3);

    Tensor<T> cur = detail::run_stage(enc[0], x, training);
    cur = maxpool2d(cur, 2, 2);
    cur = detail::run_stage(enc[1], cur, training);
    Tensor<T> low = cur;  // /2 resolution skip
    cur = maxpool2d(cur, 2, 2);
    cur = detail::run_stage(enc[2], cur, training);
    cur = maxpool2d(cur, 2, 2);
    cur = detail::run_stage(enc[3], cur, training);  // /8, dilated

    std::vector<Tensor<T>> branches;
    branches.push_back(aspp_1x1.forward(cur, training));
    for (auto& a : aspp_atrous) branches.push_back(a.forward(cur, training));
    Tensor<T> img = aspp_img.forward(global_avg_pool(cur), training);
    branches.push_back(bilinear_upsample(img, cur.dim(2), cur.dim(3)));
    Tensor<T> merged = aspp_proj.forward(concat_channels(branches), training);

    Tensor<T> up = bilinear_upsample(merged, H / 2, W / 2);
    Tensor<T> fusedsk = concat_channels(up, low_reduce.forward(low, training));
    Tensor<T> d = dec_conv.forward(fusedsk, training);
    Tensor<T> logits = conv2d(d, head_w, head_b, 1, 0);
    return bilinear_upsample(logits, H, W);
  }

  void collect(NamedParams<T>& params, NamedParams<T>& buffers) {
    for (size_t s = 0; s < 4; ++s)
      for (size_t b = 0; b < enc[s].size(); ++b)
        enc[s][b].collect("enc" + std::to_string(s + 1) + ".b" + std::to_string(b), params, buffers);
    aspp_1x1.collect("aspp.c1", params, buffers);
    for (size_t i = 0; i < aspp_atrous.size(); ++i)
      aspp_atrous[i].collect("aspp.r" + std::to_string(i), params, buffers);
    aspp_img.collect("aspp.img", params, buffers);
    aspp_proj.collect("aspp.proj", params, buffers);
    low_reduce.collect("low.reduce", params, buffers);
    dec_conv.collect("dec.b0", params, buffers);
    params.push_back({"head.w", &head_w});
    params.push_back({"head.b", &head_b});
  }
};

template <typename T>
DeepLabLiteModel<T> build_deeplab_lite(const EncoderConfig& cfg, uint64_t seed,
                                       std::vector<int> rates = {2, 4, 6}) {
  cfg.validate();
  if (rates.empty()) throw Error("deeplab needs at least one atrous rate");
  for (int r : rates)
    if (r < 1) throw Error("atrous rates must be >= 1");
  DeepLabLiteModel<T> m;
  m.cfg = cfg;
  m.rates = rates;
  Rng rng(derive_seed(seed, 0x644c6162));
  m.enc = detail::make_stages<T>(cfg, 2, rng);
  const auto& w = cfg.stage_widths;
  const size_t A = std::max<size_t>(1, w[3] / 2);   // per-branch ASPP width
  const size_t low_ch = w[0];
  const size_t dec_ch = w[1];
  m.aspp_1x1.init(w[3], A, 1, 0, 1, rng);
  for (int r : rates) {
    ConvBnRelu<T> blk;
    blk.init(w[3], A, 3, r, r, rng);
    m.aspp_atrous.push_back(std::move(blk));
  }
  m.aspp_img.init(w[3], A, 1, 0, 1, rng);
  m.aspp_proj.init(A * (2 + rates.size()), A, 1, 0, 1, rng);
  m.low_reduce.init(w[1], low_ch, 1, 0, 1, rng);
  m.dec_conv.init(A + low_ch, dec_ch, 3, 1, 1, rng);
  m.head_w = detail::he_uniform<T>({size_t(kNumClasses), dec_ch, 1, 1}, dec_ch, rng);
  m.head_b = detail::param_const<T>({size_t(kNumClasses)}, T(0));
  return m;
}

// ------------------------------------------------------- kind-erased facade

template <typename T>
struct SegModel {
  std::variant<UNetModel<T>, DeepLabLiteModel<T>> m;

  std::string kind() const {
    return std::holds_alternative<UNetModel<T>>(m) ? "unet" : "deeplab";
  }
  size_t spatial_multiple() const {
    return std::holds_alternative<UNetModel<T>>(m) ? UNetModel<T>::spatial_multiple
                                                   : DeepLabLiteModel<T>::spatial_multiple;
  }
  const EncoderConfig& config() const {
    return std::visit([](const auto& x) -> const EncoderConfig& { return x.cfg; }, m);
  }
  std::vector<int> aspp_rates() const {
    if (auto* d = std::get_if<DeepLabLiteModel<T>>(&m)) return d->rates;
    return {};
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return std::visit([&](auto& mm) { return mm.forward(x, training); }, m);
  }
  void collect(NamedParams<T>& params, NamedParams<T>& buffers) {
    std::visit([&](auto& mm) { mm.collect(params, buffers); }, m);
  }
};

template <typename T>
SegModel<T> build_model(const std::string& kind, const EncoderConfig& cfg, uint64_t seed,
                        const std::vector<int>& rates = {2, 4, 6}) {
  SegModel<T> s;
  if (kind == "unet")
    s.m = build_unet<T>(cfg, seed);
  else if (kind == "deeplab")
    s.m = build_deeplab_lite<T>(cfg, seed, rates);
  else
    throw Error("unknown model kind '" + kind + "' (expected unet or deeplab)");
  return s;
}

template <typename T>
size_t parameter_count(SegModel<T>& model) {
  NamedParams<T> params, buffers;
  model.collect(params, buffers);
  size_t n = 0;
  for (auto& [name, t] : params) n += t->size();
  return n;
}

}  // namespace terrafuse
