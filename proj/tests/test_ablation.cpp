#include <cstring>

#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include "terrafuse/ablation.hpp"

using namespace terrafuse;

namespace {

struct EvalSet {
  std::vector<Patch> patches;
  std::vector<MaskMap> masks;
  NormStats norm;
};

EvalSet make_eval_set() {
  EvalSet s;
  for (size_t i = 0; i < 2; ++i) {
    GeneratedPair gp = generate_patch(11, i, 32);
    s.patches.push_back(std::move(gp.patch));
    s.masks.push_back(std::move(gp.mask));
  }
  s.norm = compute_norm_stats(s.patches);
  return s;
}

EncoderConfig small_encoder() {
  EncoderConfig cfg;
  cfg.stage_widths = {4, 8, 12, 16};
  return cfg;
}

double pooled_iou(std::vector<SegMap> preds, const std::vector<MaskMap>& masks) {
  ConfusionMatrix cm;
  for (size_t i = 0; i < preds.size(); ++i) cm += confusion(preds[i], masks[i]);
  return foreground_iou(cm);
}

}  // namespace

TEST_CASE("ablate_channel zeroes exactly one plane") {
  GeneratedPair gp = generate_patch(3, 0, 32);
  const Patch& p = gp.patch;
  Patch z = ablate_channel(p, 1);
  const size_t plane = p.h * p.w;
  for (size_t c = 0; c < kNumChannels; ++c) {
    if (c == 1) {
      for (size_t i = 0; i < plane; ++i) REQUIRE(z.channel(c)[i] == 0.0f);
    } else {
      REQUIRE(std::memcmp(z.channel(c), p.channel(c), plane * sizeof(float)) == 0);
    }
  }

  Patch zz = ablate_channel(z, 1);
  REQUIRE(std::memcmp(zz.data.data(), z.data.data(), z.data.size() * sizeof(float)) == 0);

  Patch already = p;
  std::fill(already.channel(4), already.channel(4) + plane, 0.0f);
  Patch after = ablate_channel(already, 4);
  REQUIRE(std::memcmp(after.data.data(), already.data.data(),
                      already.data.size() * sizeof(float)) == 0);

  REQUIRE_THROWS_AS(ablate_channel(p, kNumChannels), DataError);
}

TEST_CASE("baseline equals an independent evaluation exactly") {
  EvalSet s = make_eval_set();
  SegModel<float> model = build_model<float>("unet", small_encoder(), 5);

  AblationReport rep = run_ablation(model, nullptr, s.norm, s.patches, s.masks);

  std::vector<SegMap> preds;
  for (const auto& p : s.patches) preds.push_back(argmax_map(predict_probs(model, p, s.norm)));
  REQUIRE(rep.baseline == pooled_iou(preds, s.masks));

  // a per-channel entry equals the same computation done by hand
  for (size_t c : {size_t(2), size_t(8)}) {
    std::vector<SegMap> ab;
    for (const auto& p : s.patches)
      ab.push_back(argmax_map(predict_probs(model, ablate_channel(p, c), s.norm)));
    REQUIRE(rep.ablated[c] == pooled_iou(ab, s.masks));
  }

  for (size_t c = 0; c < kNumChannels; ++c) {
    REQUIRE(rep.ablated[c] >= 0.0);
    REQUIRE(rep.ablated[c] <= 1.0);
  }
}

TEST_CASE("reports are deterministic and order-independent") {
  EvalSet s = make_eval_set();
  SegModel<float> model = build_model<float>("unet", small_encoder(), 5);
  AblationReport r1 = run_ablation(model, nullptr, s.norm, s.patches, s.masks);
  AblationReport r2 = run_ablation(model, nullptr, s.norm, s.patches, s.masks);
  REQUIRE(r1.baseline == r2.baseline);
  for (size_t c = 0; c < kNumChannels; ++c) REQUIRE(r1.ablated[c] == r2.ablated[c]);

  // every pass is a pure function of (model, channel); evaluating channels in
  // reverse order by hand reproduces the report entries bit for bit
  for (size_t step = 0; step < kNumChannels; ++step) {
    const size_t c = kNumChannels - 1 - step;
    std::vector<SegMap> ab;
    for (const auto& p : s.patches)
      ab.push_back(argmax_map(predict_probs(model, ablate_channel(p, c), s.norm)));
    REQUIRE(pooled_iou(ab, s.masks) == r1.ablated[c]);
  }
}

TEST_CASE("fused ablation runs both models through the mixture") {
  EvalSet s = make_eval_set();
  SegModel<float> a = build_model<float>("unet", small_encoder(), 5);
  SegModel<float> b = build_model<float>("deeplab", small_encoder(), 6);
  AblationConfig cfg;
  cfg.alpha = 0.6;
  AblationReport rep = run_ablation(a, &b, s.norm, s.patches, s.masks, cfg);

  std::vector<SegMap> preds;
  for (const auto& p : s.patches) {
    ProbMap pa = predict_probs(a, p, s.norm);
    ProbMap pb = predict_probs(b, p, s.norm);
    preds.push_back(argmax_map(fuse(pa, pb, {0.6})));
  }
  REQUIRE(rep.baseline == pooled_iou(preds, s.masks));
}

TEST_CASE("post-normalization zeroing is a distinct, well-defined mode") {
  EvalSet s = make_eval_set();
  SegModel<float> model = build_model<float>("unet", small_encoder(), 5);
  AblationConfig cfg;
  cfg.postnorm_zero = true;
  AblationReport rep = run_ablation(model, nullptr, s.norm, s.patches, s.masks, cfg);
  AblationReport raw = run_ablation(model, nullptr, s.norm, s.patches, s.masks);
  REQUIRE(rep.baseline == raw.baseline);  // flag only affects ablated passes
  for (size_t c = 0; c < kNumChannels; ++c) {
    REQUIRE(rep.ablated[c] >= 0.0);
    REQUIRE(rep.ablated[c] <= 1.0);
  }

  // in this mode, zeroing a channel is filling the raw plane with its mean
  const size_t c = 8;
  std::vector<SegMap> ab;
  for (const auto& p : s.patches) {
    Patch filled = p;
    float* ch = filled.channel(c);
    std::fill(ch, ch + p.h * p.w, float(s.norm.mean[c]));
    ab.push_back(argmax_map(predict_probs(model, filled, s.norm)));
  }
  REQUIRE(rep.ablated[c] == pooled_iou(ab, s.masks));
}

TEST_CASE("argument validation") {
  EvalSet s = make_eval_set();
  SegModel<float> model = build_model<float>("unet", small_encoder(), 5);
  std::vector<Patch> none;
  std::vector<MaskMap> nomasks;
  REQUIRE_THROWS_AS(run_ablation(model, nullptr, s.norm, none, nomasks), DataError);
  std::vector<MaskMap> short_masks(s.masks.begin(), s.masks.begin() + 1);
  REQUIRE_THROWS_AS(run_ablation(model, nullptr, s.norm, s.patches, short_masks), ShapeError);
  AblationConfig bad;
  bad.alpha = 1.5;
  REQUIRE_THROWS_AS(run_ablation(model, nullptr, s.norm, s.patches, s.masks, bad), Error);
}

TEST_CASE("report rendering") {
  // layout example: baseline first, one row per channel in canonical order
  AblationReport rep;
  rep.baseline = 0.37;
  const double vals[kNumChannels] = {0.31, 0.27, 0.31, 0.36, 0.33, 0.36,
                                     0.34, 0.34, 0.26, 0.34, 0.31};
  for (size_t c = 0; c < kNumChannels; ++c) rep.ablated[c] = vals[c];

  const std::string kv = ablation_kv(rep);
  REQUIRE(kv.rfind("baseline=0.370000\n", 0) == 0);
  REQUIRE(kv.find("slope_iou=0.260000\n") != std::string::npos);
  REQUIRE(kv.find("slope_importance=0.110000\n") != std::string::npos);
  REQUIRE(kv.find("blue_iou=0.310000\n") != std::string::npos);

  const std::string table = ablation_table(rep);
  const size_t none_at = table.find("none");
  REQUIRE(none_at != std::string::npos);
  size_t prev = none_at;
  for (size_t c = 0; c < kNumChannels; ++c) {
    const size_t at = table.find(channel_names()[c], prev);
    REQUIRE(at != std::string::npos);
    prev = at;
  }
  REQUIRE(table.find("+0.1100") != std::string::npos);  // slope importance
}
