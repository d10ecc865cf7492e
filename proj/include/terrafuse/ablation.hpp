#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "terrafuse/data.hpp"
#include "terrafuse/fusion.hpp"
#include "terrafuse/metrics.hpp"
#include "terrafuse/trainer.hpp"

namespace terrafuse {

struct AblationConfig {
  double alpha = 0.5;          // fusion weight when two models are given
  bool postnorm_zero = false;  // zero after normalization (≈ mean fill) instead of raw zero
};

struct AblationReport {
  double baseline = 0;
  std::array<double, kNumChannels> ablated{};
  std::array<double, kNumChannels> importance() const {
    std::array<double, kNumChannels> imp{};
    for (size_t c = 0; c < kNumChannels; ++c) imp[c] = baseline - ablated[c];
    return imp;
  }
};

/// Returns a copy with one raw channel zeroed; idempotent.
inline Patch ablate_channel(const Patch& p, size_t channel) {
  if (channel >= kNumChannels)
    throw DataError("ablate_channel: index " + std::to_string(channel) + " out of range [0," +
                    std::to_string(kNumChannels) + ")");
  Patch out = p;
  float* ch = out.channel(channel);
  std::fill(ch, ch + p.h * p.w, 0.0f);
  return out;
}

namespace detail {

// Inference on one (possibly channel-zeroed) patch through one or two models.
inline SegMap ablation_predict(SegModel<float>* a, SegModel<float>* b, const NormStats& norm,
                               const AblationConfig& cfg, const Patch& patch) {
  ProbMap pa = predict_probs(*a, patch, norm);
  if (!b) return argmax_map(pa);
  ProbMap pb = predict_probs(*b, patch, norm);
  return argmax_map(fuse(pa, pb, {cfg.alpha}));
}

inline double ablation_pass(SegModel<float>* a, SegModel<float>* b, const NormStats& norm,
                            const AblationConfig& cfg, const std::vector<Patch>& patches,
                            const std::vector<MaskMap>& masks, int zero_channel) {
  ConfusionMatrix pooled;
  for (size_t i = 0; i < patches.size(); ++i) {
    Patch p = zero_channel < 0 ? patches[i] : ablate_channel(patches[i], size_t(zero_channel));
    if (cfg.postnorm_zero && zero_channel >= 0) {
      // zero the channel *after* normalization: equivalent to zeroing the
      // normalized plane, i.e. filling with the channel mean
      Patch np = normalize(p, norm);
      float* ch = np.channel(size_t(zero_channel));
      std::fill(ch, ch + np.h * np.w, 0.0f);
      // predict_probs normalizes internally, so undo: hand it a patch whose
      // raw channel equals the mean
      p = patches[i];
      float* raw = p.channel(size_t(zero_channel));
      std::fill(raw, raw + p.h * p.w, float(norm.mean[size_t(zero_channel)]));
    }
    pooled += confusion(ablation_predict(a, b, norm, cfg, p), masks[i]);
  }
  return foreground_iou(pooled);
}

}  // namespace detail

/// Test-time feature importance: baseline IoU on untouched inputs, then one
/// pass per channel with that channel zeroed before normalization.
/// Pass `second = nullptr` to ablate a single model instead of the fusion.
inline AblationReport run_ablation(SegModel<float>& first, SegModel<float>* second,
                                   const NormStats& norm, const std::vector<Patch>& patches,
                                   const std::vector<MaskMap>& masks,
                                   const AblationConfig& cfg = {}) {
  if (patches.empty()) throw DataError("run_ablation: empty evaluation set");
  if (patches.size() != masks.size()) throw ShapeError("run_ablation: patch/mask count mismatch");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0)
    throw Error("run_ablation: alpha must be in [0,1], got " + std::to_string(cfg.alpha));
  AblationReport rep;
  rep.baseline = detail::ablation_pass(&first, second, norm, cfg, patches, masks, -1);
  for (size_t c = 0; c < kNumChannels; ++c)
    rep.ablated[c] = detail::ablation_pass(&first, second, norm, cfg, patches, masks, int(c));
  return rep;
}

inline std::string ablation_kv(const AblationReport& rep) {
  std::string out = "baseline=";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f\n", rep.baseline);
  out += buf;
  const auto imp = rep.importance();
  for (size_t c = 0; c < kNumChannels; ++c) {
    std::snprintf(buf, sizeof buf, "%s_iou=%.6f\n%s_importance=%.6f\n",
                  channel_names()[c].c_str(), rep.ablated[c], channel_names()[c].c_str(), imp[c]);
    out += buf;
  }
  return out;
}

inline std::string ablation_table(const AblationReport& rep) {
  char buf[96];
  std::string out;
  std::snprintf(buf, sizeof buf, "removed    iou        importance\n");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-9s  %-9.4f  %s\n", "none", rep.baseline, "-");
  out += buf;
  const auto imp = rep.importance();
  for (size_t c = 0; c < kNumChannels; ++c) {
    std::snprintf(buf, sizeof buf, "%-9s  %-9.4f  %+.4f\n", channel_names()[c].c_str(),
                  rep.ablated[c], imp[c]);
    out += buf;
  }
  return out;
}

}  // namespace terrafuse
