#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "terrafuse/data.hpp"

namespace terrafuse {

/// Predicted per-pixel class map; same raster layout as MaskMap.
using SegMap = MaskMap;

struct ConfusionMatrix {
  // rows = truth class, cols = predicted class
  std::array<uint64_t, size_t(kNumClasses) * kNumClasses> m{};

  uint64_t& at(int truth, int pred) { return m[size_t(truth) * kNumClasses + size_t(pred)]; }
  uint64_t at(int truth, int pred) const { return m[size_t(truth) * kNumClasses + size_t(pred)]; }

  uint64_t total() const {
    uint64_t t = 0;
    for (uint64_t v : m) t += v;
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (size_t i = 0; i < m.size(); ++i) m[i] += o.m[i];
    return *this;
  }

  uint64_t truth_count(int c) const { return at(c, 0) + at(c, 1) + at(c, 2); }
  uint64_t pred_count(int c) const { return at(0, c) + at(1, c) + at(2, c); }
};

inline ConfusionMatrix confusion(const SegMap& pred, const MaskMap& truth) {
  if (pred.h != truth.h || pred.w != truth.w)
    throw ShapeError("confusion: size mismatch " + std::to_string(pred.h) + "x" +
                     std::to_string(pred.w) + " vs " + std::to_string(truth.h) + "x" +
                     std::to_string(truth.w));
  ConfusionMatrix cm;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    if (pred.v[i] >= kNumClasses || truth.v[i] >= kNumClasses)
      throw InvalidClassError("confusion: class value outside {0,1,2}");
    cm.at(truth.v[i], pred.v[i])++;
  }
  return cm;
}

/// Challenge score: matching foreground pixels (same nonzero class on both
/// sides) over pixels that are foreground on either side. Empty foreground on
/// both sides scores 1.0 by convention.
inline double foreground_iou(const ConfusionMatrix& cm) {
  const uint64_t inter = cm.at(1, 1) + cm.at(2, 2);
  const uint64_t uni = cm.total() - cm.at(0, 0);
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

inline double foreground_iou(const SegMap& pred, const MaskMap& truth) {
  return foreground_iou(confusion(pred, truth));
}

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0, iou = 0;
};

struct MetricsReport {
  ClassMetrics terrace, wall;
  double fg_iou = 0;
  double miou = 0;
  uint64_t pixels = 0;
};

namespace detail {

inline ClassMetrics class_metrics(const ConfusionMatrix& cm, int c) {
  const double tp = double(cm.at(c, c));
  const double fp = double(cm.pred_count(c)) - tp;
  const double fn = double(cm.truth_count(c)) - tp;
  ClassMetrics out;
  const bool absent = (tp + fp + fn) == 0;  // class in neither truth nor pred
  out.precision = (tp + fp) > 0 ? tp / (tp + fp) : (absent ? 1.0 : 0.0);
  out.recall = (tp + fn) > 0 ? tp / (tp + fn) : (absent ? 1.0 : 0.0);
  out.f1 = absent ? 1.0 : (2 * tp) / (2 * tp + fp + fn);
  out.iou = absent ? 1.0 : tp / (tp + fp + fn);
  return out;
}

}  // namespace detail

inline MetricsReport full_report(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.terrace = detail::class_metrics(cm, 1);
  r.wall = detail::class_metrics(cm, 2);
  r.fg_iou = foreground_iou(cm);
  r.miou = (r.terrace.iou + r.wall.iou) / 2.0;  // foreground classes only
  r.pixels = cm.total();
  return r;
}

inline MetricsReport full_report(const SegMap& pred, const MaskMap& truth) {
  return full_report(confusion(pred, truth));
}

/// Per-patch (macro) averaging; micro pooling merges matrices instead.
inline MetricsReport average_reports(const std::vector<MetricsReport>& rs) {
  if (rs.empty()) throw DataError("average_reports: empty input");
  MetricsReport out;
  for (const auto& r : rs) {
    out.terrace.precision += r.terrace.precision;
    out.terrace.recall += r.terrace.recall;
    out.terrace.f1 += r.terrace.f1;
    out.terrace.iou += r.terrace.iou;
    out.wall.precision += r.wall.precision;
    out.wall.recall += r.wall.recall;
    out.wall.f1 += r.wall.f1;
    out.wall.iou += r.wall.iou;
    out.fg_iou += r.fg_iou;
    out.miou += r.miou;
    out.pixels += r.pixels;
  }
  const double n = double(rs.size());
  out.terrace.precision /= n;
  out.terrace.recall /= n;
  out.terrace.f1 /= n;
  out.terrace.iou /= n;
  out.wall.precision /= n;
  out.wall.recall /= n;
  out.wall.f1 /= n;
  out.wall.iou /= n;
  out.fg_iou /= n;
  out.miou /= n;
  return out;
}

inline std::string report_kv(const MetricsReport& r) {
  char buf[640];
  std::snprintf(buf, sizeof buf,
                "terrace_precision=%.6f\nterrace_recall=%.6f\nterrace_f1=%.6f\nterrace_iou=%.6f\n"
                "wall_precision=%.6f\nwall_recall=%.6f\nwall_f1=%.6f\nwall_iou=%.6f\n"
                "fg_iou=%.6f\nmiou=%.6f\npixels=%llu\n",
                r.terrace.precision, r.terrace.recall, r.terrace.f1, r.terrace.iou,
                r.wall.precision, r.wall.recall, r.wall.f1, r.wall.iou, r.fg_iou, r.miou,
                (unsigned long long)r.pixels);
  return buf;
}

inline std::string report_table(const MetricsReport& r) {
  char buf[640];
  std::snprintf(buf, sizeof buf,
                "class     precision  recall     f1         iou\n"
                "terrace   %-9.4f  %-9.4f  %-9.4f  %-9.4f\n"
                "wall      %-9.4f  %-9.4f  %-9.4f  %-9.4f\n"
                "foreground iou: %.4f\nmiou (terrace+wall): %.4f\npixels: %llu\n",
                r.terrace.precision, r.terrace.recall, r.terrace.f1, r.terrace.iou,
                r.wall.precision, r.wall.recall, r.wall.f1, r.wall.iou, r.fg_iou, r.miou,
                (unsigned long long)r.pixels);
  return buf;
}

}  // namespace terrafuse
