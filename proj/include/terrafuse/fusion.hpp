#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "terrafuse/data.hpp"
#include "terrafuse/metrics.hpp"

namespace terrafuse {

/// Per-pixel class probabilities, channel-major (class,h,w), float32.
struct ProbMap {
  size_t h = 0, w = 0;
  std::vector<float> p;  // kNumClasses * h * w

  static ProbMap zeros(size_t h, size_t w) {
    ProbMap m;
    m.h = h;
    m.w = w;
    m.p.assign(size_t(kNumClasses) * h * w, 0.0f);
    return m;
  }

  float& at(int c, size_t y, size_t x) { return p[(size_t(c) * h + y) * w + x]; }
  float at(int c, size_t y, size_t x) const { return p[(size_t(c) * h + y) * w + x]; }
};

struct FusionConfig {
  double alpha = 0.5;  // weight on the first model's probabilities
};

/// out = alpha * a + (1-alpha) * b, elementwise. Convexity keeps per-pixel
/// normalization intact.
inline ProbMap fuse(const ProbMap& a, const ProbMap& b, const FusionConfig& cfg = {}) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError("fuse: shape mismatch " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                     " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0)
    throw Error("fuse: alpha must be in [0,1], got " + std::to_string(cfg.alpha));
  ProbMap out = ProbMap::zeros(a.h, a.w);
  const float al = float(cfg.alpha), be = float(1.0 - cfg.alpha);
  for (size_t i = 0; i < out.p.size(); ++i) out.p[i] = al * a.p[i] + be * b.p[i];
  return out;
}

/// Ties break to the lowest class index, so exact three-way ties pick
/// background.
inline SegMap argmax_map(const ProbMap& probs) {
  SegMap out = SegMap::zeros(probs.h, probs.w);
  const size_t plane = probs.h * probs.w;
  for (size_t i = 0; i < plane; ++i) {
    float best = probs.p[i];
    uint8_t bc = 0;
    for (int c = 1; c < kNumClasses; ++c) {
      const float v = probs.p[size_t(c) * plane + i];
      if (v > best) {
        best = v;
        bc = uint8_t(c);
      }
    }
    out.v[i] = bc;
  }
  return out;
}

// ----------------------------------------------------------------- PRB file

inline void write_prb(const std::string& path, const ProbMap& m) {
  if (m.p.size() != size_t(kNumClasses) * m.h * m.w) throw ShapeError("write_prb: bad buffer size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("PRB1", 4);
  write_u32(os, uint32_t(m.h));
  write_u32(os, uint32_t(m.w));
  write_u32(os, uint32_t(kNumClasses));
  write_f32_array(os, m.p.data(), m.p.size());
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline ProbMap read_prb(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  detail::read_bytes(is, magic, 4, "PRB magic");
  if (std::string(magic, 4) != "PRB1")
    throw BadMagicError("'" + path + "': bad magic '" + std::string(magic, 4) + "', expected PRB1");
  ProbMap m;
  const uint32_t h = read_u32(is, "PRB height");
  const uint32_t w = read_u32(is, "PRB width");
  const uint32_t classes = read_u32(is, "PRB classes");
  if (classes != uint32_t(kNumClasses))
    throw DataError("'" + path + "': class count " + std::to_string(classes) + " != " +
                    std::to_string(kNumClasses));
  m.h = h;
  m.w = w;
  m.p.resize(size_t(classes) * checked_plane(h, w, "'" + path + "'"));
  read_f32_array(is, m.p.data(), m.p.size(), "PRB data of '" + path + "'");
  const size_t plane = m.h * m.w;
  for (size_t i = 0; i < plane; ++i) {
    double s = 0;
    for (int c = 0; c < kNumClasses; ++c) s += m.p[size_t(c) * plane + i];
    if (std::abs(s - 1.0) > 1e-3)
      throw DataError("'" + path + "': pixel " + std::to_string(i) +
                      " probabilities sum to " + std::to_string(s) + ", expected 1");
  }
  return m;
}

}  // namespace terrafuse
