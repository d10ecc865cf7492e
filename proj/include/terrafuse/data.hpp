#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "terrafuse/common.hpp"

namespace terrafuse {

// ------------------------------------------------------------- channel spec

/// Fixed channel order used everywhere: files, training, ablation.
inline constexpr size_t kNumChannels = 11;

inline const std::array<std::string, kNumChannels>& channel_names() {
  static const std::array<std::string, kNumChannels> names = {
      "red", "green", "blue", "aspect", "dtm",   "flowacc",
      "flowdir", "pcurv", "slope", "tcurv", "twi"};
  return names;
}

inline size_t channel_index(const std::string& name) {
  const auto& names = channel_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw DataError("unknown channel name '" + name + "'");
}

/// The generator renders this channel as zero-mean speckle with no terrain
/// dependence; ablation tests lean on it being label-free.
inline constexpr size_t kNoiseChannel = 2;  // blue

// ------------------------------------------------------------------- types

/// 11-channel raster, channel-major (c,h,w), float32.
struct Patch {
  size_t h = 0, w = 0;
  std::vector<float> data;  // kNumChannels * h * w
  std::string id;

  static Patch zeros(size_t h, size_t w, std::string id = "") {
    Patch p;
    p.h = h;
    p.w = w;
    p.data.assign(kNumChannels * h * w, 0.0f);
    p.id = std::move(id);
    return p;
  }

  float* channel(size_t c) { return data.data() + c * h * w; }
  const float* channel(size_t c) const { return data.data() + c * h * w; }
  float& at(size_t c, size_t y, size_t x) { return data[(c * h + y) * w + x]; }
  float at(size_t c, size_t y, size_t x) const { return data[(c * h + y) * w + x]; }
};

/// Per-pixel labels: 0 background, 1 terrace, 2 wall.
struct MaskMap {
  size_t h = 0, w = 0;
  std::vector<uint8_t> v;

  static MaskMap zeros(size_t h, size_t w) {
    MaskMap m;
    m.h = h;
    m.w = w;
    m.v.assign(h * w, 0);
    return m;
  }

  uint8_t& at(size_t y, size_t x) { return v[y * w + x]; }
  uint8_t at(size_t y, size_t x) const { return v[y * w + x]; }
};

inline constexpr int kNumClasses = 3;

// --------------------------------------------------------------- MCR / MSK

inline void write_patch(const std::string& path, const Patch& p) {
  if (p.data.size() != kNumChannels * p.h * p.w) throw ShapeError("write_patch: bad buffer size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("MCR1", 4);
  write_u32(os, uint32_t(p.h));
  write_u32(os, uint32_t(p.w));
  write_u32(os, uint32_t(kNumChannels));
  write_f32_array(os, p.data.data(), p.data.size());
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline Patch read_patch(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  detail::read_bytes(is, magic, 4, "MCR magic");
  if (std::string(magic, 4) != "MCR1")
    throw BadMagicError("'" + path + "': bad magic '" + std::string(magic, 4) + "', expected MCR1");
  Patch p;
  const uint32_t h = read_u32(is, "MCR height");
  const uint32_t w = read_u32(is, "MCR width");
  uint32_t ch = read_u32(is, "MCR channels");
  if (ch != kNumChannels)
    throw DataError("'" + path + "': channel count " + std::to_string(ch) + " != " +
                    std::to_string(kNumChannels));
  const size_t plane = checked_plane(h, w, "'" + path + "'");
  p.h = h;
  p.w = w;
  p.data.resize(size_t(ch) * plane);
  read_f32_array(is, p.data.data(), p.data.size(), "MCR data of '" + path + "'");
  p.id = std::filesystem::path(path).stem().string();
  return p;
}

inline void write_mask(const std::string& path, const MaskMap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("MSK1", 4);
  write_u32(os, uint32_t(m.h));
  write_u32(os, uint32_t(m.w));
  detail::write_bytes(os, m.v.data(), m.v.size());
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline MaskMap read_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  detail::read_bytes(is, magic, 4, "MSK magic");
  if (std::string(magic, 4) != "MSK1")
    throw BadMagicError("'" + path + "': bad magic '" + std::string(magic, 4) + "', expected MSK1");
  MaskMap m;
  const uint32_t h = read_u32(is, "MSK height");
  const uint32_t w = read_u32(is, "MSK width");
  m.h = h;
  m.w = w;
  m.v.resize(checked_plane(h, w, "'" + path + "'"));
  detail::read_bytes(is, m.v.data(), m.v.size(), "MSK data of '" + path + "'");
  for (size_t i = 0; i < m.v.size(); ++i)
    if (m.v[i] > 2)
      throw InvalidClassError("'" + path + "': mask value " + std::to_string(int(m.v[i])) +
                              " at pixel " + std::to_string(i) + " outside {0,1,2}");
  return m;
}

// ---------------------------------------------------------------- manifest

struct Manifest {
  struct Entry {
    std::string id;
    bool train = true;
  };
  std::vector<Entry> entries;

  std::vector<std::string> ids(bool train) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.train == train) out.push_back(e.id);
    return out;
  }
};

inline void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << "version=1\n";
  for (const auto& e : m.entries) os << e.id << ',' << (e.train ? "train" : "val") << '\n';
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != "version=1")
    throw DataError("'" + path + "': expected first line 'version=1', got '" + line + "'");
  Manifest m;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("'" + path + "': malformed line '" + line + "'");
    Manifest::Entry e;
    e.id = line.substr(0, comma);
    std::string split = line.substr(comma + 1);
    if (split == "train")
      e.train = true;
    else if (split == "val")
      e.train = false;
    else
      throw DataError("'" + path + "': unknown split '" + split + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

// ----------------------------------------------------------- normalization

struct NormStats {
  std::array<double, kNumChannels> mean{};
  std::array<double, kNumChannels> stdev{};
};

/// Per-channel mean/std over a training split; std floored at 1e-6.
inline NormStats compute_norm_stats(const std::vector<Patch>& train) {
  if (train.empty()) throw DataError("compute_norm_stats: empty training split");
  NormStats s;
  std::array<double, kNumChannels> sum{}, sumsq{};
  size_t count = 0;
  for (const auto& p : train) {
    const size_t plane = p.h * p.w;
    count += plane;
    for (size_t c = 0; c < kNumChannels; ++c) {
      const float* ch = p.channel(c);
      double a = 0, b = 0;
      for (size_t i = 0; i < plane; ++i) {
        a += ch[i];
        b += double(ch[i]) * double(ch[i]);
      }
      sum[c] += a;
      sumsq[c] += b;
    }
  }
  for (size_t c = 0; c < kNumChannels; ++c) {
    s.mean[c] = sum[c] / double(count);
    double var = sumsq[c] / double(count) - s.mean[c] * s.mean[c];
    if (var < 0) var = 0;
    double sd = std::sqrt(var);
    if (sd < 1e-6) {
      sd = 1e-6;
      std::cerr << "warning: channel '" << channel_names()[c]
                << "' is (near-)constant; flooring std at 1e-6\n";
    }
    s.stdev[c] = sd;
  }
  return s;
}

inline Patch normalize(const Patch& p, const NormStats& s) {
  Patch out = p;
  const size_t plane = p.h * p.w;
  for (size_t c = 0; c < kNumChannels; ++c) {
    float* ch = out.channel(c);
    const float m = float(s.mean[c]), inv = float(1.0 / s.stdev[c]);
    for (size_t i = 0; i < plane; ++i) ch[i] = (ch[i] - m) * inv;
  }
  return out;
}

// ------------------------------------------------------------ augmentation

/// Joint geometric + photometric augmentation parameters. Geometric pieces
/// compose into one affine resample applied identically to all 11 channels
/// (bilinear) and the mask (nearest); blur touches the RGB channels only.
struct AugmentConfig {
  double crop_scale_min = 0.5, crop_scale_max = 1.0;
  double crop_ratio_min = 0.75, crop_ratio_max = 4.0 / 3.0;
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  double rot_deg_min = -180.0, rot_deg_max = 180.0;
  double translate_frac = 0.1;
  double shear_deg = 10.0;
  double blur_p = 0.5;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
  int blur_kernel = 5;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    c.crop_ratio_min = c.crop_ratio_max = 1.0;
    c.hflip_p = c.vflip_p = 0.0;
    c.rot_deg_min = c.rot_deg_max = 0.0;
    c.translate_frac = 0.0;
    c.shear_deg = 0.0;
    c.blur_p = 0.0;
    return c;
  }

  bool is_identity() const {
    return crop_scale_min == 1.0 && crop_scale_max == 1.0 && crop_ratio_min == 1.0 &&
           crop_ratio_max == 1.0 && hflip_p == 0.0 && vflip_p == 0.0 && rot_deg_min == 0.0 &&
           rot_deg_max == 0.0 && translate_frac == 0.0 && shear_deg == 0.0 && blur_p == 0.0;
  }
};

namespace detail {

// Row-major 2x3 affine [a b c; d e f] mapping (x,y) -> (ax+by+c, dx+ey+f).
struct Affine {
  double a = 1, b = 0, c = 0, d = 0, e = 1, f = 0;

  static Affine identity() { return {}; }

  // this ∘ o : apply o first, then this.
  Affine then_after(const Affine& o) const {
    Affine r;
    r.a = a * o.a + b * o.d;
    r.b = a * o.b + b * o.e;
    r.c = a * o.c + b * o.f + c;
    r.d = d * o.a + e * o.d;
    r.e = d * o.b + e * o.e;
    r.f = d * o.c + e * o.f + f;
    return r;
  }

  Affine inverse() const {
    const double det = a * e - b * d;
    Affine r;
    r.a = e / det;
    r.b = -b / det;
    r.d = -d / det;
    r.e = a / det;
    r.c = -(r.a * c + r.b * f);
    r.f = -(r.d * c + r.e * f);
    return r;
  }

  void apply(double x, double y, double& ox, double& oy) const {
    ox = a * x + b * y + c;
    oy = d * x + e * y + f;
  }
};

// Pure flips and 180-degree rotations must reproduce grid points exactly;
// sin(pi) != 0 in floating point, so snap near-integer sample coordinates.
inline double snap(double x) {
  double r = std::round(x);
  return std::abs(x - r) < 1e-6 ? r : x;
}

inline float bilinear_at(const float* plane, size_t h, size_t w, double y, double x) {
  // out-of-bounds contributes 0 (fill value)
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = long(fx), y0 = long(fy);
  const double wx1 = x - fx, wx0 = 1.0 - wx1;
  const double wy1 = y - fy, wy0 = 1.0 - wy1;
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) return 0.0;
    return plane[size_t(yy) * w + size_t(xx)];
  };
  return float(wy0 * (wx0 * px(y0, x0) + wx1 * px(y0, x0 + 1)) +
               wy1 * (wx0 * px(y0 + 1, x0) + wx1 * px(y0 + 1, x0 + 1)));
}

inline void gaussian_blur_plane(float* plane, size_t h, size_t w, double sigma, int kernel) {
  const int radius = kernel / 2;
  std::vector<double> k(size_t(kernel), 0.0);
  for (int i = -radius; i <= radius; ++i)
    k[size_t(i + radius)] = std::exp(-0.5 * double(i) * double(i) / (sigma * sigma));
  // horizontal then vertical, renormalizing over in-bounds taps at the borders
  std::vector<float> tmp(h * w);
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double acc = 0, wsum = 0;
      for (int i = -radius; i <= radius; ++i) {
        long xx = long(x) + i;
        if (xx < 0 || xx >= long(w)) continue;
        acc += k[size_t(i + radius)] * plane[y * w + size_t(xx)];
        wsum += k[size_t(i + radius)];
      }
      tmp[y * w + x] = float(acc / wsum);
    }
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double acc = 0, wsum = 0;
      for (int i = -radius; i <= radius; ++i) {
        long yy = long(y) + i;
        if (yy < 0 || yy >= long(h)) continue;
        acc += k[size_t(i + radius)] * tmp[size_t(yy) * w + x];
        wsum += k[size_t(i + radius)];
      }
      plane[y * w + x] = float(acc / wsum);
    }
}

}  // namespace detail

/// Applies one random geometric transform to all channels and the mask
/// (bilinear for channels, nearest for the mask, fill 0 outside), then an
/// optional Gaussian blur on the RGB channels. Output size equals input size.
inline std::pair<Patch, MaskMap> augment(const Patch& patch, const MaskMap& mask,
                                         const AugmentConfig& cfg, Rng& rng) {
  if (patch.h != mask.h || patch.w != mask.w)
    throw ShapeError("augment: patch/mask size mismatch");
  const size_t H = patch.h, W = patch.w;
  const double cy = (double(H) - 1.0) / 2.0, cx = (double(W) - 1.0) / 2.0;

  // -- random resized crop (torchvision-style parameter sampling)
  double crop_x0 = 0, crop_y0 = 0, crop_w = double(W), crop_h = double(H);
  {
    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
      const double area = double(H * W) * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
      const double logr = rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max));
      const double ratio = std::exp(logr);
      const double cw = std::sqrt(area * ratio), ch = std::sqrt(area / ratio);
      if (cw <= double(W) + 1e-9 && ch <= double(H) + 1e-9) {
        crop_w = std::min(cw, double(W));
        crop_h = std::min(ch, double(H));
        crop_x0 = rng.uniform(0.0, double(W) - crop_w);
        crop_y0 = rng.uniform(0.0, double(H) - crop_h);
        found = true;
      }
    }
    // fallback: centred full-frame crop
  }
  const bool hflip = rng.bernoulli(cfg.hflip_p);
  const bool vflip = rng.bernoulli(cfg.vflip_p);
  const double angle = rng.uniform(cfg.rot_deg_min, cfg.rot_deg_max) * M_PI / 180.0;
  const double tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * double(W);
  const double ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * double(H);
  const double shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg) * M_PI / 180.0;
  const bool do_blur = rng.bernoulli(cfg.blur_p);
  const double sigma = do_blur ? rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max) : 0.0;

  using detail::Affine;
  // forward chain input -> output, pixel-centre convention
  Affine crop;  // scale crop rect to output frame
  crop.a = double(W) / crop_w;
  crop.c = crop.a * (-crop_x0);
  crop.e = double(H) / crop_h;
  crop.f = crop.e * (-crop_y0);
  // keep centres aligned: x_out = (x_in + 0.5 - x0) * s - 0.5
  crop.c += crop.a * 0.5 - 0.5;
  crop.f += crop.e * 0.5 - 0.5;

  Affine flip;
  if (hflip) {
    flip.a = -1;
    flip.c = double(W) - 1.0;
  }
  if (vflip) {
    flip.e = -1;
    flip.f = double(H) - 1.0;
  }

  Affine rot;
  {
    const double ca = std::cos(angle), sa = std::sin(angle);
    rot.a = ca;
    rot.b = -sa;
    rot.d = sa;
    rot.e = ca;
    rot.c = cx - ca * cx + sa * cy;
    rot.f = cy - sa * cx - ca * cy;
  }

  Affine aff;
  aff.b = std::tan(shear);
  aff.c = tx - aff.b * cy;
  aff.f = ty;

  const Affine fwd = aff.then_after(rot.then_after(flip.then_after(crop)));
  const Affine inv = fwd.inverse();

  Patch out = Patch::zeros(H, W, patch.id);
  MaskMap mout = MaskMap::zeros(H, W);
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      double sx, sy;
      inv.apply(double(x), double(y), sx, sy);
      sx = detail::snap(sx);
      sy = detail::snap(sy);
      for (size_t c = 0; c < kNumChannels; ++c)
        out.at(c, y, x) = detail::bilinear_at(patch.channel(c), H, W, sy, sx);
      const long nx = long(std::lround(sx)), ny = long(std::lround(sy));
      mout.at(y, x) =
          (nx >= 0 && ny >= 0 && nx < long(W) && ny < long(H)) ? mask.at(size_t(ny), size_t(nx)) : 0;
    }

  if (do_blur)
    for (size_t c = 0; c < 3; ++c)
      detail::gaussian_blur_plane(out.channel(c), H, W, sigma, cfg.blur_kernel);

  return {std::move(out), std::move(mout)};
}

// -------------------------------------------------------- synthetic dataset

namespace detail {

struct Grid {
  size_t h = 0, w = 0;
  std::vector<double> v;
  Grid() = default;
  Grid(size_t h_, size_t w_) : h(h_), w(w_), v(h_ * w_, 0.0) {}
  double& at(size_t y, size_t x) { return v[y * w + x]; }
  double at(size_t y, size_t x) const { return v[y * w + x]; }
  double clamped(long y, long x) const {
    y = std::clamp(y, 0l, long(h) - 1);
    x = std::clamp(x, 0l, long(w) - 1);
    return v[size_t(y) * w + size_t(x)];
  }
};

inline Grid gauss_smooth(const Grid& g, double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(size_t(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[size_t(i + radius)];
  }
  for (double& x : k) x /= sum;
  Grid tmp(g.h, g.w), out(g.h, g.w);
  for (size_t y = 0; y < g.h; ++y)
    for (size_t x = 0; x < g.w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[size_t(i + radius)] * g.clamped(long(y), long(x) + i);
      tmp.at(y, x) = acc;
    }
  for (size_t y = 0; y < g.h; ++y)
    for (size_t x = 0; x < g.w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[size_t(i + radius)] * tmp.clamped(long(y) + i, long(x));
      out.at(y, x) = acc;
    }
  return out;
}

// Horn gradients (cell size 1).
inline void horn_gradient(const Grid& z, size_t y, size_t x, double& gx, double& gy) {
  const long yy = long(y), xx = long(x);
  const double nw = z.clamped(yy - 1, xx - 1), n = z.clamped(yy - 1, xx), ne = z.clamped(yy - 1, xx + 1);
  const double w_ = z.clamped(yy, xx - 1), e = z.clamped(yy, xx + 1);
  const double sw = z.clamped(yy + 1, xx - 1), s = z.clamped(yy + 1, xx), se = z.clamped(yy + 1, xx + 1);
  gx = ((ne + 2 * e + se) - (nw + 2 * w_ + sw)) / 8.0;
  gy = ((sw + 2 * s + se) - (nw + 2 * n + ne)) / 8.0;
}

// D8 neighbour offsets, codes 0..7: E, SE, S, SW, W, NW, N, NE.
inline const int kD8dx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
inline const int kD8dy[8] = {0, 1, 1, 1, 0, -1, -1, -1};

}  // namespace detail

struct GeneratedPair {
  Patch patch;
  MaskMap mask;
};

/// Synthesizes one terrain patch and its mask. Deterministic in (seed, index).
///
/// Construction notes: wall ridges are imprinted into the DTM before any
/// derivative channel is computed, and curvature/hillshade are derived from a
/// smoothed DTM, so the raw-DTM slope channel carries the sharpest wall
/// signal. Blue is zero-mean speckle with no terrain dependence.
inline GeneratedPair generate_patch(uint64_t seed, size_t index, size_t size) {
  using detail::Grid;
  const size_t S = size;
  Rng rng(derive_seed(seed, index));
  Grid z(S, S);

  // regional slope
  {
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const double g = rng.uniform(0.03, 0.08);
    const double gx = g * std::cos(theta), gy = g * std::sin(theta);
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x) z.at(y, x) += gx * double(x) + gy * double(y);
  }

  // anisotropic Gaussian bumps
  {
    const int nb = 3 + int(rng.uniform_int(4));
    for (int b = 0; b < nb; ++b) {
      const double bx = rng.uniform(0.0, double(S)), by = rng.uniform(0.0, double(S));
      const double amp = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(1.5, 4.0);
      const double s1 = rng.uniform(double(S) / 8.0, double(S) / 3.0);
      const double s2 = rng.uniform(double(S) / 8.0, double(S) / 3.0);
      const double om = rng.uniform(0.0, M_PI);
      const double co = std::cos(om), so = std::sin(om);
      for (size_t y = 0; y < S; ++y)
        for (size_t x = 0; x < S; ++x) {
          const double dx = double(x) - bx, dy = double(y) - by;
          const double u = co * dx + so * dy, v = -so * dx + co * dy;
          z.at(y, x) += amp * std::exp(-0.5 * (u * u / (s1 * s1) + v * v / (s2 * s2)));
        }
    }
  }

  // wadi channel through the patch centre, with a gentle sinusoidal wiggle
  const double phi = rng.uniform(0.0, 2.0 * M_PI);
  const double cphi = std::cos(phi), sphi = std::sin(phi);
  const double cx = double(S) / 2.0, cy = double(S) / 2.0;
  const double wig_amp = rng.uniform(2.0, 6.0);
  const double wig_wl = rng.uniform(double(S) / 2.0, double(S));
  const double wig_ph = rng.uniform(0.0, 2.0 * M_PI);
  const double half_w = rng.uniform(5.0, 8.0);
  const double depth = rng.uniform(2.5, 5.0);
  auto wadi_coords = [&](double x, double y, double& along, double& perp) {
    const double dx = x - cx, dy = y - cy;
    along = cphi * dx + sphi * dy;
    const double raw_perp = -sphi * dx + cphi * dy;
    perp = raw_perp - wig_amp * std::sin(2.0 * M_PI * along / wig_wl + wig_ph);
  };
  for (size_t y = 0; y < S; ++y)
    for (size_t x = 0; x < S; ++x) {
      double along, perp;
      wadi_coords(double(x), double(y), along, perp);
      z.at(y, x) -= depth * std::exp(-(perp * perp) / (half_w * half_w));
    }

  // terrace bands across the wadi, walls hugging the band edges
  MaskMap mask = MaskMap::zeros(S, S);
  const double zone = half_w * 1.4;  // lateral extent of bands and walls
  const int n_bands = 2 + int(rng.bernoulli(0.5));
  std::vector<double> band_pos(size_t(n_bands), 0.0), band_w(size_t(n_bands), 0.0);
  {
    // stratified band centres so bands never collide
    const double lo = -0.35 * double(S), hi = 0.35 * double(S);
    const double stride = (hi - lo) / double(n_bands);
    for (int b = 0; b < n_bands; ++b) {
      band_w[size_t(b)] = rng.uniform(6.0, 10.0);
      const double margin = band_w[size_t(b)] / 2.0 + 3.0;
      band_pos[size_t(b)] =
          lo + stride * double(b) + rng.uniform(margin, std::max(margin + 1e-9, stride - margin));
    }
  }

  // standalone stonewall fences (line segments anywhere on the patch)
  struct Seg {
    double x0, y0, x1, y1;
  };
  std::vector<Seg> fences;
  const int n_fences = 1 + int(rng.bernoulli(0.5));
  for (int f = 0; f < n_fences; ++f) {
    const double fx = rng.uniform(0.1 * double(S), 0.9 * double(S));
    const double fy = rng.uniform(0.1 * double(S), 0.9 * double(S));
    const double fa = rng.uniform(0.0, M_PI);
    const double fl = rng.uniform(double(S) / 4.0, double(S) / 2.0);
    fences.push_back({fx - 0.5 * fl * std::cos(fa), fy - 0.5 * fl * std::sin(fa),
                      fx + 0.5 * fl * std::cos(fa), fy + 0.5 * fl * std::sin(fa)});
  }
  auto seg_dist = [](const Seg& s, double x, double y) {
    const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((x - s.x0) * vx + (y - s.y0) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = x - (s.x0 + t * vx), dy = y - (s.y0 + t * vy);
    return std::sqrt(dx * dx + dy * dy);
  };

  Grid wall_ridge(S, S);  // analytic distance-based ridge field, added to the DTM
  Grid terrace_flat(S, S);
  const double wall_h = rng.uniform(1.6, 2.2);
  for (size_t y = 0; y < S; ++y)
    for (size_t x = 0; x < S; ++x) {
      double along, perp;
      wadi_coords(double(x), double(y), along, perp);
      const bool in_zone = std::abs(perp) <= zone;
      double wall_d = 1e9;
      for (int b = 0; b < n_bands; ++b) {
        const double a = band_pos[size_t(b)], bw = band_w[size_t(b)];
        if (in_zone && std::abs(along - a) <= bw / 2.0) {
          mask.at(y, x) = 1;
          terrace_flat.at(y, x) = 1.0;
        }
        // wall polyline on the downstream band edge
        if (in_zone) wall_d = std::min(wall_d, std::abs(along - (a + bw / 2.0 + 1.0)));
      }
      for (const auto& f : fences) wall_d = std::min(wall_d, seg_dist(f, double(x), double(y)));
      if (wall_d <= 1.0) mask.at(y, x) = 2;  // ~2 px wide, wall wins over terrace
      wall_ridge.at(y, x) = wall_h * std::exp(-(wall_d * wall_d) / (1.2 * 1.2));
    }

  // sediment fill: flatten terrace bands toward their local mean elevation,
  // so low slope inside the wadi zone is the telltale terrace signature
  {
    Grid zs = detail::gauss_smooth(z, 4.0);
    for (size_t i = 0; i < S * S; ++i)
      z.v[i] = z.v[i] + 0.95 * terrace_flat.v[i] * (zs.v[i] - z.v[i]);
  }
  // imprint wall ridges before any derivative is computed
  for (size_t i = 0; i < S * S; ++i) z.v[i] += wall_ridge.v[i];

  // rebase to a zero-mean local datum; every derived channel is offset-invariant,
  // so this only centers the elevation channel itself
  {
    double zmean = 0;
    for (double v : z.v) zmean += v;
    zmean /= double(S * S);
    for (double& v : z.v) v -= zmean;
  }

  // heavy smoothing hides the 1-2 px wall ridges from curvature and hillshade;
  // only the raw-surface slope below keeps them
  const Grid zsm = detail::gauss_smooth(z, 3.5);

  Patch patch = Patch::zeros(S, S);
  Grid slope_r(S, S);
  for (size_t y = 0; y < S; ++y)
    for (size_t x = 0; x < S; ++x) {
      double gx, gy;
      detail::horn_gradient(z, y, x, gx, gy);
      const double slope = std::atan(std::sqrt(gx * gx + gy * gy));
      const double aspect = std::atan2(gy, gx);
      slope_r.at(y, x) = slope;
      patch.at(channel_index("slope"), y, x) = float(slope);
      patch.at(channel_index("aspect"), y, x) = float(aspect);
      patch.at(channel_index("dtm"), y, x) = float(z.at(y, x));

      // curvature from the smoothed surface
      const double zx = (zsm.clamped(long(y), long(x) + 1) - zsm.clamped(long(y), long(x) - 1)) / 2.0;
      const double zy = (zsm.clamped(long(y) + 1, long(x)) - zsm.clamped(long(y) - 1, long(x))) / 2.0;
      const double zxx = zsm.clamped(long(y), long(x) + 1) - 2 * zsm.at(y, x) + zsm.clamped(long(y), long(x) - 1);
      const double zyy = zsm.clamped(long(y) + 1, long(x)) - 2 * zsm.at(y, x) + zsm.clamped(long(y) - 1, long(x));
      const double zxy = (zsm.clamped(long(y) + 1, long(x) + 1) - zsm.clamped(long(y) + 1, long(x) - 1) -
                          zsm.clamped(long(y) - 1, long(x) + 1) + zsm.clamped(long(y) - 1, long(x) - 1)) /
                         4.0;
      const double g2 = zx * zx + zy * zy;
      double pcurv = 0, tcurv = 0;
      if (g2 > 1e-12) {
        const double q = 1.0 + g2;
        pcurv = -(zxx * zx * zx + 2 * zxy * zx * zy + zyy * zy * zy) / (g2 * std::pow(q, 1.5));
        tcurv = -(zxx * zy * zy - 2 * zxy * zx * zy + zyy * zx * zx) / (g2 * std::sqrt(q));
      }
      patch.at(channel_index("pcurv"), y, x) = float(pcurv);
      patch.at(channel_index("tcurv"), y, x) = float(tcurv);
    }

  // D8 flow direction and accumulation on the raw DTM
  {
    std::vector<uint8_t> dir(S * S, 0);
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x) {
        double best = -1e300;
        uint8_t bestc = 0;
        for (uint8_t c = 0; c < 8; ++c) {
          const long ny = long(y) + detail::kD8dy[c], nx = long(x) + detail::kD8dx[c];
          if (ny < 0 || nx < 0 || ny >= long(S) || nx >= long(S)) continue;
          const double dist = (detail::kD8dx[c] != 0 && detail::kD8dy[c] != 0) ? M_SQRT2 : 1.0;
          const double drop = (z.at(y, x) - z.at(size_t(ny), size_t(nx))) / dist;
          if (drop > best) {
            best = drop;
            bestc = c;
          }
        }
        dir[y * S + x] = bestc;
        patch.at(channel_index("flowdir"), y, x) = float(bestc);
      }

    std::vector<double> acc(S * S, 1.0);
    std::vector<size_t> order(S * S);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return z.v[a] != z.v[b] ? z.v[a] > z.v[b] : a < b;
    });
    for (size_t idx : order) {
      const size_t y = idx / S, x = idx % S;
      const uint8_t c = dir[idx];
      const long ny = long(y) + detail::kD8dy[c], nx = long(x) + detail::kD8dx[c];
      if (ny < 0 || nx < 0 || ny >= long(S) || nx >= long(S)) continue;
      if (z.at(size_t(ny), size_t(nx)) < z.at(y, x)) acc[size_t(ny) * S + size_t(nx)] += acc[idx];
    }
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x) {
        patch.at(channel_index("flowacc"), y, x) = float(acc[y * S + x]);
        const double ts = std::max(std::tan(slope_r.at(y, x)), 0.01);
        patch.at(channel_index("twi"), y, x) = float(std::log(std::max(acc[y * S + x], 1.0) / ts));
      }
  }

  // RGB from the hillshaded (smoothed) DTM; blue is the designated noise band
  {
    const double az = 315.0 * M_PI / 180.0, alt = 45.0 * M_PI / 180.0;
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x) {
        double gx, gy;
        detail::horn_gradient(zsm, y, x, gx, gy);
        const double sl = std::atan(std::sqrt(gx * gx + gy * gy));
        const double as = std::atan2(gy, gx);
        double hs = std::sin(alt) * std::cos(sl) + std::cos(alt) * std::sin(sl) * std::cos(az - as);
        hs = std::clamp(hs, 0.0, 1.0);
        // reflectance anomalies around the scene mean, so the bands stay
        // centered; hillshade weight sits near the speckle sigma and the wall
        // tint below it: RGB hints at relief but cannot replace the slope
        // signature
        const double wallness = wall_ridge.at(y, x) / wall_h;
        patch.at(channel_index("red"), y, x) =
            float(0.22 * (hs - 0.55) + 0.07 * rng.normal());
        patch.at(channel_index("green"), y, x) =
            float(0.22 * (hs - 0.55) + 0.02 * wallness + 0.07 * rng.normal());
        patch.at(channel_index("blue"), y, x) = float(0.15 * rng.normal());
      }
  }

  char idbuf[32];
  std::snprintf(idbuf, sizeof idbuf, "patch_%04zu", index);
  patch.id = idbuf;
  return {std::move(patch), std::move(mask)};
}

/// Writes n_patches MCR/MSK pairs plus manifest.txt (80/20 train/val split).
inline Manifest generate_dataset(size_t n_patches, size_t size, uint64_t seed,
                                 const std::string& out_dir) {
  if (n_patches < 1) throw DataError("generate_dataset: need at least one patch");
  if (size % 16 != 0) throw DataError("generate_dataset: size must be divisible by 16");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  const size_t n_train = std::max<size_t>(1, n_patches * 4 / 5);
  Manifest m;
  for (size_t i = 0; i < n_patches; ++i) {
    GeneratedPair gp = generate_patch(seed, i, size);
    const std::string base = (std::filesystem::path(out_dir) / gp.patch.id).string();
    write_patch(base + ".mcr", gp.patch);
    write_mask(base + ".msk", gp.mask);
    m.entries.push_back({gp.patch.id, i < n_train});
  }
  write_manifest((std::filesystem::path(out_dir) / "manifest.txt").string(), m);
  return m;
}

}  // namespace terrafuse
