#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "terrafuse/data.hpp"
#include "terrafuse/fusion.hpp"
#include "terrafuse/losses.hpp"
#include "terrafuse/metrics.hpp"
#include "terrafuse/nets.hpp"

namespace terrafuse {

struct TrainConfig {
  std::string model = "unet";  // unet | deeplab
  int epochs = 200;
  int batch_size = 8;          // paper-scale 16 available via CLI flag
  double lr = 0.001;
  double weight_decay = 0.01;
  double beta = 0.5;
  double dice_eps = 1.0;
  uint64_t seed = 0;
  EncoderConfig encoder;
  std::vector<int> aspp_rates = {2, 4, 6};
  AugmentConfig augment;  // AugmentConfig::identity() disables augmentation

  void validate() const {
    if (model != "unet" && model != "deeplab")
      throw Error("model must be unet or deeplab, got '" + model + "'");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    encoder.validate();
  }
};

struct ModelCheckpoint {
  std::string kind;
  EncoderConfig encoder;
  std::vector<int> aspp_rates = {2, 4, 6};
  uint64_t seed = 0;
  int epoch = 0;
  double beta = 0.5;
  double val_iou = 0.0;
  NormStats norm;
  std::string created;  // informational; excluded from byte comparisons
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // params + buffers
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_iou = 0;
};

struct TrainResult {
  ModelCheckpoint best;
  ModelCheckpoint final;
  std::vector<EpochStats> history;
};

// ------------------------------------------------------------- checkpoints

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("checkpoint: bad numeric value '" + s + "' for " + what);
  }
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t at = s.find(sep, start);
    if (at == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, at - start));
    start = at + 1;
  }
}

inline std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  std::string header;
  auto kv = [&](const std::string& k, const std::string& v) { header += k + "=" + v + "\n"; };
  kv("kind", ckpt.kind);
  {
    std::string w;
    for (size_t i = 0; i < ckpt.encoder.stage_widths.size(); ++i)
      w += (i ? "," : "") + std::to_string(ckpt.encoder.stage_widths[i]);
    kv("widths", w);
  }
  kv("blocks", std::to_string(ckpt.encoder.blocks_per_stage));
  {
    std::string r;
    for (size_t i = 0; i < ckpt.aspp_rates.size(); ++i)
      r += (i ? "," : "") + std::to_string(ckpt.aspp_rates[i]);
    kv("rates", r);
  }
  kv("seed", std::to_string(ckpt.seed));
  kv("epoch", std::to_string(ckpt.epoch));
  kv("beta", detail::fmt_double(ckpt.beta));
  kv("val_iou", detail::fmt_double(ckpt.val_iou));
  {
    std::string m, s;
    for (size_t c = 0; c < kNumChannels; ++c) {
      m += (c ? "," : "") + detail::fmt_double(ckpt.norm.mean[c]);
      s += (c ? "," : "") + detail::fmt_double(ckpt.norm.stdev[c]);
    }
    kv("norm_mean", m);
    kv("norm_std", s);
  }
  kv("created", ckpt.created.empty() ? detail::iso_now() : ckpt.created);

  auto sorted = ckpt.tensors;  // shallow copies; shared storage
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].first == sorted[i - 1].first)
      throw DataError("checkpoint: duplicate tensor name '" + sorted[i].first + "'");

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("TFW1", 4);
  write_u32(os, uint32_t(header.size()));
  os.write(header.data(), std::streamsize(header.size()));
  for (const auto& [name, t] : sorted) {
    if (name.size() > 0xFFFF) throw DataError("checkpoint: tensor name too long");
    write_u16(os, uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(uint8_t(t.shape.size())));
    for (size_t d : t.shape) write_u32(os, uint32_t(d));
    write_f32_array(os, t.data(), t.size());
  }
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  detail::read_bytes(is, magic, 4, "checkpoint magic");
  if (std::string(magic, 4) != "TFW1")
    throw BadMagicError("'" + path + "': bad magic '" + std::string(magic, 4) + "', expected TFW1");
  const uint32_t hlen = read_u32(is, "checkpoint header length");
  if (hlen > (1u << 20)) throw DataError("'" + path + "': implausible header length");
  std::string header(hlen, '\0');
  detail::read_bytes(is, header.data(), hlen, "checkpoint header");

  std::map<std::string, std::string> kv;
  for (const std::string& line : detail::split(header, '\n')) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("'" + path + "': malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("'" + path + "': header missing key '" + k + "'");
    return it->second;
  };

  ModelCheckpoint ckpt;
  ckpt.kind = need("kind");
  if (ckpt.kind != "unet" && ckpt.kind != "deeplab")
    throw DataError("'" + path + "': unknown model kind '" + ckpt.kind + "'");
  ckpt.encoder.stage_widths.clear();
  for (const auto& tok : detail::split(need("widths"), ','))
    ckpt.encoder.stage_widths.push_back(size_t(detail::parse_double(tok, "widths")));
  ckpt.encoder.blocks_per_stage = int(detail::parse_double(need("blocks"), "blocks"));
  ckpt.aspp_rates.clear();
  for (const auto& tok : detail::split(need("rates"), ','))
    ckpt.aspp_rates.push_back(int(detail::parse_double(tok, "rates")));
  ckpt.seed = uint64_t(detail::parse_double(need("seed"), "seed"));
  ckpt.epoch = int(detail::parse_double(need("epoch"), "epoch"));
  ckpt.beta = detail::parse_double(need("beta"), "beta");
  ckpt.val_iou = detail::parse_double(need("val_iou"), "val_iou");
  {
    const auto ms = detail::split(need("norm_mean"), ',');
    const auto ss = detail::split(need("norm_std"), ',');
    if (ms.size() != kNumChannels || ss.size() != kNumChannels)
      throw DataError("'" + path + "': normalization stats must have " +
                      std::to_string(kNumChannels) + " entries");
    for (size_t c = 0; c < kNumChannels; ++c) {
      ckpt.norm.mean[c] = detail::parse_double(ms[c], "norm_mean");
      ckpt.norm.stdev[c] = detail::parse_double(ss[c], "norm_std");
    }
  }
  if (auto it = kv.find("created"); it != kv.end()) ckpt.created = it->second;

  while (true) {
    int c = is.peek();
    if (c == EOF) break;
    const uint16_t nlen = read_u16(is, "tensor name length");
    std::string name(nlen, '\0');
    detail::read_bytes(is, name.data(), nlen, "tensor name");
    uint8_t ndim = 0;
    detail::read_bytes(is, &ndim, 1, "tensor rank");
    if (ndim > 8) throw DataError("'" + path + "': implausible rank for tensor '" + name + "'");
    Shape shape(ndim);
    uint64_t count = 1;
    for (auto& d : shape) {
      d = read_u32(is, "tensor dim of '" + name + "'");
      count *= d;
      if (d > (1u << 24) || count > (1ull << 26))
        throw DataError("'" + path + "': implausible shape for tensor '" + name + "'");
    }
    Tensor<float> t = Tensor<float>::zeros(shape);
    read_f32_array(is, t.data(), t.size(), "tensor data of '" + name + "'");
    for (const auto& [n, _] : ckpt.tensors)
      if (n == name) throw DataError("'" + path + "': duplicate tensor name '" + name + "'");
    ckpt.tensors.push_back({std::move(name), std::move(t)});
  }
  return ckpt;
}

/// Rebuilds the architecture named by the checkpoint and loads every tensor.
inline SegModel<float> model_from_checkpoint(const ModelCheckpoint& ckpt) {
  if (ckpt.encoder.in_channels != kNumChannels)
    throw DataError("checkpoint expects " + std::to_string(ckpt.encoder.in_channels) +
                    " input channels, this build handles " + std::to_string(kNumChannels));
  SegModel<float> model = build_model<float>(ckpt.kind, ckpt.encoder, ckpt.seed, ckpt.aspp_rates);
  NamedParams<float> params, buffers;
  model.collect(params, buffers);
  std::map<std::string, const Tensor<float>*> saved;
  for (const auto& [name, t] : ckpt.tensors) saved[name] = &t;
  auto load_into = [&](NamedParams<float>& dst) {
    for (auto& [name, t] : dst) {
      auto it = saved.find(name);
      if (it == saved.end()) throw DataError("checkpoint missing tensor '" + name + "'");
      if (it->second->shape != t->shape)
        throw DataError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(it->second->shape) + ", model wants " + shape_str(t->shape));
      std::copy(it->second->data(), it->second->data() + it->second->size(), t->data());
      saved.erase(it);
    }
  };
  load_into(params);
  load_into(buffers);
  if (!saved.empty())
    throw DataError("checkpoint has unexpected tensor '" + saved.begin()->first + "'");
  return model;
}

// -------------------------------------------------------------- prediction

inline ProbMap predict_probs(SegModel<float>& model, const Patch& patch, const NormStats& stats) {
  const Patch np = normalize(patch, stats);
  Tensor<float> x = Tensor<float>::zeros({1, kNumChannels, np.h, np.w});
  std::copy(np.data.begin(), np.data.end(), x.data());
  Tensor<float> probs = softmax_channels(model.forward(x, false));
  ProbMap out = ProbMap::zeros(np.h, np.w);
  std::copy(probs.data(), probs.data() + probs.size(), out.p.begin());
  return out;
}

// ----------------------------------------------------------------- dataset

struct LoadedDataset {
  std::vector<Patch> train_patches, val_patches;
  std::vector<MaskMap> train_masks, val_masks;
};

inline LoadedDataset load_dataset(const std::string& dir) {
  const Manifest man = read_manifest((std::filesystem::path(dir) / "manifest.txt").string());
  LoadedDataset ds;
  for (const auto& e : man.entries) {
    const std::string base = (std::filesystem::path(dir) / e.id).string();
    Patch p = read_patch(base + ".mcr");
    MaskMap m = read_mask(base + ".msk");
    if (p.h != m.h || p.w != m.w)
      throw DataError("'" + e.id + "': patch " + std::to_string(p.h) + "x" + std::to_string(p.w) +
                      " does not match mask " + std::to_string(m.h) + "x" + std::to_string(m.w));
    (e.train ? ds.train_patches : ds.val_patches).push_back(std::move(p));
    (e.train ? ds.train_masks : ds.val_masks).push_back(std::move(m));
  }
  if (ds.train_patches.empty()) throw DataError("dataset '" + dir + "' has no training patches");
  for (const auto& p : ds.train_patches)
    if (p.h != ds.train_patches[0].h || p.w != ds.train_patches[0].w)
      throw DataError("mixed patch sizes in training split");
  return ds;
}

// ------------------------------------------------------------ the training

namespace detail {

inline ModelCheckpoint snapshot(SegModel<float>& model, const TrainConfig& cfg,
                                const NormStats& norm, int epoch, double val_iou) {
  ModelCheckpoint ckpt;
  ckpt.kind = model.kind();
  ckpt.encoder = model.config();
  ckpt.aspp_rates = cfg.aspp_rates;
  ckpt.seed = cfg.seed;
  ckpt.epoch = epoch;
  ckpt.beta = cfg.beta;
  ckpt.val_iou = val_iou;
  ckpt.norm = norm;
  NamedParams<float> params, buffers;
  model.collect(params, buffers);
  for (auto& [name, t] : params) ckpt.tensors.push_back({name, t->clone()});
  for (auto& [name, t] : buffers) ckpt.tensors.push_back({name, t->clone()});
  return ckpt;
}

inline double validation_iou(SegModel<float>& model, const std::vector<Patch>& patches,
                             const std::vector<MaskMap>& masks) {
  // eval path: no augmentation by construction, batchnorm in inference mode
  ConfusionMatrix pooled;
  for (size_t i = 0; i < patches.size(); ++i) {
    Tensor<float> x = Tensor<float>::zeros({1, kNumChannels, patches[i].h, patches[i].w});
    std::copy(patches[i].data.begin(), patches[i].data.end(), x.data());
    Tensor<float> probs = softmax_channels(model.forward(x, false));
    ProbMap pm = ProbMap::zeros(patches[i].h, patches[i].w);
    std::copy(probs.data(), probs.data() + probs.size(), pm.p.begin());
    pooled += confusion(argmax_map(pm), masks[i]);
  }
  return foreground_iou(pooled);
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const std::string& data_dir,
                         std::ostream* log = nullptr) {
  cfg.validate();
  LoadedDataset ds = load_dataset(data_dir);
  const NormStats norm = compute_norm_stats(ds.train_patches);
  std::vector<Patch> tr_norm, va_norm;
  for (const auto& p : ds.train_patches) tr_norm.push_back(normalize(p, norm));
  for (const auto& p : ds.val_patches) va_norm.push_back(normalize(p, norm));

  SegModel<float> model = build_model<float>(cfg.model, cfg.encoder, cfg.seed, cfg.aspp_rates);
  NamedParams<float> params, buffers;
  model.collect(params, buffers);
  AdamWState<float> opt;
  opt.lr = float(cfg.lr);
  opt.weight_decay = float(cfg.weight_decay);

  const size_t n_train = tr_norm.size();
  const size_t H = tr_norm[0].h, W = tr_norm[0].w;
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5346));
  const uint64_t aug_base = derive_seed(cfg.seed, 0xA796);
  const bool do_augment = !cfg.augment.is_identity();
  const LossConfig loss_cfg{cfg.beta, cfg.dice_eps};

  TrainResult result;
  double best_iou = -1.0;
  std::vector<size_t> order(n_train);
  std::iota(order.begin(), order.end(), size_t(0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = n_train; i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double loss_sum = 0;
    size_t seen = 0;
    for (size_t b0 = 0; b0 < n_train; b0 += size_t(cfg.batch_size)) {
      const size_t nb = std::min(size_t(cfg.batch_size), n_train - b0);
      Tensor<float> x = Tensor<float>::zeros({nb, kNumChannels, H, W});
      std::vector<MaskMap> targets(nb);
      for (size_t j = 0; j < nb; ++j) {
        const size_t idx = order[b0 + j];
        if (do_augment) {
          Rng arng(derive_seed(aug_base, (uint64_t(epoch) << 32) | idx));
          auto [ap, am] = augment(tr_norm[idx], ds.train_masks[idx], cfg.augment, arng);
          std::copy(ap.data.begin(), ap.data.end(), x.data() + j * kNumChannels * H * W);
          targets[j] = std::move(am);
        } else {
          std::copy(tr_norm[idx].data.begin(), tr_norm[idx].data.end(),
                    x.data() + j * kNumChannels * H * W);
          targets[j] = ds.train_masks[idx];
        }
      }

      GradTape<float> tape;
      TapeScope<float> scope(tape);
      x.requires_grad = false;
      Tensor<float> logits = model.forward(x, true);
      Tensor<float> loss = total_loss(logits, targets, loss_cfg);
      const double lv = double(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss " + std::to_string(lv) + " at epoch " +
                           std::to_string(epoch) + " batch " + std::to_string(b0 / cfg.batch_size));
      tape.backward(loss);
      adamw_step(params, opt);
      for (auto& [name, t] : params) t->zero_grad();
      loss_sum += lv * double(nb);
      seen += nb;
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / double(seen);
    es.val_iou = detail::validation_iou(model, va_norm, ds.val_masks);
    result.history.push_back(es);
    if (log)
      (*log) << "epoch " << epoch << " loss " << es.train_loss << " val_iou " << es.val_iou
             << "\n";

    if (es.val_iou > best_iou) {
      best_iou = es.val_iou;
      result.best = detail::snapshot(model, cfg, norm, epoch, es.val_iou);
    }
  }
  result.final =
      detail::snapshot(model, cfg, norm, cfg.epochs - 1, result.history.back().val_iou);
  if (result.best.tensors.empty()) result.best = result.final;
  return result;
}

}  // namespace terrafuse
