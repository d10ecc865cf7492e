#pragma once

#include <cmath>
#include <vector>

#include "terrafuse/data.hpp"
#include "terrafuse/tensor.hpp"

namespace terrafuse {

struct LossConfig {
  double beta = 0.5;     // weight on cross-entropy; (1-beta) on dice
  double dice_eps = 1.0;
};

namespace detail {

template <typename T>
inline void check_targets(const Tensor<T>& x, const std::vector<MaskMap>& targets) {
  if (x.rank() != 4) throw ShapeError("loss input must be NCHW, got rank " + std::to_string(x.rank()));
  if (x.dim(1) != size_t(kNumClasses))
    throw ShapeError("loss input must have " + std::to_string(kNumClasses) + " channels, got " +
                     std::to_string(x.dim(1)));
  if (targets.size() != x.dim(0))
    throw ShapeError("batch mismatch: " + std::to_string(x.dim(0)) + " inputs vs " +
                     std::to_string(targets.size()) + " masks");
  for (const auto& m : targets) {
    if (m.h != x.dim(2) || m.w != x.dim(3))
      throw ShapeError("mask size " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                       " does not match input " + std::to_string(x.dim(2)) + "x" +
                       std::to_string(x.dim(3)));
    for (uint8_t v : m.v)
      if (v >= kNumClasses)
        throw InvalidClassError("target value " + std::to_string(int(v)) + " outside {0,1,2}");
  }
}

}  // namespace detail

/// Mean per-pixel cross-entropy on raw logits (log-softmax fused for
/// stability). Gradient: (softmax - onehot) / n_pixels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<MaskMap>& targets) {
  detail::check_targets(logits, targets);
  const size_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const size_t plane = H * W, npix = N * plane;

  auto probs = std::make_shared<std::vector<T>>(logits.size());
  double total = 0;
  const T* xp = logits.data();
  for (size_t n = 0; n < N; ++n) {
    const T* base = xp + n * C * plane;
    for (size_t i = 0; i < plane; ++i) {
      T mx = base[i];
      for (size_t c = 1; c < C; ++c) mx = std::max(mx, base[c * plane + i]);
      double denom = 0;
      for (size_t c = 0; c < C; ++c) denom += std::exp(double(base[c * plane + i] - mx));
      const double log_denom = std::log(denom);
      for (size_t c = 0; c < C; ++c)
        (*probs)[n * C * plane + c * plane + i] =
            T(std::exp(double(base[c * plane + i] - mx)) / denom);
      const uint8_t t = targets[n].v[i];
      total += log_denom - double(base[t * plane + i] - mx);
    }
  }

  Tensor<T> out = Tensor<T>::scalar(T(total / double(npix)));
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(logits, tape)) {
    out.requires_grad = true;
    out.ensure_grad();
    logits.ensure_grad();
    std::vector<size_t> parents;
    detail::add_parent(parents, logits, tape);
    auto tgt = targets;  // own a copy; masks are tiny
    out.node = tape->record(std::move(parents), [logits, out, probs, tgt, N, C, plane, npix]() {
      const T g = out.grad()[0] / T(npix);
      T* dx = logits.grad();
      for (size_t n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
          const uint8_t t = tgt[n].v[i];
          for (size_t c = 0; c < C; ++c) {
            const size_t at = n * C * plane + c * plane + i;
            dx[at] += g * ((*probs)[at] - (c == t ? T(1) : T(0)));
          }
        }
    });
    out.tape_gen = tape->gen();
  }
  return out;
}

/// Soft dice loss on class probabilities, averaged over all 3 classes with
/// batch-joint sums: per class, loss_c = 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps).
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const std::vector<MaskMap>& targets,
                         double eps = 1.0) {
  detail::check_targets(probs, targets);
  const size_t N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  const size_t plane = H * W;

  std::vector<double> A(C), B(C);  // A = 2*sum(p*y)+eps, B = sum(p)+sum(y)+eps
  for (size_t c = 0; c < C; ++c) {
    double tp = 0, sp = 0, sy = 0;
    for (size_t n = 0; n < N; ++n) {
      const T* pc = probs.data() + n * C * plane + c * plane;
      const auto& m = targets[n].v;
      for (size_t i = 0; i < plane; ++i) {
        const double y = (m[i] == c) ? 1.0 : 0.0;
        tp += double(pc[i]) * y;
        sp += double(pc[i]);
        sy += y;
      }
    }
    A[c] = 2.0 * tp + eps;
    B[c] = sp + sy + eps;
  }
  double loss = 0;
  for (size_t c = 0; c < C; ++c) loss += 1.0 - A[c] / B[c];
  loss /= double(C);

  Tensor<T> out = Tensor<T>::scalar(T(loss));
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(probs, tape)) {
    out.requires_grad = true;
    out.ensure_grad();
    probs.ensure_grad();
    std::vector<size_t> parents;
    detail::add_parent(parents, probs, tape);
    auto tgt = targets;
    out.node = tape->record(std::move(parents), [probs, out, tgt, A, B, N, C, plane]() {
      const double g = double(out.grad()[0]) / double(C);
      T* dp = probs.grad();
      for (size_t c = 0; c < C; ++c) {
        const double invB = 1.0 / B[c];
        const double AoverB2 = A[c] * invB * invB;
        for (size_t n = 0; n < N; ++n) {
          const auto& m = tgt[n].v;
          T* d = dp + n * C * plane + c * plane;
          for (size_t i = 0; i < plane; ++i) {
            const double y = (m[i] == c) ? 1.0 : 0.0;
            // d(1 - A/B)/dp = (A - 2yB) / B^2
            d[i] += T(g * (AoverB2 - 2.0 * y * invB));
          }
        }
      }
    });
    out.tape_gen = tape->gen();
  }
  return out;
}

/// beta * CE(logits) + (1-beta) * Dice(softmax(logits)).
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, const std::vector<MaskMap>& targets,
                     const LossConfig& cfg = {}) {
  if (cfg.beta < 0.0 || cfg.beta > 1.0)
    throw Error("loss beta must be in [0,1], got " + std::to_string(cfg.beta));
  Tensor<T> ce = cross_entropy(logits, targets);
  Tensor<T> dice = soft_dice_loss(softmax_channels(logits), targets, cfg.dice_eps);
  return add(scale(ce, T(cfg.beta)), scale(dice, T(1.0 - cfg.beta)));
}

}  // namespace terrafuse
