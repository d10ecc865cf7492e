#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "terrafuse/common.hpp"

namespace terrafuse {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

template <typename T>
class GradTape;

constexpr size_t kNoNode = size_t(-1);

/// N-dimensional array with shared storage. Copies alias the same buffer
/// (clone() for a deep copy), so gradient cells survive being captured by
/// tape closures. Axis order for 4-D data is N,C,H,W.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> store;
  std::shared_ptr<std::vector<T>> gcell;  // empty until ensure_grad()
  bool requires_grad = false;

  // interior-node bookkeeping, valid only for the tape generation below
  size_t node = kNoNode;
  uint64_t tape_gen = 0;

  Tensor() : store(std::make_shared<std::vector<T>>()), gcell(std::make_shared<std::vector<T>>()) {}

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.store->assign(numel(t.shape), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.store->begin(), t.store->end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values) {
    if (numel(s) != values.size())
      throw ShapeError("tensor init: " + shape_str(s) + " holds " + std::to_string(numel(s)) +
                       " values, got " + std::to_string(values.size()));
    Tensor t;
    t.shape = std::move(s);
    *t.store = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  size_t size() const { return store->size(); }
  size_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  T* data() { return store->data(); }
  const T* data() const { return store->data(); }

  T& operator[](size_t i) { return (*store)[i]; }
  const T& operator[](size_t i) const { return (*store)[i]; }

  /// 4-D accessor (N,C,H,W).
  T& at(size_t n, size_t c, size_t h, size_t w) {
    return (*store)[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(size_t n, size_t c, size_t h, size_t w) const {
    return (*store)[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  T item() const {
    if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
    return (*store)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    *t.store = *store;
    t.requires_grad = requires_grad;
    return t;
  }

  void ensure_grad() const {
    if (gcell->size() != size()) gcell->assign(size(), T(0));
  }

  void zero_grad() const {
    std::fill(gcell->begin(), gcell->end(), T(0));
  }

  bool has_grad() const { return gcell->size() == size(); }

  T* grad() const {
    ensure_grad();
    return gcell->data();
  }

  Tensor grad_tensor() const {
    ensure_grad();
    Tensor t;
    t.shape = shape;
    *t.store = *gcell;
    return t;
  }
};

/// Ordered record of executed ops. Execution order is already topological,
/// so backward() walks the record in reverse, visiting only nodes reachable
/// from the loss, each exactly once.
template <typename T>
class GradTape {
 public:
  GradTape() : gen_(next_gen()++) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape*& current() {
    thread_local GradTape* cur = nullptr;
    return cur;
  }

  uint64_t gen() const { return gen_; }
  size_t size() const { return nodes_.size(); }

  size_t record(std::vector<size_t> parents, std::function<void()> pull) {
    nodes_.push_back(Node{std::move(parents), std::move(pull)});
    return nodes_.size() - 1;
  }

  /// Seeds d(loss)/d(loss)=1 and pulls gradients back to every leaf.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
    loss.ensure_grad();
    loss.grad()[0] = T(1);
    if (loss.node == kNoNode || loss.tape_gen != gen_) return;  // leaf loss: nothing to pull
    std::vector<char> needed(nodes_.size(), 0);
    std::vector<size_t> stack{loss.node};
    needed[loss.node] = 1;
    while (!stack.empty()) {
      size_t id = stack.back();
      stack.pop_back();
      for (size_t p : nodes_[id].parents)
        if (!needed[p]) {
          needed[p] = 1;
          stack.push_back(p);
        }
    }
    for (size_t id = loss.node + 1; id-- > 0;)
      if (needed[id]) nodes_[id].pull();
  }

 private:
  struct Node {
    std::vector<size_t> parents;
    std::function<void()> pull;
  };

  static uint64_t& next_gen() {
    static uint64_t g = 1;
    return g;
  }

  std::vector<Node> nodes_;
  uint64_t gen_;
};

/// RAII scope making a tape the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : prev_(GradTape<T>::current()) {
    GradTape<T>::current() = &tape;
  }
  ~TapeScope() { GradTape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* prev_;
};

namespace detail {

template <typename T>
bool tracked(const Tensor<T>& t, const GradTape<T>* tape) {
  return t.requires_grad || (tape && t.node != kNoNode && t.tape_gen == tape->gen());
}

template <typename T>
void add_parent(std::vector<size_t>& parents, const Tensor<T>& t, const GradTape<T>* tape) {
  if (t.node != kNoNode && t.tape_gen == tape->gen()) parents.push_back(t.node);
}

template <typename T>
void debug_check_finite(const char* op, const Tensor<T>& t) {
#ifndef NDEBUG
  for (const T& v : *t.store)
    if (!std::isfinite(double(v))) throw NumericError(std::string(op) + ": non-finite forward output");
#else
  (void)op;
  (void)t;
#endif
}

}  // namespace detail

// ------------------------------------------------------------ conv kernels
//
// One cross-correlation geometry serves both convolution directions:
//   corr_fwd : y[n,co,ho,wo] += sum w[co,ci,r,c] * x[n,ci, ho*s-p+r*d, wo*s-p+c*d]
//   corr_din : scatter adjoint of corr_fwd w.r.t. x
//   corr_dw  : adjoint w.r.t. w
// conv_transpose2d's forward is corr_din (with its weight laid out Cin,Cout,kh,kw),
// which makes it the exact adjoint of conv2d by construction.

namespace kernels {

struct ConvGeom {
  size_t N, Ci, H, W, Co, kh, kw, Ho, Wo;
  int s, p, d;
};

// Valid output range for kernel tap (r,c): in = out*s - p + tap*d must land in [0, limit).
inline void tap_range(size_t tap, int s, int p, int d, size_t in_limit, size_t out_limit,
                      size_t& o0, size_t& o1) {
  long off = long(tap) * d - p;
  long lo = -off;  // out*s >= -off
  o0 = lo <= 0 ? 0 : size_t((lo + s - 1) / s);
  long hi = long(in_limit) - 1 - off;  // out*s <= hi
  if (hi < 0) {
    o0 = o1 = 0;
    return;
  }
  o1 = std::min(out_limit, size_t(hi / s) + 1);
  if (o0 > o1) o0 = o1;
}

template <typename T>
void corr_fwd(const T* x, const T* w, const T* bias, T* y, const ConvGeom& g) {
  const size_t xplane = g.H * g.W, yplane = g.Ho * g.Wo, wplane = g.kh * g.kw;
  for (size_t n = 0; n < g.N; ++n)
    for (size_t co = 0; co < g.Co; ++co) {
      T* yp = y + (n * g.Co + co) * yplane;
      if (bias) std::fill(yp, yp + yplane, bias[co]);
      for (size_t ci = 0; ci < g.Ci; ++ci) {
        const T* xp = x + (n * g.Ci + ci) * xplane;
        const T* wp = w + (co * g.Ci + ci) * wplane;
        for (size_t r = 0; r < g.kh; ++r)
          for (size_t c = 0; c < g.kw; ++c) {
            const T wv = wp[r * g.kw + c];
            if (wv == T(0)) continue;
            size_t ho0, ho1, wo0, wo1;
            tap_range(r, g.s, g.p, g.d, g.H, g.Ho, ho0, ho1);
            tap_range(c, g.s, g.p, g.d, g.W, g.Wo, wo0, wo1);
            const ptrdiff_t coff = ptrdiff_t(c) * g.d - g.p;
            for (size_t ho = ho0; ho < ho1; ++ho) {
              const T* xrow = xp + (ho * g.s + size_t(ptrdiff_t(r) * g.d - g.p)) * g.W;
              T* yrow = yp + ho * g.Wo;
              if (g.s == 1) {
                const T* xq = xrow + coff;
                for (size_t wo = wo0; wo < wo1; ++wo) yrow[wo] += wv * xq[wo];
              } else {
                for (size_t wo = wo0; wo < wo1; ++wo)
                  yrow[wo] += wv * xrow[ptrdiff_t(wo) * g.s + coff];
              }
            }
          }
      }
    }
}

template <typename T>
void corr_din(const T* dy, const T* w, T* dx, const ConvGeom& g) {
  const size_t xplane = g.H * g.W, yplane = g.Ho * g.Wo, wplane = g.kh * g.kw;
  for (size_t n = 0; n < g.N; ++n)
    for (size_t ci = 0; ci < g.Ci; ++ci) {
      T* dxp = dx + (n * g.Ci + ci) * xplane;
      for (size_t co = 0; co < g.Co; ++co) {
        const T* dyp = dy + (n * g.Co + co) * yplane;
        const T* wp = w + (co * g.Ci + ci) * wplane;
        for (size_t r = 0; r < g.kh; ++r)
          for (size_t c = 0; c < g.kw; ++c) {
            const T wv = wp[r * g.kw + c];
            if (wv == T(0)) continue;
            size_t ho0, ho1, wo0, wo1;
            tap_range(r, g.s, g.p, g.d, g.H, g.Ho, ho0, ho1);
            tap_range(c, g.s, g.p, g.d, g.W, g.Wo, wo0, wo1);
            const ptrdiff_t coff = ptrdiff_t(c) * g.d - g.p;
            for (size_t ho = ho0; ho < ho1; ++ho) {
              T* dxrow = dxp + (ho * g.s + size_t(ptrdiff_t(r) * g.d - g.p)) * g.W;
              const T* dyrow = dyp + ho * g.Wo;
              if (g.s == 1) {
                T* dxq = dxrow + coff;
                for (size_t wo = wo0; wo < wo1; ++wo) dxq[wo] += wv * dyrow[wo];
              } else {
                for (size_t wo = wo0; wo < wo1; ++wo)
                  dxrow[ptrdiff_t(wo) * g.s + coff] += wv * dyrow[wo];
              }
            }
          }
      }
    }
}

template <typename T>
void corr_dw(const T* x, const T* dy, T* dw, const ConvGeom& g) {
  const size_t xplane = g.H * g.W, yplane = g.Ho * g.Wo, wplane = g.kh * g.kw;
  for (size_t co = 0; co < g.Co; ++co)
    for (size_t ci = 0; ci < g.Ci; ++ci)
      for (size_t r = 0; r < g.kh; ++r)
        for (size_t c = 0; c < g.kw; ++c) {
          size_t ho0, ho1, wo0, wo1;
          tap_range(r, g.s, g.p, g.d, g.H, g.Ho, ho0, ho1);
          tap_range(c, g.s, g.p, g.d, g.W, g.Wo, wo0, wo1);
          const ptrdiff_t coff = ptrdiff_t(c) * g.d - g.p;
          T acc = 0;
          for (size_t n = 0; n < g.N; ++n) {
            const T* xp = x + (n * g.Ci + ci) * xplane;
            const T* dyp = dy + (n * g.Co + co) * yplane;
            for (size_t ho = ho0; ho < ho1; ++ho) {
              const T* xrow = xp + (ho * g.s + size_t(ptrdiff_t(r) * g.d - g.p)) * g.W;
              const T* dyrow = dyp + ho * g.Wo;
              if (g.s == 1) {
                const T* xq = xrow + coff;
                for (size_t wo = wo0; wo < wo1; ++wo) acc += xq[wo] * dyrow[wo];
              } else {
                for (size_t wo = wo0; wo < wo1; ++wo)
                  acc += xrow[ptrdiff_t(wo) * g.s + coff] * dyrow[wo];
              }
            }
          }
          dw[(co * g.Ci + ci) * wplane + r * g.kw + c] += acc;
        }
}

}  // namespace kernels

// ------------------------------------------------------------------- ops

/// 2-D convolution (cross-correlation), zero padding, optional dilation.
/// weight is (Cout,Cin,kh,kw); bias may be an empty tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding, int dilation = 1) {
  if (x.rank() != 4) throw ShapeError("conv2d: input rank " + std::to_string(x.rank()) + " != 4");
  if (w.rank() != 4) throw ShapeError("conv2d: weight rank " + std::to_string(w.rank()) + " != 4");
  if (stride < 1 || padding < 0 || dilation < 1)
    throw ShapeError("conv2d: stride/padding/dilation out of range");
  if (x.shape[1] != w.shape[1])
    throw ShapeError("conv2d: input channels " + std::to_string(x.shape[1]) +
                     " != weight in-channels " + std::to_string(w.shape[1]));
  const bool has_bias = b.size() > 0;
  if (has_bias && b.size() != w.shape[0])
    throw ShapeError("conv2d: bias length " + std::to_string(b.size()) + " != out channels " +
                     std::to_string(w.shape[0]));

  kernels::ConvGeom g;
  g.N = x.shape[0];
  g.Ci = x.shape[1];
  g.H = x.shape[2];
  g.W = x.shape[3];
  g.Co = w.shape[0];
  g.kh = w.shape[2];
  g.kw = w.shape[3];
  g.s = stride;
  g.p = padding;
  g.d = dilation;
  const long ho = (long(g.H) + 2 * padding - dilation * (long(g.kh) - 1) - 1) / stride + 1;
  const long wo = (long(g.W) + 2 * padding - dilation * (long(g.kw) - 1) - 1) / stride + 1;
  if (ho < 1 || wo < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                     " does not fit input height/width " + shape_str(x.shape));
  g.Ho = size_t(ho);
  g.Wo = size_t(wo);

  Tensor<T> y = Tensor<T>::zeros({g.N, g.Co, g.Ho, g.Wo});
  kernels::corr_fwd(x.data(), w.data(), has_bias ? b.data() : nullptr, y.data(), g);
  detail::debug_check_finite("conv2d", y);

  auto* tape = GradTape<T>::current();
  if (tape && (detail::tracked(x, tape) || detail::tracked(w, tape) || detail::tracked(b, tape))) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    detail::add_parent(parents, w, tape);
    detail::add_parent(parents, b, tape);
    const bool need_x = detail::tracked(x, tape);
    const bool need_w = detail::tracked(w, tape);
    const bool need_b = has_bias && detail::tracked(b, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      if (need_x) {
        x.ensure_grad();
        kernels::corr_din(dy, w.data(), x.gcell->data(), g);
      }
      if (need_w) {
        w.ensure_grad();
        kernels::corr_dw(x.data(), dy, w.gcell->data(), g);
      }
      if (need_b) {
        b.ensure_grad();
        T* db = b.gcell->data();
        for (size_t n = 0; n < g.N; ++n)
          for (size_t co = 0; co < g.Co; ++co) {
            const T* row = dy + (n * g.Co + co) * g.Ho * g.Wo;
            T acc = 0;
            for (size_t i = 0; i < g.Ho * g.Wo; ++i) acc += row[i];
            db[co] += acc;
          }
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding,
                 int dilation = 1) {
  return conv2d(x, w, Tensor<T>(), stride, padding, dilation);
}

/// Transposed convolution; weight is (Cin,Cout,kh,kw). Exact adjoint of the
/// conv2d sharing the same weight buffer.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv_transpose2d: rank != 4");
  if (stride < 1 || padding < 0) throw ShapeError("conv_transpose2d: bad stride/padding");
  if (x.shape[1] != w.shape[0])
    throw ShapeError("conv_transpose2d: input channels " + std::to_string(x.shape[1]) +
                     " != weight in-channels " + std::to_string(w.shape[0]));
  const bool has_bias = b.size() > 0;
  if (has_bias && b.size() != w.shape[1])
    throw ShapeError("conv_transpose2d: bias length " + std::to_string(b.size()) +
                     " != out channels " + std::to_string(w.shape[1]));

  // Geometry of the *adjoint* conv: x plays dY, output plays the conv input.
  kernels::ConvGeom g;
  g.N = x.shape[0];
  g.Co = x.shape[1];  // conv's out-channels
  g.Ho = x.shape[2];
  g.Wo = x.shape[3];
  g.Ci = w.shape[1];
  g.kh = w.shape[2];
  g.kw = w.shape[3];
  g.s = stride;
  g.p = padding;
  g.d = 1;
  const long h = (long(g.Ho) - 1) * stride - 2 * padding + long(g.kh);
  const long wd = (long(g.Wo) - 1) * stride - 2 * padding + long(g.kw);
  if (h < 1 || wd < 1) throw ShapeError("conv_transpose2d: empty output " + shape_str(x.shape));
  g.H = size_t(h);
  g.W = size_t(wd);

  // corr_* kernels expect conv-layout weights (Co_conv, Ci_conv, kh, kw) =
  // (Cin_t, Cout_t, kh, kw), which is exactly the transposed-conv layout.
  Tensor<T> y = Tensor<T>::zeros({g.N, g.Ci, g.H, g.W});
  kernels::corr_din(x.data(), w.data(), y.data(), g);
  if (has_bias) {
    T* yp = y.data();
    for (size_t n = 0; n < g.N; ++n)
      for (size_t c = 0; c < g.Ci; ++c) {
        T* plane = yp + (n * g.Ci + c) * g.H * g.W;
        for (size_t i = 0; i < g.H * g.W; ++i) plane[i] += b.data()[c];
      }
  }
  detail::debug_check_finite("conv_transpose2d", y);

  auto* tape = GradTape<T>::current();
  if (tape && (detail::tracked(x, tape) || detail::tracked(w, tape) || detail::tracked(b, tape))) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    detail::add_parent(parents, w, tape);
    detail::add_parent(parents, b, tape);
    const bool need_x = detail::tracked(x, tape);
    const bool need_w = detail::tracked(w, tape);
    const bool need_b = has_bias && detail::tracked(b, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      if (need_x) {
        x.ensure_grad();
        kernels::corr_fwd<T>(dy, w.data(), nullptr, x.gcell->data(), g);
      }
      if (need_w) {
        w.ensure_grad();
        kernels::corr_dw(dy, x.data(), w.gcell->data(), g);
      }
      if (need_b) {
        b.ensure_grad();
        T* db = b.gcell->data();
        for (size_t n = 0; n < g.N; ++n)
          for (size_t c = 0; c < g.Ci; ++c) {
            const T* plane = dy + (n * g.Ci + c) * g.H * g.W;
            T acc = 0;
            for (size_t i = 0; i < g.H * g.W; ++i) acc += plane[i];
            db[c] += acc;
          }
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
  return conv_transpose2d(x, w, Tensor<T>(), stride, padding);
}

/// Max pooling with floor semantics; ties route gradient to the first
/// element of the window (row-major scan order).
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: input rank != 4");
  if (k < 1 || stride < 1) throw ShapeError("maxpool2d: k and stride must be >= 1");
  const size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (size_t(k) > H || size_t(k) > W)
    throw ShapeError("maxpool2d: window " + std::to_string(k) + " exceeds input " +
                     shape_str(x.shape));
  const size_t Ho = (H - size_t(k)) / size_t(stride) + 1;
  const size_t Wo = (W - size_t(k)) / size_t(stride) + 1;

  Tensor<T> y = Tensor<T>::zeros({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<size_t>>(y.size());
  const T* xp = x.data();
  T* yp = y.data();
  size_t* ap = argmax->data();
  for (size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xp + nc * H * W;
    for (size_t ho = 0; ho < Ho; ++ho)
      for (size_t wo = 0; wo < Wo; ++wo) {
        size_t best = (ho * stride) * W + wo * stride;
        T bv = plane[best];
        for (int r = 0; r < k; ++r)
          for (int c = 0; c < k; ++c) {
            size_t idx = (ho * stride + r) * W + wo * stride + c;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        *yp++ = bv;
        *ap++ = nc * H * W + best;
      }
  }

  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T* dy = y.gcell->data();
      for (size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += dy[i];
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

namespace detail {

struct LerpIdx {
  size_t i0, i1;
  double w0, w1;
};

// align_corners=false source sampling for one axis.
inline std::vector<LerpIdx> lerp_table(size_t in, size_t out) {
  std::vector<LerpIdx> t(out);
  const double scale = double(in) / double(out);
  for (size_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    double fl = std::floor(src);
    size_t i0 = size_t(fl);
    if (i0 >= in - 1 && in > 0) i0 = in - 1;
    size_t i1 = std::min(i0 + 1, in - 1);
    double f = src - double(i0);
    if (f < 0) f = 0;
    if (f > 1) f = 1;
    t[o] = {i0, i1, 1.0 - f, f};
  }
  return t;
}

}  // namespace detail

/// Bilinear resize (align_corners=false). Linear in the input, so the
/// backward pass is the exact transpose of the interpolation.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, size_t out_h, size_t out_w) {
  if (x.rank() != 4) throw ShapeError("bilinear_upsample: input rank != 4");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: output dims must be >= 1");
  const size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  auto rows = std::make_shared<std::vector<detail::LerpIdx>>(detail::lerp_table(H, out_h));
  auto cols = std::make_shared<std::vector<detail::LerpIdx>>(detail::lerp_table(W, out_w));

  Tensor<T> y = Tensor<T>::zeros({N, C, out_h, out_w});
  const T* xp = x.data();
  T* yp = y.data();
  for (size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xp + nc * H * W;
    for (size_t oh = 0; oh < out_h; ++oh) {
      const auto& r = (*rows)[oh];
      for (size_t ow = 0; ow < out_w; ++ow) {
        const auto& c = (*cols)[ow];
        double v = r.w0 * (c.w0 * plane[r.i0 * W + c.i0] + c.w1 * plane[r.i0 * W + c.i1]) +
                   r.w1 * (c.w0 * plane[r.i1 * W + c.i0] + c.w1 * plane[r.i1 * W + c.i1]);
        *yp++ = T(v);
      }
    }
  }

  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T* dy = y.gcell->data();
      for (size_t nc = 0; nc < N * C; ++nc) {
        T* dplane = dx + nc * H * W;
        const T* dyp = dy + nc * out_h * out_w;
        for (size_t oh = 0; oh < out_h; ++oh) {
          const auto& r = (*rows)[oh];
          for (size_t ow = 0; ow < out_w; ++ow) {
            const auto& c = (*cols)[ow];
            const T g = dyp[oh * out_w + ow];
            dplane[r.i0 * W + c.i0] += T(r.w0 * c.w0) * g;
            dplane[r.i0 * W + c.i1] += T(r.w0 * c.w1) * g;
            dplane[r.i1 * W + c.i0] += T(r.w1 * c.w0) * g;
            dplane[r.i1 * W + c.i1] += T(r.w1 * c.w1) * g;
          }
        }
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

/// Batch normalization over (N,H,W) per channel. Training mode uses batch
/// statistics (biased variance) and updates running stats in place:
/// running = momentum*running + (1-momentum)*batch.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum = T(0.9), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d: input rank != 4");
  const size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C)
    throw ShapeError("batchnorm2d: per-channel parameter length != C=" + std::to_string(C));

  const size_t plane = H * W, cnt = N * plane;
  std::vector<T> mean(C), invstd(C);
  if (training) {
    for (size_t c = 0; c < C; ++c) {
      double m = 0;
      for (size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * plane;
        for (size_t i = 0; i < plane; ++i) m += double(p[i]);
      }
      m /= double(cnt);
      double v = 0;
      for (size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * plane;
        for (size_t i = 0; i < plane; ++i) {
          double d = double(p[i]) - m;
          v += d * d;
        }
      }
      v /= double(cnt);
      mean[c] = T(m);
      invstd[c] = T(1.0 / std::sqrt(v + double(eps)));
      running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * T(m);
      running_var[c] = momentum * running_var[c] + (T(1) - momentum) * T(v);
    }
  } else {
    for (size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }

  Tensor<T> y = Tensor<T>::zeros(x.shape);
  // xhat cached for the backward pass
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  for (size_t n = 0; n < N; ++n)
    for (size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * plane;
      T* q = y.data() + (n * C + c) * plane;
      T* hx = xhat->data() + (n * C + c) * plane;
      const T mu = mean[c], is = invstd[c], g = gamma[c], bb = beta[c];
      for (size_t i = 0; i < plane; ++i) {
        hx[i] = (p[i] - mu) * is;
        q[i] = g * hx[i] + bb;
      }
    }
  detail::debug_check_finite("batchnorm2d", y);

  auto* tape = GradTape<T>::current();
  if (tape &&
      (detail::tracked(x, tape) || detail::tracked(gamma, tape) || detail::tracked(beta, tape))) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    detail::add_parent(parents, gamma, tape);
    detail::add_parent(parents, beta, tape);
    const bool need_x = detail::tracked(x, tape);
    const bool need_g = detail::tracked(gamma, tape);
    const bool need_b = detail::tracked(beta, tape);
    auto istd = std::make_shared<std::vector<T>>(invstd);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      for (size_t c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (size_t n = 0; n < N; ++n) {
          const T* dq = dy + (n * C + c) * plane;
          const T* hx = xhat->data() + (n * C + c) * plane;
          for (size_t i = 0; i < plane; ++i) {
            sum_dy += double(dq[i]);
            sum_dy_xhat += double(dq[i]) * double(hx[i]);
          }
        }
        if (need_g) {
          gamma.ensure_grad();
          gamma.gcell->data()[c] += T(sum_dy_xhat);
        }
        if (need_b) {
          beta.ensure_grad();
          beta.gcell->data()[c] += T(sum_dy);
        }
        if (need_x) {
          x.ensure_grad();
          T* dx = x.gcell->data();
          const T g = gamma[c], is = (*istd)[c];
          if (training) {
            const T mdy = T(sum_dy / double(cnt));
            const T mdyx = T(sum_dy_xhat / double(cnt));
            for (size_t n = 0; n < N; ++n) {
              T* dxp = dx + (n * C + c) * plane;
              const T* dq = dy + (n * C + c) * plane;
              const T* hx = xhat->data() + (n * C + c) * plane;
              for (size_t i = 0; i < plane; ++i)
                dxp[i] += g * is * (dq[i] - mdy - hx[i] * mdyx);
            }
          } else {
            for (size_t n = 0; n < N; ++n) {
              T* dxp = dx + (n * C + c) * plane;
              const T* dq = dy + (n * C + c) * plane;
              for (size_t i = 0; i < plane; ++i) dxp[i] += g * is * dq[i];
            }
          }
        }
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("softmax_channels: input rank != 4");
  if (x.shape[1] != 3)
    throw ShapeError("softmax_channels: expected 3 class channels, got " +
                     std::to_string(x.shape[1]));
  const size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const size_t plane = H * W;
  Tensor<T> y = Tensor<T>::zeros(x.shape);
  for (size_t n = 0; n < N; ++n)
    for (size_t i = 0; i < plane; ++i) {
      T mx = x.data()[(n * C) * plane + i];
      for (size_t c = 1; c < C; ++c) mx = std::max(mx, x.data()[(n * C + c) * plane + i]);
      double denom = 0;
      for (size_t c = 0; c < C; ++c) {
        double e = std::exp(double(x.data()[(n * C + c) * plane + i] - mx));
        y.data()[(n * C + c) * plane + i] = T(e);
        denom += e;
      }
      for (size_t c = 0; c < C; ++c) y.data()[(n * C + c) * plane + i] /= T(denom);
    }

  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T* dy = y.gcell->data();
      const T* p = y.data();
      for (size_t n = 0; n < N; ++n)
        for (size_t i = 0; i < plane; ++i) {
          double dot = 0;
          for (size_t c = 0; c < C; ++c) {
            size_t k = (n * C + c) * plane + i;
            dot += double(dy[k]) * double(p[k]);
          }
          for (size_t c = 0; c < C; ++c) {
            size_t k = (n * C + c) * plane + i;
            dx[k] += p[k] * (dy[k] - T(dot));
          }
        }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape);
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T* dy = y.gcell->data();
      for (size_t i = 0; i < x.size(); ++i)
        if (x[i] > T(0)) dx[i] += dy[i];
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: shape " + shape_str(a.shape) + " != " + shape_str(b.shape));
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  for (size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  auto* tape = GradTape<T>::current();
  if (tape && (detail::tracked(a, tape) || detail::tracked(b, tape))) {
    std::vector<size_t> parents;
    detail::add_parent(parents, a, tape);
    detail::add_parent(parents, b, tape);
    const bool na = detail::tracked(a, tape), nb = detail::tracked(b, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      if (na) {
        a.ensure_grad();
        T* da = a.gcell->data();
        for (size_t i = 0; i < a.size(); ++i) da[i] += dy[i];
      }
      if (nb) {
        b.ensure_grad();
        T* db = b.gcell->data();
        for (size_t i = 0; i < b.size(); ++i) db[i] += dy[i];
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul: shape " + shape_str(a.shape) + " != " + shape_str(b.shape));
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  for (size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  auto* tape = GradTape<T>::current();
  if (tape && (detail::tracked(a, tape) || detail::tracked(b, tape))) {
    std::vector<size_t> parents;
    detail::add_parent(parents, a, tape);
    detail::add_parent(parents, b, tape);
    const bool na = detail::tracked(a, tape), nb = detail::tracked(b, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      if (na) {
        a.ensure_grad();
        T* da = a.gcell->data();
        for (size_t i = 0; i < a.size(); ++i) da[i] += dy[i] * b[i];
      }
      if (nb) {
        b.ensure_grad();
        T* db = b.gcell->data();
        for (size_t i = 0; i < b.size(); ++i) db[i] += dy[i] * a[i];
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T k) {
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  for (size_t i = 0; i < a.size(); ++i) y[i] = a[i] * k;
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(a, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, a, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      a.ensure_grad();
      T* da = a.gcell->data();
      const T* dy = y.gcell->data();
      for (size_t i = 0; i < a.size(); ++i) da[i] += dy[i] * k;
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

/// Concatenation along the channel axis (U-Net skips, ASPP branch merge).
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const size_t N = parts[0].shape[0], H = parts[0].shape[2], W = parts[0].shape[3];
  size_t C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.shape[0] != N || p.shape[2] != H || p.shape[3] != W)
      throw ShapeError("concat_channels: spatial/batch mismatch " + shape_str(p.shape));
    C += p.shape[1];
  }
  Tensor<T> y = Tensor<T>::zeros({N, C, H, W});
  const size_t plane = H * W;
  for (size_t n = 0; n < N; ++n) {
    size_t coff = 0;
    for (const auto& p : parts) {
      const size_t pc = p.shape[1];
      std::copy(p.data() + n * pc * plane, p.data() + (n + 1) * pc * plane,
                y.data() + (n * C + coff) * plane);
      coff += pc;
    }
  }

  auto* tape = GradTape<T>::current();
  bool any = false;
  if (tape)
    for (const auto& p : parts) any = any || detail::tracked(p, tape);
  if (tape && any) {
    std::vector<size_t> parents;
    for (const auto& p : parts) detail::add_parent(parents, p, tape);
    auto inputs = std::make_shared<std::vector<Tensor<T>>>(parts);
    std::vector<char> need;
    for (const auto& p : parts) need.push_back(detail::tracked(p, tape));
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      const T* dy = y.gcell->data();
      for (size_t n = 0; n < N; ++n) {
        size_t coff = 0;
        for (size_t k = 0; k < inputs->size(); ++k) {
          const auto& p = (*inputs)[k];
          const size_t pc = p.shape[1];
          if (need[k]) {
            p.ensure_grad();
            T* dp = p.gcell->data();
            const T* src = dy + (n * C + coff) * plane;
            T* dst = dp + n * pc * plane;
            for (size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
          }
          coff += pc;
        }
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return concat_channels(std::vector<Tensor<T>>{a, b});
}

/// Global average pooling (N,C,H,W) -> (N,C,1,1); the ASPP image-level branch.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input rank != 4");
  const size_t N = x.shape[0], C = x.shape[1], plane = x.shape[2] * x.shape[3];
  Tensor<T> y = Tensor<T>::zeros({N, C, 1, 1});
  for (size_t nc = 0; nc < N * C; ++nc) {
    double acc = 0;
    const T* p = x.data() + nc * plane;
    for (size_t i = 0; i < plane; ++i) acc += double(p[i]);
    y[nc] = T(acc / double(plane));
  }
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T* dy = y.gcell->data();
      for (size_t nc = 0; nc < N * C; ++nc) {
        const T g = dy[nc] / T(plane);
        T* dp = dx + nc * plane;
        for (size_t i = 0; i < plane; ++i) dp[i] += g;
      }
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

/// Mean over all elements -> scalar tensor.
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros({1});
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i) acc += double(x[i]);
  y[0] = T(acc / double(x.size()));
  auto* tape = GradTape<T>::current();
  if (tape && detail::tracked(x, tape)) {
    std::vector<size_t> parents;
    detail::add_parent(parents, x, tape);
    y.ensure_grad();
    y.node = tape->record(std::move(parents), [=]() {
      x.ensure_grad();
      T* dx = x.gcell->data();
      const T g = y.gcell->data()[0] / T(x.size());
      for (size_t i = 0; i < x.size(); ++i) dx[i] += g;
    });
    y.tape_gen = tape->gen();
  }
  return y;
}

// ---------------------------------------------------------------- AdamW

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

/// Decoupled weight decay Adam. Moment buffers are keyed by parameter
/// position and created lazily on the first step.
template <typename T>
struct AdamWState {
  T lr = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0.01);
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <typename T>
void adamw_step(const NamedParams<T>& params, AdamWState<T>& st) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].second->size(), T(0));
      st.v[i].assign(params[i].second->size(), T(0));
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adamw_step: state/parameter count mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(double(st.beta1), double(st.step));
  const double bc2 = 1.0 - std::pow(double(st.beta2), double(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    if (st.m[i].size() != p.size()) throw ShapeError("adamw_step: moment shape mismatch for " + params[i].first);
    p.ensure_grad();
    const T* g = p.gcell->data();
    for (size_t j = 0; j < p.size(); ++j)
      if (!std::isfinite(double(g[j])))
        throw NumericError("adamw_step: non-finite gradient in parameter '" + params[i].first + "'");
    T* w = p.data();
    T* m = st.m[i].data();
    T* v = st.v[i].data();
    for (size_t j = 0; j < p.size(); ++j) {
      w[j] -= st.lr * st.weight_decay * w[j];
      m[j] = st.beta1 * m[j] + (T(1) - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (T(1) - st.beta2) * g[j] * g[j];
      const double mhat = double(m[j]) / bc1;
      const double vhat = double(v[j]) / bc2;
      w[j] -= T(double(st.lr) * mhat / (std::sqrt(vhat) + double(st.eps)));
    }
  }
}

}  // namespace terrafuse
