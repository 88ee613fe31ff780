#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "pccnn/autodiff.hpp"
#include "pccnn/conv.hpp"

/// Differentiable primitives. Every function takes and returns Vars on the
/// same Tape; the backward closure accumulates into input gradients.
namespace pccnn::ad {

namespace detail {

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* what) {
  if (a.tape != b.tape) throw ValidationError(std::string(what) + ": operands live on different tapes");
}

// Applies f elementwise and records df(x, y) as the local derivative.
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const int xi = x.index;
  return x.tape->record(std::move(y), x.requires_grad(), [xi, df](Tape<T>& t, int self) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& yv = t.value(self);
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

/// Cross-correlation with per-output-channel bias. `tap_mask` (shape
/// [kh, kw]) zeroes kernel taps; it is how masked convolutions are expressed.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Padding pad,
              std::optional<std::type_identity_t<Tensor<T>>> tap_mask = std::nullopt) {
  detail::same_tape(x, w, "conv2d");
  detail::same_tape(x, b, "conv2d");
  const auto g = pccnn::detail::conv_geometry(x.shape(), w.shape(), pad);
  if (b.value().size() != static_cast<std::size_t>(g.channels_out)) {
    throw ValidationError("conv2d: bias " + to_string(b.shape()) + " does not match kernel " +
                          to_string(w.shape()));
  }
  const bool masked = tap_mask.has_value();
  if (masked && (tap_mask->rank() != 2 || tap_mask->dim(0) != g.kh || tap_mask->dim(1) != g.kw)) {
    throw ValidationError("conv2d: tap mask " + to_string(tap_mask->shape()) + " does not match kernel " +
                          to_string(w.shape()));
  }
  auto apply_mask = [g](Tensor<T>& kernel, const Tensor<T>& m) {
    const std::size_t taps = static_cast<std::size_t>(g.kh) * g.kw;
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] *= m[i % taps];
  };
  Tensor<T> effective;
  if (masked) {
    effective = w.value();
    apply_mask(effective, *tap_mask);
  }
  const Tensor<T>& kernel = masked ? effective : w.value();
  Tensor<T> y({x.value().dim(0), g.channels_out, g.out_h, g.out_w});
  pccnn::detail::conv_forward(x.value(), kernel, b.value(), g, y);

  const int xi = x.index, wi = w.index, bi = b.index;
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return x.tape->record(
      std::move(y), rg,
      [=, mask = std::move(tap_mask), effective = std::move(effective)](Tape<T>& t, int self) {
        const Tensor<T>& kern = mask ? effective : t.value(wi);
        Tensor<T>* dx = t.requires_grad(xi) ? &t.grad(xi) : nullptr;
        Tensor<T>* db = t.requires_grad(bi) ? &t.grad(bi) : nullptr;
        Tensor<T> dw_local;
        Tensor<T>* dw = nullptr;
        if (t.requires_grad(wi)) {
          if (mask) {
            dw_local = Tensor<T>(t.value(wi).shape());
            dw = &dw_local;
          } else {
            dw = &t.grad(wi);
          }
        }
        pccnn::detail::conv_backward(t.value(xi), kern, t.grad(self), g, dx, dw, db);
        if (mask && dw) {
          apply_mask(dw_local, *mask);
          Tensor<T>& gw = t.grad(wi);
          for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dw_local[i];
        }
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const int ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), a.requires_grad() || b.requires_grad(), [ai, bi](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    for (int src : {ai, bi}) {
      if (!t.requires_grad(src)) continue;
      Tensor<T>& g = t.grad(src);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const int ai = a.index, bi = b.index;
  return a.tape->record(std::move(y), a.requires_grad() || b.requires_grad(), [ai, bi](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor<T>& g = t.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& g = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return detail::unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(
      x, [](T v) { return T{1} / (T{1} + std::exp(-v)); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

/// Channels [start, start + count) of an NCHW tensor.
template <typename T>
Var<T> slice_channels(Var<T> x, int start, int count) {
  const Shape& s = x.shape();
  if (s.size() != 4 || start < 0 || count < 1 || start + count > s[1]) {
    throw ValidationError("slice_channels: range [" + std::to_string(start) + ", " +
                          std::to_string(start + count) + ") invalid for shape " + to_string(s));
  }
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> y({s[0], count, s[2], s[3]});
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < s[0]; ++n) {
    const T* src = xv.ptr() + (static_cast<std::size_t>(n) * s[1] + start) * plane;
    std::copy(src, src + count * plane, y.ptr() + static_cast<std::size_t>(n) * count * plane);
  }
  const int xi = x.index;
  return x.tape->record(std::move(y), x.requires_grad(), [=](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (int n = 0; n < s[0]; ++n) {
      T* dst = gx.ptr() + (static_cast<std::size_t>(n) * s[1] + start) * plane;
      const T* src = gy.ptr() + static_cast<std::size_t>(n) * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

/// Moves every row down by one; the top row becomes zero.
template <typename T>
Var<T> shift_down(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ValidationError("shift_down: expected NCHW, got " + to_string(s));
  const int h = s[2], w = s[3];
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  Tensor<T> y(s);
  const Tensor<T>& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.ptr() + p * h * w;
    std::copy(src, src + static_cast<std::size_t>(h - 1) * w, y.ptr() + p * h * w + w);
  }
  const int xi = x.index;
  return x.tape->record(std::move(y), x.requires_grad(), [=](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = gy.ptr() + p * h * w + w;
      T* dst = gx.ptr() + p * h * w;
      for (std::size_t i = 0; i < static_cast<std::size_t>(h - 1) * w; ++i) dst[i] += src[i];
    }
  });
}

/// Gated activation: first half of the channels through tanh, second half
/// through a sigmoid, multiplied. [N, 2F, H, W] -> [N, F, H, W].
template <typename T>
Var<T> gate(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] % 2 != 0) {
    throw ValidationError("gate: expected NCHW with an even channel count, got " + to_string(s));
  }
  const int f = s[1] / 2;
  const std::size_t half = static_cast<std::size_t>(f) * s[2] * s[3];
  Tensor<T> y({s[0], f, s[2], s[3]});
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < s[0]; ++n) {
    const T* a = xv.ptr() + 2 * half * n;
    const T* b = a + half;
    T* out = y.ptr() + half * n;
    for (std::size_t i = 0; i < half; ++i) out[i] = std::tanh(a[i]) / (T{1} + std::exp(-b[i]));
  }
  const int xi = x.index;
  return x.tape->record(std::move(y), x.requires_grad(), [=](Tape<T>& t, int self) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (int n = 0; n < s[0]; ++n) {
      const T* a = xv.ptr() + 2 * half * n;
      const T* b = a + half;
      T* ga = gx.ptr() + 2 * half * n;
      T* gb = ga + half;
      const T* g = gy.ptr() + half * n;
      for (std::size_t i = 0; i < half; ++i) {
        const T th = std::tanh(a[i]);
        const T sg = T{1} / (T{1} + std::exp(-b[i]));
        ga[i] += g[i] * (T{1} - th * th) * sg;
        gb[i] += g[i] * th * sg * (T{1} - sg);
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total{};
  for (T v : x.value().data()) total += v;
  const int xi = x.index;
  return x.tape->record(Tensor<T>({1}, std::vector<T>{total}), x.requires_grad(), [xi](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// Weighted mean negative log-likelihood of categorical targets.
///
/// logits: [N, C*K, H, W], channel c*K + k holds level k of image channel c.
/// targets: N*C*H*W levels in NCHW order. weights: [N, C, H, W], >= 0.
/// Returns sum(w * -log softmax(logits)[target]) / sum(w), or 0 if sum(w) = 0.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> targets, const Tensor<T>& weights, int levels) {
  const Shape& s = logits.shape();
  if (s.size() != 4 || levels < 2 || s[1] % levels != 0) {
    throw ValidationError("softmax_cross_entropy: logits " + to_string(s) + " incompatible with K=" +
                          std::to_string(levels));
  }
  const int n = s[0], c = s[1] / levels, h = s[2], w = s[3];
  const Shape ts{n, c, h, w};
  if (weights.shape() != ts || targets.size() != element_count(ts)) {
    throw ValidationError("softmax_cross_entropy: targets/weights must have shape " + to_string(ts) +
                          ", got weights " + to_string(weights.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  T weight_sum{};
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < T{0}) throw ValidationError("softmax_cross_entropy: negative pixel weight");
    if (targets[i] < 0 || targets[i] >= levels) {
      throw ValidationError("softmax_cross_entropy: target level " + std::to_string(targets[i]) +
                            " outside [0, " + std::to_string(levels - 1) + "]");
    }
    weight_sum += weights[i];
  }
  const Tensor<T>& lv = logits.value();
  // Softmax probabilities kept for the backward pass.
  Tensor<T> probs(s);
  T total{};
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t ti = (static_cast<std::size_t>(b) * c + ch) * plane + p;
        auto idx = [&](int k) { return (static_cast<std::size_t>(b) * s[1] + ch * levels + k) * plane + p; };
        T mx = lv[idx(0)];
        for (int k = 1; k < levels; ++k) mx = std::max(mx, lv[idx(k)]);
        T z{};
        for (int k = 0; k < levels; ++k) z += std::exp(lv[idx(k)] - mx);
        const T log_z = mx + std::log(z);
        for (int k = 0; k < levels; ++k) probs[idx(k)] = std::exp(lv[idx(k)] - log_z);
        if (weights[ti] > T{0}) total += weights[ti] * (log_z - lv[idx(targets[ti])]);
      }
    }
  }
  const T value = weight_sum > T{0} ? total / weight_sum : T{0};
  const int li = logits.index;
  std::vector<int> tgt(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor<T>({1}, std::vector<T>{value}), logits.requires_grad(),
      [=, probs = std::move(probs), tgt = std::move(tgt), weights = weights](Tape<T>& t, int self) {
        if (!(weight_sum > T{0})) return;
        const T g = t.grad(self)[0] / weight_sum;
        Tensor<T>& gl = t.grad(li);
        for (int b = 0; b < n; ++b) {
          for (int ch = 0; ch < c; ++ch) {
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t ti = (static_cast<std::size_t>(b) * c + ch) * plane + p;
              const T wgt = weights[ti];
              if (wgt == T{0}) continue;
              for (int k = 0; k < levels; ++k) {
                const std::size_t li2 = (static_cast<std::size_t>(b) * s[1] + ch * levels + k) * plane + p;
                gl[li2] += g * wgt * (probs[li2] - (k == tgt[ti] ? T{1} : T{0}));
              }
            }
          }
        }
      });
}

}  // namespace pccnn::ad
