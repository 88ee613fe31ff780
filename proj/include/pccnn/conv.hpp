#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <vector>

#include "pccnn/tensor.hpp"

namespace pccnn {

/// Zero padding applied on each side of the input before cross-correlation.
struct Padding {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  static Padding same(int kh, int kw) { return {kh / 2, kh / 2, kw / 2, kw / 2}; }
  friend bool operator==(const Padding&, const Padding&) = default;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int channels_in, height, width;
  int channels_out, kh, kw;
  Padding pad;
  int out_h, out_w;

  int taps() const { return channels_in * kh * kw; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && pad == Padding{} && out_h == height && out_w == width;
  }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const Padding& pad) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ValidationError("conv2d: expected NCHW input and OIKhKw kernel, got " + to_string(input) +
                          " and " + to_string(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ValidationError("conv2d: input " + to_string(input) + " has " + std::to_string(input[1]) +
                          " channels but kernel " + to_string(kernel) + " expects " +
                          std::to_string(kernel[1]));
  }
  ConvGeometry g{input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], pad, 0, 0};
  g.out_h = g.height + pad.top + pad.bottom - g.kh + 1;
  g.out_w = g.width + pad.left + pad.right - g.kw + 1;
  if (g.out_h < 1 || g.out_w < 1) {
    throw ValidationError("conv2d: kernel " + to_string(kernel) + " larger than padded input " +
                          to_string(input));
  }
  return g;
}

// cols[(ci*kh + i)*kw + j][oy*out_w + ox] = x[ci][oy - top + i][ox - left + j]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const int plane = g.out_h * g.out_w;
  for (int ci = 0; ci < g.channels_in; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = cols + static_cast<std::size_t>((ci * g.kh + i) * g.kw + j) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy - g.pad.top + i;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(dst, dst + g.out_w, T{});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(y) * g.width;
          const int shift = j - g.pad.left;
          const int lo = std::max(0, -shift);
          const int hi = std::min(g.out_w, g.width - shift);
          std::fill(dst, dst + lo, T{});
          if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
          std::fill(dst + std::max(hi, lo), dst + g.out_w, T{});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const int plane = g.out_h * g.out_w;
  for (int ci = 0; ci < g.channels_in; ++ci) {
    T* xc = dx + static_cast<std::size_t>(ci) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row = cols + static_cast<std::size_t>((ci * g.kh + i) * g.kw + j) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy - g.pad.top + i;
          if (y < 0 || y >= g.height) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = xc + static_cast<std::size_t>(y) * g.width;
          const int shift = j - g.pad.left;
          const int lo = std::max(0, -shift);
          const int hi = std::min(g.out_w, g.width - shift);
          for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
        }
      }
    }
  }
}

/// y[n] = W * cols(x[n]) + b
template <typename T>
void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& g,
                  Tensor<T>& y) {
  const int batch = x.dim(0);
  const int plane = g.out_h * g.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(g.channels_in) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(g.channels_out) * plane;
  ConstMatMap<T> wm(w.ptr(), g.channels_out, g.taps());
  AlignedVector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.taps()) * plane);
  for (int n = 0; n < batch; ++n) {
    const T* xn = x.ptr() + n * in_stride;
    const T* colp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols.data());
      colp = cols.data();
    }
    ConstMatMap<T> cm(colp, g.taps(), plane);
    MatMap<T> ym(y.ptr() + n * out_stride, g.channels_out, plane);
    ym.noalias() = wm * cm;
    for (int o = 0; o < g.channels_out; ++o) ym.row(o).array() += b[static_cast<std::size_t>(o)];
  }
}

/// Accumulates input, weight and bias gradients. Null outputs are skipped.
template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, const ConvGeometry& g,
                   Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const int batch = x.dim(0);
  const int plane = g.out_h * g.out_w;
  const std::size_t in_stride = static_cast<std::size_t>(g.channels_in) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(g.channels_out) * plane;
  ConstMatMap<T> wm(w.ptr(), g.channels_out, g.taps());
  const bool pw = g.pointwise();
  AlignedVector<T> cols(pw ? 0 : static_cast<std::size_t>(g.taps()) * plane);
  AlignedVector<T> dcols(pw || !dx ? 0 : static_cast<std::size_t>(g.taps()) * plane);
  RowMatrix<T> dw_acc;
  if (dw) dw_acc = RowMatrix<T>::Zero(g.channels_out, g.taps());
  for (int n = 0; n < batch; ++n) {
    ConstMatMap<T> dym(dy.ptr() + n * out_stride, g.channels_out, plane);
    const T* xn = x.ptr() + n * in_stride;
    if (db) {
      for (int o = 0; o < g.channels_out; ++o) (*db)[static_cast<std::size_t>(o)] += dym.row(o).sum();
    }
    if (dw) {
      const T* colp = xn;
      if (!pw) {
        im2col(xn, g, cols.data());
        colp = cols.data();
      }
      ConstMatMap<T> cm(colp, g.taps(), plane);
      dw_acc.noalias() += dym * cm.transpose();
    }
    if (dx) {
      T* dxn = dx->ptr() + n * in_stride;
      if (pw) {
        MatMap<T> dxm(dxn, g.taps(), plane);
        dxm.noalias() += wm.transpose() * dym;
      } else {
        MatMap<T> dcm(dcols.data(), g.taps(), plane);
        dcm.noalias() = wm.transpose() * dym;
        col2im_add(dcols.data(), g, dxn);
      }
    }
  }
  if (dw) {
    MatMap<T> dwm(dw->ptr(), g.channels_out, g.taps());
    dwm += dw_acc;
  }
}

}  // namespace detail
}  // namespace pccnn
