#pragma once

// Differentiable tensor operations over NC[D]HW layouts.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/autograd.hpp"
#include "dbs/tensor.hpp"

namespace dbs {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Convolution geometry over (depth, height, width). 2D convolutions use depth extent 1.
struct ConvSpec {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
  int groups = 1;

  static ConvSpec conv2d(int stride, int pad, int groups = 1) {
    return ConvSpec{{1, stride, stride}, {0, pad, pad}, groups};
  }
  static ConvSpec conv3d(int stride, int pad, int groups = 1) {
    return ConvSpec{{stride, stride, stride}, {pad, pad, pad}, groups};
  }
};

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

struct Geometry3 {
  int c, d, h, w;           // input channels per group and spatial extents
  int kd, kh, kw;
  int od, oh, ow;
  std::array<int, 3> s, p;
  int rows() const { return c * kd * kh * kw; }
  int cols() const { return od * oh * ow; }
};

template <class T>
void vol2col(const T* x, const Geometry3& g, T* out) {
  const int P = g.cols();
  const int plane = g.oh * g.ow;
  int row = 0;
  for (int c = 0; c < g.c; ++c)
    for (int a = 0; a < g.kd; ++a)
      for (int b = 0; b < g.kh; ++b)
        for (int e = 0; e < g.kw; ++e, ++row) {
          T* dst = out + static_cast<std::size_t>(row) * P;
          const int lo = std::clamp((g.p[2] - e + g.s[2] - 1) / g.s[2], 0, g.ow);
          const int hi = std::clamp((g.w + g.p[2] - e + g.s[2] - 1) / g.s[2], lo, g.ow);
          for (int od = 0; od < g.od; ++od) {
            const int id = od * g.s[0] - g.p[0] + a;
            T* dplane = dst + static_cast<std::size_t>(od) * plane;
            if (id < 0 || id >= g.d) {
              std::fill(dplane, dplane + plane, T{0});
              continue;
            }
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.s[1] - g.p[1] + b;
              T* drow = dplane + static_cast<std::size_t>(oh) * g.ow;
              if (ih < 0 || ih >= g.h) {
                std::fill(drow, drow + g.ow, T{0});
                continue;
              }
              const T* src = x + ((static_cast<std::size_t>(c) * g.d + id) * g.h + ih) * g.w;
              std::fill(drow, drow + lo, T{0});
              if (g.s[2] == 1) {
                std::memcpy(drow + lo, src + lo - g.p[2] + e, sizeof(T) * (hi - lo));
              } else {
                for (int ow = lo; ow < hi; ++ow) drow[ow] = src[ow * g.s[2] - g.p[2] + e];
              }
              std::fill(drow + hi, drow + g.ow, T{0});
            }
          }
        }
}

template <class T>
void col2vol_add(const T* cols, const Geometry3& g, T* dx) {
  const int P = g.cols();
  const int plane = g.oh * g.ow;
  int row = 0;
  for (int c = 0; c < g.c; ++c)
    for (int a = 0; a < g.kd; ++a)
      for (int b = 0; b < g.kh; ++b)
        for (int e = 0; e < g.kw; ++e, ++row) {
          const T* src = cols + static_cast<std::size_t>(row) * P;
          const int lo = std::clamp((g.p[2] - e + g.s[2] - 1) / g.s[2], 0, g.ow);
          const int hi = std::clamp((g.w + g.p[2] - e + g.s[2] - 1) / g.s[2], lo, g.ow);
          for (int od = 0; od < g.od; ++od) {
            const int id = od * g.s[0] - g.p[0] + a;
            if (id < 0 || id >= g.d) continue;
            for (int oh = 0; oh < g.oh; ++oh) {
              const int ih = oh * g.s[1] - g.p[1] + b;
              if (ih < 0 || ih >= g.h) continue;
              const T* srow = src + static_cast<std::size_t>(od) * plane + static_cast<std::size_t>(oh) * g.ow;
              T* drow = dx + ((static_cast<std::size_t>(c) * g.d + id) * g.h + ih) * g.w;
              for (int ow = lo; ow < hi; ++ow) drow[ow * g.s[2] - g.p[2] + e] += srow[ow];
            }
          }
        }
}

inline bool is_pointwise(const Geometry3& g) {
  return g.kd == 1 && g.kh == 1 && g.kw == 1 && g.s == std::array<int, 3>{1, 1, 1} &&
         g.p == std::array<int, 3>{0, 0, 0};
}

}  // namespace detail

// Grouped convolution over N x C x D x H x W input with weight O x (C/groups) x kD x kH x kW.
// `bias` may be undefined.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
  const Tensor<T>& X = x.value();
  const Tensor<T>& Wt = weight.value();
  if (X.ndim() != 5 || Wt.ndim() != 5)
    throw std::invalid_argument("conv3d expects 5-d input and weight, got " + shape_str(X.shape()) +
                                " and " + shape_str(Wt.shape()));
  const int N = X.dim(0), C = X.dim(1), O = Wt.dim(0), G = spec.groups;
  if (G < 1 || C % G != 0 || O % G != 0)
    throw std::invalid_argument("conv: channels " + std::to_string(C) + "->" + std::to_string(O) +
                                " not divisible by groups " + std::to_string(G));
  if (Wt.dim(1) != C / G)
    throw std::invalid_argument("conv: weight expects " + std::to_string(Wt.dim(1) * G) +
                                " input channels, got " + std::to_string(C));
  if (bias.defined() && (bias.value().ndim() != 1 || bias.value().dim(0) != O))
    throw std::invalid_argument("conv: bias shape mismatch");

  detail::Geometry3 g{C / G, X.dim(2), X.dim(3), X.dim(4), Wt.dim(2), Wt.dim(3), Wt.dim(4),
                      0, 0, 0, spec.stride, spec.pad};
  g.od = conv_out_size(g.d, g.kd, g.s[0], g.p[0]);
  g.oh = conv_out_size(g.h, g.kh, g.s[1], g.p[1]);
  g.ow = conv_out_size(g.w, g.kw, g.s[2], g.p[2]);
  if (g.od < 1 || g.oh < 1 || g.ow < 1)
    throw std::invalid_argument("conv: kernel larger than padded input " + shape_str(X.shape()));

  const int Og = O / G, K = g.rows(), P = g.cols();
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.d * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(Og) * P;
  const bool pointwise = detail::is_pointwise(g);

  Tensor<T> Y({N, O, g.od, g.oh, g.ow});
  AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
  for (int n = 0; n < N; ++n)
    for (int grp = 0; grp < G; ++grp) {
      const T* xin = X.ptr() + (static_cast<std::size_t>(n) * G + grp) * in_stride;
      const T* colp = xin;
      if (!pointwise) {
        detail::vol2col(xin, g, cols.data());
        colp = cols.data();
      }
      ConstMapMat<T> Wg(Wt.ptr() + static_cast<std::size_t>(grp) * Og * K, Og, K);
      ConstMapMat<T> Cm(colp, K, P);
      MapMat<T> Ym(Y.ptr() + (static_cast<std::size_t>(n) * G + grp) * out_stride, Og, P);
      Ym.noalias() = Wg * Cm;
      if (bias.defined()) {
        const T* bp = bias.value().ptr() + static_cast<std::size_t>(grp) * Og;
        for (int o = 0; o < Og; ++o) Ym.row(o).array() += bp[o];
      }
    }

  return Var<T>::make(std::move(Y), {x, weight, bias},
                      [x, weight, bias, g, N, G, Og, K, P, in_stride, out_stride, pointwise](const Tensor<T>& dY) {
    const Tensor<T>& X = x.value();
    const Tensor<T>& Wt = weight.value();
    Tensor<T>* dX = x.grad_sink();
    Tensor<T>* dW = weight.grad_sink();
    Tensor<T>* dB = bias.defined() ? bias.grad_sink() : nullptr;
    AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(K) * P);
    RowMat<T> dcols;
    for (int n = 0; n < N; ++n)
      for (int grp = 0; grp < G; ++grp) {
        const T* xin = X.ptr() + (static_cast<std::size_t>(n) * G + grp) * in_stride;
        ConstMapMat<T> dYm(dY.ptr() + (static_cast<std::size_t>(n) * G + grp) * out_stride, Og, P);
        if (dW) {
          const T* colp = xin;
          if (!pointwise) {
            detail::vol2col(xin, g, cols.data());
            colp = cols.data();
          }
          ConstMapMat<T> Cm(colp, K, P);
          MapMat<T> dWg(dW->ptr() + static_cast<std::size_t>(grp) * Og * K, Og, K);
          dWg.noalias() += dYm * Cm.transpose();
        }
        if (dB) {
          T* bp = dB->ptr() + static_cast<std::size_t>(grp) * Og;
          for (int o = 0; o < Og; ++o) bp[o] += dYm.row(o).sum();
        }
        if (dX) {
          ConstMapMat<T> Wg(Wt.ptr() + static_cast<std::size_t>(grp) * Og * K, Og, K);
          T* dxin = dX->ptr() + (static_cast<std::size_t>(n) * G + grp) * in_stride;
          if (pointwise) {
            MapMat<T> dXm(dxin, K, P);
            dXm.noalias() += Wg.transpose() * dYm;
          } else {
            dcols.noalias() = Wg.transpose() * dYm;
            detail::col2vol_add(dcols.data(), g, dxin);
          }
        }
      }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  return Var<T>::make(std::move(y), {x}, [x](const Tensor<T>& dy) {
    x.accumulate(dy.reshaped(x.shape()));
  });
}

// 2D grouped convolution over N x C x H x W with weight O x (C/groups) x kH x kW.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv2d expects 4-d input and weight, got " + shape_str(xs) + " and " +
                                shape_str(ws));
  ConvSpec s3 = spec;
  s3.stride[0] = 1;
  s3.pad[0] = 0;
  Var<T> y = conv3d(reshape(x, {xs[0], xs[1], 1, xs[2], xs[3]}),
                    reshape(weight, {ws[0], ws[1], 1, ws[2], ws[3]}), bias, s3);
  const Shape& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[3], ys[4]});
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  const T* bp = b.value().ptr();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bp[i];
  return Var<T>::make(std::move(y), {a, b}, [a, b](const Tensor<T>& dy) {
    a.accumulate(dy);
    b.accumulate(dy);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.data()) v *= s;
  return Var<T>::make(std::move(y), {a}, [a, s](const Tensor<T>& dy) {
    Tensor<T> g = dy;
    for (auto& v : g.data()) v *= s;
    a.accumulate(g);
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.1)) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = v > T{0} ? v : v * slope;
  return Var<T>::make(std::move(y), {x}, [x, slope](const Tensor<T>& dy) {
    Tensor<T> g = dy;
    const T* xv = x.value().ptr();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (!(xv[i] > T{0})) g[i] *= slope;
    x.accumulate(g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = T{1} / (T{1} + std::exp(-v));
  Tensor<T> yc = y;
  return Var<T>::make(std::move(y), {x}, [x, yc](const Tensor<T>& dy) {
    Tensor<T> g = dy;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= yc[i] * (T{1} - yc[i]);
    x.accumulate(g);
  });
}

// y[n,c,...] = (x[n,c,...] - mean[c]) / sqrt(var[c] + eps), statistics per channel over the batch
// and the trailing extents (biased variance). No statistic mixes channels. `mean` and `var`, when
// given, receive the statistics.
template <class T>
Var<T> batch_standardize(const Var<T>& x, T eps = T(1e-5), std::vector<double>* mean = nullptr,
                         std::vector<double>* var = nullptr) {
  const Tensor<T>& X = x.value();
  const int N = X.dim(0), C = X.dim(1);
  const std::size_t inner = X.numel() / (static_cast<std::size_t>(N) * C);
  const double count = static_cast<double>(N) * static_cast<double>(inner);
  Tensor<T> Y(X.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(C));
  if (mean) mean->assign(C, 0.0);
  if (var) var->assign(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double m = 0.0, v = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) m += X[off + i];
    }
    m /= count;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) v += (X[off + i] - m) * (X[off + i] - m);
    }
    v /= count;
    const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
    inv_std[c] = static_cast<T>(is);
    if (mean) (*mean)[c] = m;
    if (var) (*var)[c] = v;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) Y[off + i] = static_cast<T>((X[off + i] - m) * is);
    }
  }
  Tensor<T> yc = Y;
  return Var<T>::make(std::move(Y), {x}, [x, yc, inv_std, N, C, inner, count](const Tensor<T>& dy) {
    Tensor<T>* dx = x.grad_sink();
    if (!dx) return;
    for (int c = 0; c < C; ++c) {
      double mg = 0.0, mgy = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          mg += dy[off + i];
          mgy += dy[off + i] * yc[off + i];
        }
      }
      mg /= count;
      mgy /= count;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i)
          (*dx)[off + i] += static_cast<T>(inv_std[c] * (dy[off + i] - mg - yc[off + i] * mgy));
      }
    }
  });
}

// y[n,c,...] = x[n,c,...] * scale[c] + shift[c]
template <class T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale_, const Var<T>& shift) {
  const Tensor<T>& X = x.value();
  const int N = X.dim(0), C = X.dim(1);
  if (scale_.value().numel() != static_cast<std::size_t>(C) || shift.value().numel() != static_cast<std::size_t>(C))
    throw std::invalid_argument("channel_affine: parameter size does not match channels");
  const std::size_t inner = X.numel() / (static_cast<std::size_t>(N) * C);
  Tensor<T> Y(X.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
      const T a = scale_.value()[c], b = shift.value()[c];
      for (std::size_t i = 0; i < inner; ++i) Y[off + i] = X[off + i] * a + b;
    }
  return Var<T>::make(std::move(Y), {x, scale_, shift}, [x, scale_, shift, N, C, inner](const Tensor<T>& dy) {
    Tensor<T>* dx = x.grad_sink();
    Tensor<T>* da = scale_.grad_sink();
    Tensor<T>* db = shift.grad_sink();
    const Tensor<T>& X = x.value();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * inner;
        const T a = scale_.value()[c];
        T sa{0}, sb{0};
        for (std::size_t i = 0; i < inner; ++i) {
          sa += dy[off + i] * X[off + i];
          sb += dy[off + i];
          if (dx) (*dx)[off + i] += dy[off + i] * a;
        }
        if (da) (*da)[c] += sa;
        if (db) (*db)[c] += sb;
      }
  });
}

// out[n,c,s] = vol[n,c,s] * gate[n,0,s]; gate has a single channel.
template <class T>
Var<T> gate_channels(const Var<T>& vol, const Var<T>& gate) {
  const Tensor<T>& V = vol.value();
  const Tensor<T>& A = gate.value();
  if (A.ndim() != V.ndim() || A.dim(0) != V.dim(0) || A.dim(1) != 1 ||
      A.numel() * static_cast<std::size_t>(V.dim(1)) != V.numel())
    throw std::invalid_argument("gate_channels: gate " + shape_str(A.shape()) + " incompatible with " +
                                shape_str(V.shape()));
  const int N = V.dim(0), C = V.dim(1);
  const std::size_t inner = A.numel() / N;
  Tensor<T> Y(V.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * inner + i;
        Y[o] = V[o] * A[n * inner + i];
      }
  return Var<T>::make(std::move(Y), {vol, gate}, [vol, gate, N, C, inner](const Tensor<T>& dy) {
    Tensor<T>* dv = vol.grad_sink();
    Tensor<T>* da = gate.grad_sink();
    const Tensor<T>& V = vol.value();
    const Tensor<T>& A = gate.value();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t o = (static_cast<std::size_t>(n) * C + c) * inner + i;
          if (dv) (*dv)[o] += dy[o] * A[n * inner + i];
          if (da) (*da)[n * inner + i] += dy[o] * V[o];
        }
  });
}

// Nearest-neighbour resize of the trailing spatial dims (2 or 3) to `size`;
// source index = floor(dst * in / out).
template <class T>
Var<T> upsample_nearest(const Var<T>& x, const std::vector<int>& size) {
  const Tensor<T>& X = x.value();
  const int sdims = X.ndim() - 2;
  if ((sdims != 2 && sdims != 3) || static_cast<int>(size.size()) != sdims)
    throw std::invalid_argument("upsample_nearest: bad rank for " + shape_str(X.shape()));
  const int NC = X.dim(0) * X.dim(1);
  const int id = sdims == 3 ? X.dim(2) : 1, ih = X.dim(-2), iw = X.dim(-1);
  const int od = sdims == 3 ? size[0] : 1, oh = size[sdims - 2], ow = size[sdims - 1];
  Shape ys = X.shape();
  for (int k = 0; k < sdims; ++k) ys[2 + k] = size[k];
  std::vector<std::size_t> index(static_cast<std::size_t>(od) * oh * ow);
  for (int a = 0; a < od; ++a)
    for (int b = 0; b < oh; ++b)
      for (int c = 0; c < ow; ++c) {
        const int sa = static_cast<int>(static_cast<long>(a) * id / od);
        const int sb = static_cast<int>(static_cast<long>(b) * ih / oh);
        const int sc = static_cast<int>(static_cast<long>(c) * iw / ow);
        index[(static_cast<std::size_t>(a) * oh + b) * ow + c] = (static_cast<std::size_t>(sa) * ih + sb) * iw + sc;
      }
  const std::size_t in_plane = static_cast<std::size_t>(id) * ih * iw, out_plane = index.size();
  Tensor<T> Y(ys);
  for (int p = 0; p < NC; ++p)
    for (std::size_t k = 0; k < out_plane; ++k) Y[p * out_plane + k] = X[p * in_plane + index[k]];
  return Var<T>::make(std::move(Y), {x}, [x, index, NC, in_plane, out_plane](const Tensor<T>& dy) {
    Tensor<T>* dx = x.grad_sink();
    for (int p = 0; p < NC; ++p)
      for (std::size_t k = 0; k < out_plane; ++k) (*dx)[p * in_plane + index[k]] += dy[p * out_plane + k];
  });
}

// Corner-aligned bilinear resize of N x C x h x w to N x C x H x W, result multiplied by `value_scale`.
// Output sample (Y, X) reads source coordinate (Y*(h-1)/(H-1), X*(w-1)/(W-1)).
template <class T>
Var<T> upsample_bilinear_aligned(const Var<T>& x, int out_h, int out_w, T value_scale = T{1}) {
  const Tensor<T>& Xv = x.value();
  if (Xv.ndim() != 4) throw std::invalid_argument("upsample_bilinear_aligned expects a 4-d tensor");
  const int NC = Xv.dim(0) * Xv.dim(1), h = Xv.dim(2), w = Xv.dim(3);
  struct Tap {
    int i0, i1;
    T f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      const double src = (in > 1 && out > 1) ? static_cast<double>(o) * (in - 1) / (out - 1) : 0.0;
      const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
      const int i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(src - i0)};
    }
    return t;
  };
  const auto ty = taps(h, out_h), tx = taps(w, out_w);
  Tensor<T> Y({Xv.dim(0), Xv.dim(1), out_h, out_w});
  const std::size_t ip = static_cast<std::size_t>(h) * w, op = static_cast<std::size_t>(out_h) * out_w;
  for (int p = 0; p < NC; ++p) {
    const T* s = Xv.ptr() + p * ip;
    T* d = Y.ptr() + p * op;
    for (int yy = 0; yy < out_h; ++yy) {
      const auto& a = ty[yy];
      for (int xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[xx];
        const T top = s[a.i0 * w + b.i0] * (T{1} - b.f) + s[a.i0 * w + b.i1] * b.f;
        const T bot = s[a.i1 * w + b.i0] * (T{1} - b.f) + s[a.i1 * w + b.i1] * b.f;
        d[yy * out_w + xx] = value_scale * (top * (T{1} - a.f) + bot * a.f);
      }
    }
  }
  return Var<T>::make(std::move(Y), {x}, [x, ty, tx, NC, w, ip, op, out_h, out_w, value_scale](const Tensor<T>& dy) {
    Tensor<T>* dx = x.grad_sink();
    for (int p = 0; p < NC; ++p) {
      T* s = dx->ptr() + p * ip;
      const T* d = dy.ptr() + p * op;
      for (int yy = 0; yy < out_h; ++yy) {
        const auto& a = ty[yy];
        for (int xx = 0; xx < out_w; ++xx) {
          const auto& b = tx[xx];
          const T g = value_scale * d[yy * out_w + xx];
          s[a.i0 * w + b.i0] += g * (T{1} - a.f) * (T{1} - b.f);
          s[a.i0 * w + b.i1] += g * (T{1} - a.f) * b.f;
          s[a.i1 * w + b.i0] += g * a.f * (T{1} - b.f);
          s[a.i1 * w + b.i1] += g * a.f * b.f;
        }
      }
    }
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape ys = xs.front().shape();
  const int N = ys[0];
  const std::size_t inner = xs.front().value().numel() / (static_cast<std::size_t>(N) * ys[1]);
  int C = 0;
  for (const auto& v : xs) {
    Shape s = v.shape();
    if (s.size() != ys.size() || s[0] != N || v.value().numel() / (static_cast<std::size_t>(N) * s[1]) != inner)
      throw std::invalid_argument("concat_channels: incompatible shape " + shape_str(s));
    C += s[1];
  }
  ys[1] = C;
  Tensor<T> Y(ys);
  std::vector<int> offsets;
  int c0 = 0;
  for (const auto& v : xs) {
    const int c = v.dim(1);
    offsets.push_back(c0);
    for (int n = 0; n < N; ++n)
      std::memcpy(Y.ptr() + (static_cast<std::size_t>(n) * C + c0) * inner,
                  v.value().ptr() + static_cast<std::size_t>(n) * c * inner, sizeof(T) * c * inner);
    c0 += c;
  }
  return Var<T>::make(std::move(Y), xs, [xs, offsets, N, C, inner](const Tensor<T>& dy) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      Tensor<T>* dx = xs[k].grad_sink();
      if (!dx) continue;
      const int c = xs[k].dim(1);
      for (int n = 0; n < N; ++n) {
        const T* src = dy.ptr() + (static_cast<std::size_t>(n) * C + offsets[k]) * inner;
        T* dst = dx->ptr() + static_cast<std::size_t>(n) * c * inner;
        for (std::size_t i = 0; i < c * inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// Softmax over dim 1 of an N x C x ... tensor.
template <class T>
Var<T> softmax_channels(const Var<T>& x) {
  const Tensor<T>& X = x.value();
  const int N = X.dim(0), C = X.dim(1);
  const std::size_t inner = X.numel() / (static_cast<std::size_t>(N) * C);
  Tensor<T> Y(X.shape());
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = static_cast<std::size_t>(n) * C * inner + i;
      T m = X[base];
      for (int c = 1; c < C; ++c) m = std::max(m, X[base + c * inner]);
      T z{0};
      for (int c = 0; c < C; ++c) z += (Y[base + c * inner] = std::exp(X[base + c * inner] - m));
      for (int c = 0; c < C; ++c) Y[base + c * inner] /= z;
    }
  Tensor<T> yc = Y;
  return Var<T>::make(std::move(Y), {x}, [x, yc, N, C, inner](const Tensor<T>& dy) {
    Tensor<T>* dx = x.grad_sink();
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = static_cast<std::size_t>(n) * C * inner + i;
        T dot{0};
        for (int c = 0; c < C; ++c) dot += dy[base + c * inner] * yc[base + c * inner];
        for (int c = 0; c < C; ++c) (*dx)[base + c * inner] += yc[base + c * inner] * (dy[base + c * inner] - dot);
      }
  });
}

// Sum of all entries as a 1-element tensor.
template <class T>
Var<T> sum_all(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return Var<T>::make(Tensor<T>({1}, s), {x}, [x](const Tensor<T>& dy) {
    x.accumulate(Tensor<T>(x.shape(), dy[0]));
  });
}

// Weighted sum <x, w> with a constant weight tensor.
template <class T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& w) {
  if (w.shape() != x.shape()) throw std::invalid_argument("dot_const: shape mismatch");
  T s{0};
  for (std::size_t i = 0; i < w.numel(); ++i) s += x.value()[i] * w[i];
  return Var<T>::make(Tensor<T>({1}, s), {x}, [x, w](const Tensor<T>& dy) {
    Tensor<T> g = w;
    for (auto& v : g.data()) v *= dy[0];
    x.accumulate(g);
  });
}

}  // namespace dbs
