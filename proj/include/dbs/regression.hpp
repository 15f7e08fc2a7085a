#pragma once

// Disparity regression from aggregated scores and the two full-resolution upsampling heads.

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>

#include "dbs/nn.hpp"

namespace dbs {

inline constexpr int kUpsampleFactor = 4;
inline constexpr int kConvexTaps = 9;

template <class T>
struct SoftArgmin {
  Var<T> disparity;    // N x 1 x H x W, quarter-resolution units
  Var<T> probability;  // N x D x H x W
};

// d[n,0,y,x] = sum_k k * p[n,k,y,x]
template <class T>
Var<T> disparity_expectation(const Var<T>& prob) {
  const Tensor<T>& P = prob.value();
  if (P.ndim() != 4) throw std::invalid_argument("disparity_expectation expects N x D x H x W");
  const int N = P.dim(0), D = P.dim(1);
  const std::size_t plane = static_cast<std::size_t>(P.dim(2)) * P.dim(3);
  Tensor<T> out({N, 1, P.dim(2), P.dim(3)}, T{0});
  for (int n = 0; n < N; ++n)
    for (int k = 1; k < D; ++k) {
      const T* p = P.ptr() + (static_cast<std::size_t>(n) * D + k) * plane;
      T* o = out.ptr() + n * plane;
      for (std::size_t i = 0; i < plane; ++i) o[i] += static_cast<T>(k) * p[i];
    }
  return Var<T>::make(std::move(out), {prob}, [prob, N, D, plane](const Tensor<T>& dy) {
    Tensor<T>* dp = prob.grad_sink();
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < D; ++k) {
        T* g = dp->ptr() + (static_cast<std::size_t>(n) * D + k) * plane;
        const T* o = dy.ptr() + n * plane;
        for (std::size_t i = 0; i < plane; ++i) g[i] += static_cast<T>(k) * o[i];
      }
  });
}

// Softmax over the disparity axis of a score volume (higher score -> higher probability),
// followed by the expectation of the candidate index.
template <class T>
SoftArgmin<T> soft_argmin(const Var<T>& scores) {
  Var<T> p = softmax_channels(scores);
  return {disparity_expectation(p), p};
}

// Corner-aligned bilinear x4 upsampling; values are rescaled to full-resolution pixels.
template <class T>
Var<T> upsample_interp(const Var<T>& d_quarter) {
  const Shape& s = d_quarter.shape();
  if (s.size() != 4 || s[1] != 1) throw std::invalid_argument("upsample_interp expects N x 1 x H x W");
  return upsample_bilinear_aligned(d_quarter, s[2] * kUpsampleFactor, s[3] * kUpsampleFactor, T(kUpsampleFactor));
}

// Offsets of the 3x3 neighbourhood, tap k -> (dy, dx) = (k/3 - 1, k%3 - 1).
constexpr std::array<int, 2> convex_tap_offset(int k) { return {k / 3 - 1, k % 3 - 1}; }

// Mask channel for tap k and sub-pixel (i, j) inside the 4x4 output cell.
constexpr int convex_mask_channel(int tap, int i, int j) {
  return tap * kUpsampleFactor * kUpsampleFactor + i * kUpsampleFactor + j;
}

// Convex-combination upsampling. d: N x 1 x h x w; mask_logits: N x (9*16) x h x w.
// out[n,0,4y+i,4x+j] = 4 * sum_k softmax_k(mask[n, k*16+i*4+j, y, x]) * d[n,0,y+dy_k,x+dx_k],
// with neighbour coordinates clamped to the grid so the result stays inside the local range.
template <class T>
Var<T> convex_upsample(const Var<T>& d, const Var<T>& mask_logits) {
  const Tensor<T>& Dv = d.value();
  const Tensor<T>& M = mask_logits.value();
  constexpr int F = kUpsampleFactor, S = F * F;
  if (Dv.ndim() != 4 || Dv.dim(1) != 1) throw std::invalid_argument("convex_upsample: disparity must be N x 1 x h x w");
  const int N = Dv.dim(0), h = Dv.dim(2), w = Dv.dim(3);
  if (M.shape() != Shape{N, kConvexTaps * S, h, w})
    throw std::invalid_argument("convex_upsample: mask must be " + shape_str({N, kConvexTaps * S, h, w}) + ", got " +
                                shape_str(M.shape()));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // normalised weights, same layout as the logits
  Tensor<T> Wt(M.shape());
  for (int n = 0; n < N; ++n)
    for (int s = 0; s < S; ++s)
      for (std::size_t p = 0; p < plane; ++p) {
        auto idx = [&](int k) { return (static_cast<std::size_t>(n) * kConvexTaps * S + k * S + s) * plane + p; };
        T m = M[idx(0)];
        for (int k = 1; k < kConvexTaps; ++k) m = std::max(m, M[idx(k)]);
        T z{0};
        for (int k = 0; k < kConvexTaps; ++k) z += (Wt[idx(k)] = std::exp(M[idx(k)] - m));
        for (int k = 0; k < kConvexTaps; ++k) Wt[idx(k)] /= z;
      }
  auto nb = [h, w](int y, int x, int k) {
    const auto o = convex_tap_offset(k);
    return static_cast<std::size_t>(std::clamp(y + o[0], 0, h - 1)) * w + std::clamp(x + o[1], 0, w - 1);
  };
  Tensor<T> out({N, 1, h * F, w * F});
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int i = 0; i < F; ++i)
          for (int j = 0; j < F; ++j) {
            T acc{0};
            for (int k = 0; k < kConvexTaps; ++k)
              acc += Wt[(static_cast<std::size_t>(n) * kConvexTaps * S + convex_mask_channel(k, i, j)) * plane + y * w + x] *
                     Dv[n * plane + nb(y, x, k)];
            out[(static_cast<std::size_t>(n) * h * F + y * F + i) * w * F + x * F + j] = T(F) * acc;
          }
  return Var<T>::make(std::move(out), {d, mask_logits}, [d, mask_logits, Wt, N, h, w, plane, nb](const Tensor<T>& dy) {
    constexpr int F = kUpsampleFactor, S = F * F;
    const Tensor<T>& Dv = d.value();
    Tensor<T>* dd = d.grad_sink();
    Tensor<T>* dm = mask_logits.grad_sink();
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int i = 0; i < F; ++i)
            for (int j = 0; j < F; ++j) {
              const T g = T(F) * dy[(static_cast<std::size_t>(n) * h * F + y * F + i) * w * F + x * F + j];
              std::array<T, kConvexTaps> wk{}, vk{};
              T mean{0};
              for (int k = 0; k < kConvexTaps; ++k) {
                wk[k] = Wt[(static_cast<std::size_t>(n) * kConvexTaps * S + convex_mask_channel(k, i, j)) * plane + y * w + x];
                vk[k] = Dv[n * plane + nb(y, x, k)];
                mean += wk[k] * vk[k];
                if (dd) (*dd)[n * plane + nb(y, x, k)] += g * wk[k];
              }
              if (dm)
                for (int k = 0; k < kConvexTaps; ++k)
                  (*dm)[(static_cast<std::size_t>(n) * kConvexTaps * S + convex_mask_channel(k, i, j)) * plane + y * w + x] +=
                      g * wk[k] * (vk[k] - mean);
            }
  });
}

// Predicts convex-combination masks from quarter-resolution guidance features.
template <class T>
struct LearnedUpsampler {
  static constexpr int kHidden = 32;
  Conv<T> hidden, mask;

  LearnedUpsampler() = default;
  LearnedUpsampler(ParamStore<T>& ps, const std::string& name, int guidance_channels)
      : hidden(ps, name + ".hidden", guidance_channels, kHidden, {1, 3, 3}, ConvSpec::conv2d(1, 1), true),
        // zero init: uniform masks at the start of training
        mask(ps, name + ".mask", kHidden, kConvexTaps * kUpsampleFactor * kUpsampleFactor, {1, 1, 1},
             ConvSpec::conv2d(1, 0), true, Init::kZero) {}

  Var<T> operator()(const Var<T>& d_quarter, const Var<T>& guidance) const {
    if (guidance.dim(2) != d_quarter.dim(2) || guidance.dim(3) != d_quarter.dim(3))
      throw std::invalid_argument("learned upsampling: guidance " + shape_str(guidance.shape()) +
                                  " not aligned with disparity " + shape_str(d_quarter.shape()));
    return convex_upsample(d_quarter, mask(leaky_relu(hidden(guidance))));
  }

  std::vector<ConvLayerDesc> describe(int h, int w, int batch = 1) const {
    return {hidden.describe({1, h, w}, batch), mask.describe({1, h, w}, batch)};
  }
};

template <class T>
Var<T> upsample_learned(const Var<T>& d_quarter, const Var<T>& guidance, const LearnedUpsampler<T>& head) {
  return head(d_quarter, guidance);
}

}  // namespace dbs
