#pragma once

// Group-wise correlation volume and the Channel2Disp re-indexing.

#include <stdexcept>
#include <string>

#include "dbs/ops.hpp"

namespace dbs {

// Number of quarter-resolution disparity candidates for a full-resolution maximum disparity.
inline int quarter_disparities(int d_max) {
  if (d_max <= 0 || d_max % 4 != 0)
    throw std::invalid_argument("d_max must be a positive multiple of 4, got " + std::to_string(d_max));
  return d_max / 4;
}

// Correlates left/right feature maps (N x C x H x W) group by group:
//   out[n,g,d,y,x] = mean_{c in group g} left[n,c,y,x] * right[n,c,y,x-d]   for x >= d, else 0
// Result is N x G x D x H x W with D = d_max / 4.
template <class T>
Var<T> build_gwc_volume(const Var<T>& left, const Var<T>& right, int d_max, int groups) {
  const Tensor<T>& L = left.value();
  const Tensor<T>& R = right.value();
  if (L.ndim() != 4 || L.shape() != R.shape())
    throw std::invalid_argument("gwc volume: left/right feature shapes differ or are not 4-d: " +
                                shape_str(L.shape()) + " vs " + shape_str(R.shape()));
  const int N = L.dim(0), C = L.dim(1), H = L.dim(2), W = L.dim(3);
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("gwc volume: " + std::to_string(C) + " channels not divisible by " +
                                std::to_string(groups) + " groups");
  const int D = quarter_disparities(d_max);
  if (D > W)
    throw std::invalid_argument("gwc volume: " + std::to_string(D) + " disparity candidates exceed feature width " +
                                std::to_string(W));
  const int cg = C / groups;
  const T inv = T{1} / static_cast<T>(cg);
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  Tensor<T> out({N, groups, D, H, W}, T{0});
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < groups; ++g)
      for (int d = 0; d < D; ++d) {
        T* o = out.ptr() + ((static_cast<std::size_t>(n) * groups + g) * D + d) * plane;
        for (int c = g * cg; c < (g + 1) * cg; ++c) {
          const T* l = L.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
          const T* r = R.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
          for (int y = 0; y < H; ++y)
            for (int x = d; x < W; ++x) o[y * W + x] += l[y * W + x] * r[y * W + x - d];
        }
        for (std::size_t i = 0; i < plane; ++i) o[i] *= inv;
      }

  return Var<T>::make(std::move(out), {left, right}, [left, right, N, C, H, W, D, groups, cg, inv, plane](const Tensor<T>& dy) {
    const Tensor<T>& L = left.value();
    const Tensor<T>& R = right.value();
    Tensor<T>* dL = left.grad_sink();
    Tensor<T>* dR = right.grad_sink();
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < groups; ++g)
        for (int d = 0; d < D; ++d) {
          const T* go = dy.ptr() + ((static_cast<std::size_t>(n) * groups + g) * D + d) * plane;
          for (int c = g * cg; c < (g + 1) * cg; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
            const T* l = L.ptr() + off;
            const T* r = R.ptr() + off;
            for (int y = 0; y < H; ++y)
              for (int x = d; x < W; ++x) {
                const T gg = go[y * W + x] * inv;
                if (dL) (*dL)[off + y * W + x] += gg * r[y * W + x - d];
                if (dR) (*dR)[off + y * W + x - d] += gg * l[y * W + x];
              }
          }
        }
  });
}

// N x G x D x H x W  ->  N x (G*D) x H x W with channel g*D + d. Pure re-indexing.
template <class T>
Tensor<T> channel2disp(const Tensor<T>& vol) {
  if (vol.ndim() != 5) throw std::invalid_argument("channel2disp expects N x G x D x H x W");
  return vol.reshaped({vol.dim(0), vol.dim(1) * vol.dim(2), vol.dim(3), vol.dim(4)});
}
template <class T>
Var<T> channel2disp(const Var<T>& vol) {
  if (vol.value().ndim() != 5) throw std::invalid_argument("channel2disp expects N x G x D x H x W");
  const Shape& s = vol.shape();
  return reshape(vol, {s[0], s[1] * s[2], s[3], s[4]});
}

// Inverse of channel2disp.
template <class T>
Tensor<T> disp2channel(const Tensor<T>& vol, int groups) {
  if (vol.ndim() != 4 || groups < 1 || vol.dim(1) % groups != 0)
    throw std::invalid_argument("disp2channel: channel count not divisible by group count");
  return vol.reshaped({vol.dim(0), groups, vol.dim(1) / groups, vol.dim(2), vol.dim(3)});
}

// Fused channel index for (group, disparity).
constexpr int fused_channel(int group, int disparity, int disparities) { return group * disparities + disparity; }

}  // namespace dbs
