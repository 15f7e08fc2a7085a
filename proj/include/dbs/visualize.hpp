#pragma once

// Colour rendering of disparity and error maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "dbs/tensor.hpp"

namespace dbs {

// Piecewise-linear map over five stops: dark blue, cyan, green, yellow, red.
inline std::array<float, 3> disparity_color(float t) {
  static constexpr std::array<std::array<float, 3>, 5> kStops{{
      {0.0f, 0.0f, 0.5f}, {0.0f, 0.8f, 1.0f}, {0.2f, 0.9f, 0.2f}, {1.0f, 0.9f, 0.0f}, {0.8f, 0.0f, 0.0f}}};
  if (!std::isfinite(t)) return {0.0f, 0.0f, 0.0f};
  t = std::clamp(t, 0.0f, 1.0f) * 4.0f;
  const int i = std::min(static_cast<int>(t), 3);
  const float f = t - static_cast<float>(i);
  std::array<float, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = kStops[i][k] + f * (kStops[i + 1][k] - kStops[i][k]);
  return c;
}

// disparity H x W -> 3 x H x W, with [0, d_max] spanning the full colour range.
inline Tensor<float> colorize_disparity(const Tensor<float>& disparity, float d_max) {
  const int H = disparity.dim(0), W = disparity.dim(1);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<float> out({3, H, W});
  for (std::size_t p = 0; p < plane; ++p) {
    const auto c = disparity_color(disparity[p] / d_max);
    for (int k = 0; k < 3; ++k) out[k * plane + p] = c[k];
  }
  return out;
}

// |pred - gt| from 0 (black) to `max_error` px or more (white through red); invalid pixels blue.
inline Tensor<float> colorize_error(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<std::uint8_t>& valid,
                                    float max_error = 3.0f) {
  const int H = gt.dim(0), W = gt.dim(1);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<float> out({3, H, W});
  for (std::size_t p = 0; p < plane; ++p) {
    if (!valid[p]) {
      out[2 * plane + p] = 0.5f;
      continue;
    }
    const float e = std::clamp(std::abs(pred[p] - gt[p]) / max_error, 0.0f, 1.0f);
    out[p] = e;
    out[plane + p] = e < 1.0f ? e * 0.5f : 0.0f;
    out[2 * plane + p] = e < 1.0f ? e * 0.5f : 0.0f;
  }
  return out;
}

}  // namespace dbs
