#pragma once

// Fast invariant checks runnable from the command line.

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "dbs/aggregation.hpp"
#include "dbs/costvolume.hpp"
#include "dbs/data.hpp"
#include "dbs/image_io.hpp"
#include "dbs/metrics.hpp"
#include "dbs/regression.hpp"
#include "dbs/training.hpp"

namespace dbs {

namespace selftest_detail {

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

inline bool correlation_matches_loops(std::mt19937_64& rng) {
  const int C = 4, G = 2, H = 3, W = 5, dmax = 8, D = dmax / 4;
  const Tensor<double> l = random_tensor({1, C, H, W}, rng), r = random_tensor({1, C, H, W}, rng);
  const Tensor<double> v = build_gwc_volume(Var<double>(l), Var<double>(r), dmax, G).value();
  for (int g = 0; g < G; ++g)
    for (int d = 0; d < D; ++d)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double ref = 0.0;
          if (x - d >= 0)
            for (int c = g * C / G; c < (g + 1) * C / G; ++c) ref += l.at(0, c, y, x) * r.at(0, c, y, x - d);
          ref /= C / G;
          if (std::abs(ref - v.at(0, g, d, y, x)) > 1e-12) return false;
        }
  return true;
}

inline bool channel2disp_round_trip(std::mt19937_64& rng) {
  const Tensor<double> v = random_tensor({2, 3, 4, 2, 3}, rng);
  return bit_equal(disp2channel(channel2disp(v), 3), v);
}

inline bool spatial_layer_isolated(std::mt19937_64& rng) {
  ParamStore<double> ps(7);
  const int D = 4, B = 2;
  SpatialAggregation<double> layer(ps, "s", D, B, B, 1, false);
  Tensor<double> x = random_tensor({1, D * B, 5, 6}, rng);
  const Tensor<double> full = layer(Var<double>(x)).value();
  const std::size_t plane = 30;
  for (int c = 0; c < D * B; ++c)
    if (c / B != 1)
      for (std::size_t p = 0; p < plane; ++p) x[c * plane + p] = 0.0;
  const Tensor<double> iso = layer(Var<double>(x)).value();
  for (int c = B; c < 2 * B; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      if (full[c * plane + p] != iso[c * plane + p]) return false;
  return true;
}

inline bool soft_argmin_uniform() {
  const Tensor<double> s({1, 16, 1, 1}, 0.25);
  return soft_argmin(Var<double>(s)).disparity.value()[0] == 7.5;
}

inline bool loss_arithmetic() {
  Tensor<std::uint8_t> mask({1, 1, 1, 1}, std::uint8_t{1});
  const Tensor<double> gt({1, 1, 1, 1}, 0.0);
  const auto sl1 = [&](double e) { return smooth_l1(Var<double>(Tensor<double>({1, 1, 1, 1}, e)), gt, mask).value()[0]; };
  const auto tl = [&](double ei, double ef) {
    return total_loss(Var<double>(Tensor<double>({1, 1, 1, 1}, ei)), Var<double>(Tensor<double>({1, 1, 1, 1}, ef)), gt, mask)
        .value()[0];
  };
  // e = 1.5 gives a smooth-L1 value of exactly 1
  return sl1(0.5) == 0.125 && sl1(2.0) == 1.5 && tl(0.0, 0.0) == 0.0 && std::abs(tl(1.5, 0.0) - 0.3) < 1e-15 &&
         tl(0.0, 1.5) == 1.0;
}

inline bool metric_examples() {
  Tensor<float> pred({1, 3}), gt({1, 3}, 0.0f);
  pred[0] = 0.5f;
  pred[1] = 1.5f;
  pred[2] = 3.5f;
  const Tensor<std::uint8_t> m({1, 3}, std::uint8_t{1});
  const double r1 = *outlier_rate(pred, gt, m, 1.0), r3 = *outlier_rate(pred, gt, m, 3.0);
  Tensor<double> col({3, 1, 1});
  col[0] = 0.5;
  col[1] = col[2] = 0.25;
  const auto dd = distribution_diagnostics(col);
  return std::abs(r1 - 200.0 / 3) < 1e-9 && std::abs(r3 - 100.0 / 3) < 1e-9 &&
         std::abs(dd.entropy[0] - 1.5 * std::log(2.0)) < 1e-12 && dd.peak_ratio[0] == 2.0;
}

inline bool synthetic_photo_consistent() {
  SyntheticConfig cfg;
  cfg.seed = 7;
  const StereoSample s = generate_random_dot_pair(cfg);
  const int H = s.height(), W = s.width();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (!s.valid[p]) continue;
      const int d = static_cast<int>(s.disparity[p]);
      for (int c = 0; c < 3; ++c)
        if (s.left[c * plane + p] != s.right[c * plane + p - d]) return false;
    }
  return true;
}

inline bool pfm_fixture() {
  std::string bytes = "Pf\n1 1\n-1.0\n";
  const float v = 2.5f;
  bytes.append(reinterpret_cast<const char*>(&v), 4);
  const PfmImage img = decode_pfm(bytes);
  return img.map.shape() == Shape{1, 1} && img.map[0] == 2.5f;
}

}  // namespace selftest_detail

inline bool run_selftest(std::ostream& out) {
  using namespace selftest_detail;
  std::mt19937_64 rng(2024);
  const std::vector<std::pair<std::string, std::function<bool()>>> checks = {
      {"group-wise correlation equals loop reference", [&] { return correlation_matches_loops(rng); }},
      {"channel2disp round trip is bit-exact", [&] { return channel2disp_round_trip(rng); }},
      {"spatial aggregation isolates disparity levels", [&] { return spatial_layer_isolated(rng); }},
      {"soft-argmin of uniform scores is (D-1)/2", soft_argmin_uniform},
      {"smooth-L1 and weighted loss arithmetic", loss_arithmetic},
      {"outlier rates and entropy examples", metric_examples},
      {"synthetic pair is photo-consistent", synthetic_photo_consistent},
      {"PFM byte fixture decodes", pfm_fixture},
  };
  bool ok = true;
  for (const auto& [name, fn] : checks) {
    bool pass = false;
    try {
      pass = fn();
    } catch (const std::exception& e) {
      out << "  exception: " << e.what() << "\n";
    }
    out << (pass ? "PASS " : "FAIL ") << name << "\n";
    ok = ok && pass;
  }
  return ok;
}

}  // namespace dbs
