#pragma once

// Siamese multi-scale feature extractor. A small residual CNN downsamples to 1/32 and a
// cascade of upsampling blocks restores 1/16, 1/8 and 1/4 resolution maps.

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/nn.hpp"
#include "dbs/variant.hpp"

namespace dbs {

inline constexpr int kBackboneStride = 32;

template <class T>
struct FeaturePyramid {
  Var<T> level_4;   // N x C4 x H/4 x W/4
  Var<T> level_8;   // N x C8 x H/8 x W/8
  Var<T> level_16;  // N x C16 x H/16 x W/16
};

struct BackboneConfig {
  Variant variant = Variant::kTiny;
  int base_channels = 0;  // 0 selects the variant's C4
  bool use_pretrained = false;

  int c4() const { return base_channels > 0 ? base_channels : defaults_for(variant).c4; }
  // Channel widths at 1/2, 1/4, 1/8, 1/16, 1/32.
  std::array<int, 5> widths() const {
    const int c = c4();
    return {c / 2, (c * 3) / 4, c, (c * 3) / 2, 2 * c};
  }
  int c8() const { return widths()[2]; }
  int c16() const { return widths()[3]; }
};

inline void check_backbone_input(int h, int w) {
  if (h <= 0 || w <= 0 || h % kBackboneStride != 0 || w % kBackboneStride != 0)
    throw std::invalid_argument("input size " + std::to_string(h) + "x" + std::to_string(w) +
                                " must be divisible by the backbone stride " + std::to_string(kBackboneStride));
}

template <class T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(ParamStore<T>& ps, const BackboneConfig& cfg, const std::string& prefix = "features")
      : cfg_(cfg) {
    if (cfg.use_pretrained)
      throw std::invalid_argument("pretrained backbone weights are not bundled; set use_pretrained=false");
    const auto e = cfg.widths();
    if (e[0] < 1) throw std::invalid_argument("backbone base_channels too small");
    const auto k3 = std::array<int, 3>{1, 3, 3};
    const auto k1 = std::array<int, 3>{1, 1, 1};
    const auto s2 = ConvSpec::conv2d(2, 1);
    const auto s1 = ConvSpec::conv2d(1, 1);
    const std::string p = prefix + ".";
    stem_ = ConvBlock<T>(ps, p + "stem", 3, e[0], k3, s2);
    for (int i = 0; i < 4; ++i) {
      const std::string n = p + "down" + std::to_string(i);
      down_[i] = ConvBlock<T>(ps, n, e[i], e[i + 1], k3, s2);
      if (i < 3) {
        res_a_[i] = ConvBlock<T>(ps, n + ".res_a", e[i + 1], e[i + 1], k3, s1);
        res_b_[i] = ConvBlock<T>(ps, n + ".res_b", e[i + 1], e[i + 1], k3, s1, false);
      }
    }
    // up16: (1/32 up) ++ 1/16 -> C16 ; up8 -> C8 ; up4 -> C4
    up_[0] = ConvBlock<T>(ps, p + "up16", e[4] + e[3], e[3], k3, s1);
    up_[1] = ConvBlock<T>(ps, p + "up8", e[3] + e[2], e[2], k3, s1);
    up_[2] = ConvBlock<T>(ps, p + "up4", e[2] + e[1], e[2], k3, s1);
    head_ = Conv<T>(ps, p + "head4", e[2], cfg.c4(), k1, ConvSpec::conv2d(1, 0), true);
  }

  const BackboneConfig& config() const { return cfg_; }

  // image: N x 3 x H x W, values in [0,1].
  FeaturePyramid<T> forward_one(const Var<T>& image) const {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("backbone expects N x 3 x H x W, got " + shape_str(s));
    check_backbone_input(s[2], s[3]);
    // centre the [0,1] input
    Tensor<T> centred = image.value();
    for (auto& v : centred.data()) v = (v - T(0.5)) * T(4);
    Var<T> x = Var<T>::make(std::move(centred), {image}, [image](const Tensor<T>& dy) {
      Tensor<T> g = dy;
      for (auto& v : g.data()) v *= T(4);
      image.accumulate(g);
    });
    x = stem_(x);
    std::array<Var<T>, 4> lv;  // 1/4, 1/8, 1/16, 1/32
    for (int i = 0; i < 4; ++i) {
      x = down_[i](x);
      if (i < 3) x = leaky_relu(add(x, res_b_[i](res_a_[i](x))));
      lv[i] = x;
    }
    auto up_to = [](const Var<T>& v, const Var<T>& like) {
      return upsample_nearest(v, {like.dim(2), like.dim(3)});
    };
    Var<T> u16 = up_[0](concat_channels<T>({up_to(lv[3], lv[2]), lv[2]}));
    Var<T> u8 = up_[1](concat_channels<T>({up_to(u16, lv[1]), lv[1]}));
    Var<T> u4 = up_[2](concat_channels<T>({up_to(u8, lv[0]), lv[0]}));
    return {head_(u4), u8, u16};
  }

  // Both images pass through the same weights.
  std::pair<FeaturePyramid<T>, FeaturePyramid<T>> operator()(const Var<T>& left, const Var<T>& right) const {
    if (left.shape() != right.shape())
      throw std::invalid_argument("left/right image shapes differ: " + shape_str(left.shape()) + " vs " +
                                  shape_str(right.shape()));
    return {forward_one(left), forward_one(right)};
  }

  std::vector<ConvLayerDesc> describe(int h, int w, int batch = 1) const {
    check_backbone_input(h, w);
    std::vector<ConvLayerDesc> out;
    std::array<int, 3> sz{1, h, w};
    auto push = [&](const Conv<T>& c, std::array<int, 3> in) {
      out.push_back(c.describe(in, batch));
      return c.out_size(in);
    };
    sz = push(stem_.conv, sz);
    std::array<std::array<int, 3>, 4> lv{};
    for (int i = 0; i < 4; ++i) {
      sz = push(down_[i].conv, sz);
      if (i < 3) {
        push(res_a_[i].conv, sz);
        push(res_b_[i].conv, sz);
      }
      lv[i] = sz;
    }
    push(up_[0].conv, lv[2]);
    push(up_[1].conv, lv[1]);
    push(up_[2].conv, lv[0]);
    push(head_, lv[0]);
    return out;
  }

 private:
  BackboneConfig cfg_;
  ConvBlock<T> stem_;
  std::array<ConvBlock<T>, 4> down_;
  std::array<ConvBlock<T>, 3> res_a_, res_b_;
  std::array<ConvBlock<T>, 3> up_;
  Conv<T> head_;
};

// Convenience wrapper matching the pyramid-pair contract.
template <class T>
std::pair<FeaturePyramid<T>, FeaturePyramid<T>> extract_features(const FeatureExtractor<T>& net, const Var<T>& left,
                                                                  const Var<T>& right) {
  return net(left, right);
}

}  // namespace dbs
