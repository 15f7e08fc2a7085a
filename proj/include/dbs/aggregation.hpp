#pragma once

// Decoupled cost aggregation. The fused volume (N x D*B x H x W) is treated as D disparity
// bundles of B contiguous channels:
//   spatial aggregation   - 3x3 convolution with groups = D; bundles never see each other.
//   disparity aggregation - dense 1x1 convolution; pixels never see each other.
// The BGA encoder-decoder alternates the two. A coupled 3x3x3 hourglass is provided as the
// comparison baseline.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/features.hpp"
#include "dbs/nn.hpp"
#include "dbs/variant.hpp"

namespace dbs {

inline constexpr std::array<int, 3> kKernel3x3{1, 3, 3};
inline constexpr std::array<int, 3> kKernel1x1{1, 1, 1};
inline constexpr std::array<int, 3> kKernel3x3x3{3, 3, 3};

// Bypass switches used by the identity-kernel and identity-map checks.
struct LayerOptions {
  bool normalize = true;
  bool activate = true;
};

template <class T>
struct SpatialAggregation {
  Conv<T> conv;  // groups = levels (or 1 when dense)
  ChannelNorm<T> norm;
  int levels = 1;
  bool dense = false;

  SpatialAggregation() = default;
  SpatialAggregation(ParamStore<T>& ps, const std::string& name, int levels_, int in_bundle, int out_bundle,
                     int stride = 1, bool dense_ = false)
      : conv(ps, name + ".conv", levels_ * in_bundle, levels_ * out_bundle, kKernel3x3,
             ConvSpec::conv2d(stride, 1, dense_ ? 1 : levels_), false),
        norm(ps, name + ".norm", levels_ * out_bundle),
        levels(levels_),
        dense(dense_) {}

  int in_channels() const { return conv.in_channels; }
  int out_channels() const { return conv.out_channels; }

  Var<T> operator()(const Var<T>& x, LayerOptions opt = {}) const {
    if (x.dim(1) % levels != 0)
      throw std::invalid_argument("spatial aggregation: " + std::to_string(x.dim(1)) +
                                  " channels not divisible by " + std::to_string(levels) + " disparity levels");
    Var<T> y = conv(x);
    if (opt.normalize) y = norm(y);
    return opt.activate ? leaky_relu(y) : y;
  }
};

template <class T>
struct DisparityAggregation {
  Conv<T> conv;  // dense 1x1 with bias
  bool activate = true;

  DisparityAggregation() = default;
  DisparityAggregation(ParamStore<T>& ps, const std::string& name, int in, int out, bool act = true,
                       Init init = Init::kHeUniform)
      : conv(ps, name, in, out, kKernel1x1, ConvSpec::conv2d(1, 0), true, init), activate(act) {}

  int in_channels() const { return conv.in_channels; }
  int out_channels() const { return conv.out_channels; }

  Var<T> operator()(const Var<T>& x, LayerOptions opt = {}) const {
    Var<T> y = conv(x);
    return (activate && opt.activate) ? leaky_relu(y) : y;
  }
};

// Operator-style entry points.
template <class T>
Var<T> spatial_aggregate(const Var<T>& vol, const SpatialAggregation<T>& layer, LayerOptions opt = {}) {
  return layer(vol, opt);
}
template <class T>
Var<T> disparity_aggregate(const Var<T>& vol, const DisparityAggregation<T>& layer, LayerOptions opt = {}) {
  return layer(vol, opt);
}

// out[n,c,y,x] = gate[n,0,y,x] * vol[n,c,y,x]
template <class T>
Var<T> apply_spatial_attention(const Var<T>& vol, const Var<T>& gate) {
  return gate_channels(vol, gate);
}

// Single-channel sigmoid gate computed from the left pyramid, resized to the 1/4 grid.
template <class T>
struct SpatialAttention {
  static constexpr int kProj = 8;
  std::array<Conv<T>, 3> proj;
  Conv<T> fuse;

  SpatialAttention() = default;
  SpatialAttention(ParamStore<T>& ps, const std::string& name, int c4, int c8, int c16) {
    const std::array<int, 3> ch{c4, c8, c16};
    for (int i = 0; i < 3; ++i)
      proj[i] = Conv<T>(ps, name + ".proj" + std::to_string(i), ch[i], kProj, kKernel1x1, ConvSpec::conv2d(1, 0), true);
    fuse = Conv<T>(ps, name + ".fuse", 3 * kProj, 1, kKernel3x3, ConvSpec::conv2d(1, 1), true);
  }

  Var<T> gate(const FeaturePyramid<T>& pyr, int h, int w) const {
    std::vector<Var<T>> parts;
    const std::array<Var<T>, 3> lv{pyr.level_4, pyr.level_8, pyr.level_16};
    for (int i = 0; i < 3; ++i) {
      Var<T> p = leaky_relu(proj[i](lv[i]));
      if (p.dim(2) != h || p.dim(3) != w) p = upsample_nearest(p, {h, w});
      parts.push_back(p);
    }
    return sigmoid(fuse(concat_channels(parts)));
  }
};

struct BGAConfig {
  Variant variant = Variant::kTiny;
  int groups = 0;            // correlation groups G; 0 -> variant default
  int disparities = 0;       // D, required
  int num_stages = 2;        // encoder scales beyond 1/4
  int blocks_per_stage = 0;  // 0 -> variant default
  std::vector<int> bundle_widths;  // per scale (num_stages + 1); empty -> {G, 3G/2, 2G, ...}
  bool use_attention = false;
  bool spatial_dense = false;
  // guidance channel counts, needed only with attention
  int c4 = 0, c8 = 0, c16 = 0;

  int resolved_groups() const { return groups > 0 ? groups : defaults_for(variant).groups; }
  int resolved_blocks() const { return blocks_per_stage > 0 ? blocks_per_stage : defaults_for(variant).blocks_per_stage; }
  std::vector<int> resolved_widths() const {
    if (!bundle_widths.empty()) return bundle_widths;
    const int g = resolved_groups();
    std::vector<int> w;
    for (int s = 0; s <= num_stages; ++s) w.push_back(std::max(1, g + (g * s) / 2));
    return w;
  }
  void validate() const {
    if (disparities < 1) throw std::invalid_argument("BGA: disparities must be >= 1");
    if (num_stages < 0) throw std::invalid_argument("BGA: num_stages must be >= 0");
    if (resolved_blocks() < 1) throw std::invalid_argument("BGA: blocks_per_stage must be >= 1");
    const auto w = resolved_widths();
    if (static_cast<int>(w.size()) != num_stages + 1)
      throw std::invalid_argument("BGA: need num_stages + 1 bundle widths");
    if (w.front() != resolved_groups())
      throw std::invalid_argument("BGA: input-stage width must equal G*D (bundle width G)");
    for (int b : w)
      if (b < 1) throw std::invalid_argument("BGA: bundle widths must be positive");
    if (use_attention && (c4 < 1 || c8 < 1 || c16 < 1))
      throw std::invalid_argument("BGA: attention needs guidance channel counts");
  }
};

template <class T>
struct AggregatorOutput {
  Var<T> scores;       // N x D x H4 x W4
  Var<T> init_scores;  // N x D x H4 x W4, from the pre-decoder state
};

template <class T>
class BGA {
 public:
  BGA() = default;
  BGA(ParamStore<T>& ps, BGAConfig cfg, const std::string& prefix = "agg") : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int D = cfg_.disparities, G = cfg_.resolved_groups(), B = cfg_.resolved_blocks();
    const auto w = cfg_.resolved_widths();
    const bool dense = cfg_.spatial_dense;
    const std::string p = prefix + ".";
    entry_ = DisparityAggregation<T>(ps, p + "entry", G * D, D * w[0]);
    if (cfg_.use_attention) attention_ = SpatialAttention<T>(ps, p + "attention", cfg_.c4, cfg_.c8, cfg_.c16);
    enc_.resize(cfg_.num_stages + 1);
    dec_.resize(cfg_.num_stages);
    for (int s = 0; s <= cfg_.num_stages; ++s) {
      const std::string n = p + "enc" + std::to_string(s);
      if (s > 0) down_.emplace_back(ps, n + ".down", D, w[s - 1], w[s], 2, dense);
      for (int b = 0; b < B; ++b) enc_[s].push_back(make_pair_(ps, n + ".block" + std::to_string(b), D, w[s], dense));
    }
    for (int s = cfg_.num_stages - 1; s >= 0; --s) {
      const std::string n = p + "dec" + std::to_string(s);
      match_.insert(match_.begin(), DisparityAggregation<T>(ps, n + ".match", D * w[s + 1], D * w[s], false));
      for (int b = 0; b < B; ++b) dec_[s].push_back(make_pair_(ps, n + ".block" + std::to_string(b), D, w[s], dense));
    }
    // score projections start at zero: uniform disparity distributions, unsaturated softmax
    init_head_ = DisparityAggregation<T>(ps, p + "init_head", D * w.back(), D, false, Init::kZero);
    exit_ = DisparityAggregation<T>(ps, p + "exit", D * w[0], D, false, Init::kZero);
  }

  const BGAConfig& config() const { return cfg_; }

  // vol: N x (G*D) x H4 x W4 fused cost volume.
  AggregatorOutput<T> operator()(const Var<T>& vol, const FeaturePyramid<T>* guidance = nullptr) const {
    const int D = cfg_.disparities, G = cfg_.resolved_groups();
    if (vol.value().ndim() != 4 || vol.dim(1) != G * D)
      throw std::invalid_argument("BGA expects N x " + std::to_string(G * D) + " x H x W, got " + shape_str(vol.shape()));
    const int h = vol.dim(2), w = vol.dim(3);
    Var<T> x = entry_(vol);
    if (cfg_.use_attention) {
      if (!guidance) throw std::invalid_argument("BGA: attention enabled but no guidance pyramid given");
      x = apply_spatial_attention(x, attention_.gate(*guidance, h, w));
    }
    std::vector<Var<T>> skips;
    for (int s = 0; s <= cfg_.num_stages; ++s) {
      if (s > 0) x = down_[s - 1](x);
      for (const auto& blk : enc_[s]) x = blk.disparity(blk.spatial(x));
      skips.push_back(x);
    }
    Var<T> init = init_head_(x);
    if (init.dim(2) != h || init.dim(3) != w) init = upsample_bilinear_aligned(init, h, w);
    for (int s = cfg_.num_stages - 1; s >= 0; --s) {
      Var<T> m = match_[s](x);
      const Var<T>& skip = skips[s];
      x = add(upsample_nearest(m, {skip.dim(2), skip.dim(3)}), skip);
      for (const auto& blk : dec_[s]) x = blk.disparity(blk.spatial(x));
    }
    return {exit_(x), init};
  }

  // Every spatial / disparity aggregation layer, in forward order.
  std::vector<const SpatialAggregation<T>*> spatial_layers() const {
    std::vector<const SpatialAggregation<T>*> out;
    for (int s = 0; s <= cfg_.num_stages; ++s) {
      if (s > 0) out.push_back(&down_[s - 1]);
      for (const auto& b : enc_[s]) out.push_back(&b.spatial);
    }
    for (int s = cfg_.num_stages - 1; s >= 0; --s)
      for (const auto& b : dec_[s]) out.push_back(&b.spatial);
    return out;
  }
  std::vector<const DisparityAggregation<T>*> disparity_layers() const {
    std::vector<const DisparityAggregation<T>*> out{&entry_};
    for (int s = 0; s <= cfg_.num_stages; ++s)
      for (const auto& b : enc_[s]) out.push_back(&b.disparity);
    out.push_back(&init_head_);
    for (int s = cfg_.num_stages - 1; s >= 0; --s) {
      out.push_back(&match_[s]);
      for (const auto& b : dec_[s]) out.push_back(&b.disparity);
    }
    out.push_back(&exit_);
    return out;
  }

  std::vector<ConvLayerDesc> describe(int h, int w, int batch = 1) const {
    std::vector<ConvLayerDesc> out;
    std::array<int, 3> sz{1, h, w};
    auto push = [&](const Conv<T>& c, std::array<int, 3> in) {
      out.push_back(c.describe(in, batch));
      return c.out_size(in);
    };
    push(entry_.conv, sz);
    if (cfg_.use_attention) {
      // levels 4, 8, 16 of the guidance pyramid sit at 1x, 1/2x, 1/4x of the volume grid
      for (int i = 0; i < 3; ++i) push(attention_.proj[i], {1, h >> i, w >> i});
      push(attention_.fuse, sz);
    }
    std::vector<std::array<int, 3>> sizes;
    for (int s = 0; s <= cfg_.num_stages; ++s) {
      if (s > 0) sz = push(down_[s - 1].conv, sz);
      for (const auto& b : enc_[s]) {
        push(b.spatial.conv, sz);
        push(b.disparity.conv, sz);
      }
      sizes.push_back(sz);
    }
    push(init_head_.conv, sz);
    for (int s = cfg_.num_stages - 1; s >= 0; --s) {
      push(match_[s].conv, sizes[s + 1]);
      for (const auto& b : dec_[s]) {
        push(b.spatial.conv, sizes[s]);
        push(b.disparity.conv, sizes[s]);
      }
    }
    push(exit_.conv, sizes[0]);
    return out;
  }

 private:
  struct Pair {
    SpatialAggregation<T> spatial;
    DisparityAggregation<T> disparity;
  };
  static Pair make_pair_(ParamStore<T>& ps, const std::string& n, int D, int b, bool dense) {
    return Pair{SpatialAggregation<T>(ps, n + ".spatial", D, b, b, 1, dense),
                DisparityAggregation<T>(ps, n + ".disparity", D * b, D * b)};
  }

  BGAConfig cfg_;
  DisparityAggregation<T> entry_;
  SpatialAttention<T> attention_;
  std::vector<SpatialAggregation<T>> down_;
  std::vector<std::vector<Pair>> enc_, dec_;
  std::vector<DisparityAggregation<T>> match_;
  DisparityAggregation<T> init_head_, exit_;
};

// ---------------------------------------------------------------------------------------------
// Coupled 3x3x3 hourglass baseline.

struct Baseline3DConfig {
  int groups = 8;
  int disparities = 0;
  int num_stages = 2;
  int blocks_per_stage = 1;
  std::vector<int> widths;  // per scale, num_stages + 1

  void validate() const {
    if (groups < 1 || disparities < 1) throw std::invalid_argument("3D baseline: groups and disparities must be >= 1");
    if (static_cast<int>(widths.size()) != num_stages + 1)
      throw std::invalid_argument("3D baseline: need num_stages + 1 widths");
    for (int c : widths)
      if (c < 1) throw std::invalid_argument("3D baseline: widths must be positive");
    if (blocks_per_stage < 1) throw std::invalid_argument("3D baseline: blocks_per_stage must be >= 1");
  }
};

template <class T>
class Baseline3D {
 public:
  Baseline3D() = default;
  Baseline3D(ParamStore<T>& ps, Baseline3DConfig cfg, const std::string& prefix = "agg") : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& c = cfg_.widths;
    const auto s1 = ConvSpec::conv3d(1, 1), s2 = ConvSpec::conv3d(2, 1), pw = ConvSpec::conv3d(1, 0);
    const std::string p = prefix + ".";
    entry_ = ConvBlock<T>(ps, p + "entry", cfg_.groups, c[0], kKernel3x3x3, s1);
    enc_.resize(cfg_.num_stages + 1);
    dec_.resize(cfg_.num_stages);
    for (int s = 0; s <= cfg_.num_stages; ++s) {
      const std::string n = p + "enc" + std::to_string(s);
      if (s > 0) down_.emplace_back(ps, n + ".down", c[s - 1], c[s], kKernel3x3x3, s2);
      for (int b = 0; b < cfg_.blocks_per_stage; ++b)
        enc_[s].emplace_back(ps, n + ".block" + std::to_string(b), c[s], c[s], kKernel3x3x3, s1);
    }
    match_.resize(cfg_.num_stages);
    for (int s = cfg_.num_stages - 1; s >= 0; --s) {
      const std::string n = p + "dec" + std::to_string(s);
      match_[s] = Conv<T>(ps, n + ".match", c[s + 1], c[s], kKernel1x1, pw, true);
      for (int b = 0; b < cfg_.blocks_per_stage; ++b)
        dec_[s].emplace_back(ps, n + ".block" + std::to_string(b), c[s], c[s], kKernel3x3x3, s1);
    }
    init_head_ = Conv<T>(ps, p + "init_head", c.back(), 1, kKernel1x1, pw, true, Init::kZero);
    exit_ = Conv<T>(ps, p + "exit", c[0], 1, kKernel3x3x3, s1, true, Init::kZero);
  }

  const Baseline3DConfig& config() const { return cfg_; }

  // vol: N x G x D x H4 x W4 group-wise correlation volume.
  AggregatorOutput<T> operator()(const Var<T>& vol, const FeaturePyramid<T>* = nullptr) const {
    const Shape& s = vol.shape();
    if (s.size() != 5 || s[1] != cfg_.groups || s[2] != cfg_.disparities)
      throw std::invalid_argument("3D baseline expects N x " + std::to_string(cfg_.groups) + " x " +
                                  std::to_string(cfg_.disparities) + " x H x W, got " + shape_str(s));
    const int N = s[0], D = s[2], h = s[3], w = s[4];
    Var<T> x = entry_(vol);
    std::vector<Var<T>> skips;
    for (int st = 0; st <= cfg_.num_stages; ++st) {
      if (st > 0) x = down_[st - 1](x);
      for (const auto& b : enc_[st]) x = b(x);
      skips.push_back(x);
    }
    Var<T> init = init_head_(x);
    if (init.dim(2) != D || init.dim(3) != h || init.dim(4) != w) init = upsample_nearest(init, {D, h, w});
    for (int st = cfg_.num_stages - 1; st >= 0; --st) {
      const Var<T>& skip = skips[st];
      x = add(upsample_nearest(match_[st](x), {skip.dim(2), skip.dim(3), skip.dim(4)}), skip);
      for (const auto& b : dec_[st]) x = b(x);
    }
    Var<T> out = exit_(x);
    return {reshape(out, {N, D, h, w}), reshape(init, {N, D, h, w})};
  }

  std::vector<ConvLayerDesc> describe(int d, int h, int w, int batch = 1) const {
    std::vector<ConvLayerDesc> out;
    auto push = [&](const Conv<T>& c, std::array<int, 3> in) {
      out.push_back(c.describe(in, batch));
      return c.out_size(in);
    };
    std::array<int, 3> sz = push(entry_.conv, {d, h, w});
    std::vector<std::array<int, 3>> sizes;
    for (int st = 0; st <= cfg_.num_stages; ++st) {
      if (st > 0) sz = push(down_[st - 1].conv, sz);
      for (const auto& b : enc_[st]) push(b.conv, sz);
      sizes.push_back(sz);
    }
    push(init_head_, sz);
    for (int st = cfg_.num_stages - 1; st >= 0; --st) {
      push(match_[st], sizes[st + 1]);
      for (const auto& b : dec_[st]) push(b.conv, sizes[st]);
    }
    push(exit_, sizes[0]);
    return out;
  }

  const ConvBlock<T>& entry() const { return entry_; }

 private:
  Baseline3DConfig cfg_;
  ConvBlock<T> entry_;
  std::vector<ConvBlock<T>> down_;
  std::vector<std::vector<ConvBlock<T>>> enc_, dec_;
  std::vector<Conv<T>> match_;
  Conv<T> init_head_, exit_;
};

// Parameter count of a baseline built from `cfg`, computed without allocating weights.
inline std::int64_t baseline3d_param_count(const Baseline3DConfig& cfg) {
  cfg.validate();
  const auto& c = cfg.widths;
  auto block = [](std::int64_t in, std::int64_t out) { return in * out * 27 + 2 * out; };
  std::int64_t n = block(cfg.groups, c[0]);
  for (int s = 0; s <= cfg.num_stages; ++s) {
    if (s > 0) n += block(c[s - 1], c[s]);
    n += cfg.blocks_per_stage * block(c[s], c[s]);
  }
  for (int s = 0; s < cfg.num_stages; ++s) n += static_cast<std::int64_t>(c[s + 1]) * c[s] + c[s] +
                                                cfg.blocks_per_stage * block(c[s], c[s]);
  n += c.back() + 1;        // init head
  n += 27LL * c[0] + 1;     // exit
  return n;
}

// Chooses baseline widths (scaled like the BGA bundle ladder) whose parameter count is closest
// to `target`. Throws when the best candidate is off by more than `tolerance` (relative).
inline Baseline3DConfig match_baseline_params(std::int64_t target, const BGAConfig& bga, double tolerance = 0.10) {
  const auto ratio = bga.resolved_widths();
  Baseline3DConfig best;
  double best_err = 1e300;
  for (int c0 = 1; c0 <= 512; ++c0) {
    Baseline3DConfig cfg;
    cfg.groups = bga.resolved_groups();
    cfg.disparities = bga.disparities;
    cfg.num_stages = bga.num_stages;
    cfg.blocks_per_stage = bga.resolved_blocks();
    for (int r : ratio)
      cfg.widths.push_back(std::max(1, static_cast<int>(std::lround(static_cast<double>(c0) * r / ratio[0]))));
    const double err = std::abs(static_cast<double>(baseline3d_param_count(cfg) - target)) / static_cast<double>(target);
    if (err < best_err) {
      best_err = err;
      best = cfg;
    }
  }
  if (best_err > tolerance)
    throw std::invalid_argument("no 3D baseline width within " + std::to_string(tolerance * 100) +
                                "% of " + std::to_string(target) + " parameters");
  return best;
}

}  // namespace dbs
