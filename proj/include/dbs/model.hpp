#pragma once

// Full stereo network: Siamese features, group-wise correlation, aggregation (decoupled BGA or the
// coupled 3D baseline), soft-argmin regression and the two upsampling heads.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/aggregation.hpp"
#include "dbs/costvolume.hpp"
#include "dbs/features.hpp"
#include "dbs/regression.hpp"
#include "dbs/variant.hpp"

namespace dbs {

enum class Paradigm { kBGA, kConv3D };

inline std::string to_string(Paradigm p) { return p == Paradigm::kBGA ? "bga" : "conv3d"; }

inline Paradigm parse_paradigm(const std::string& s) {
  if (s == "bga") return Paradigm::kBGA;
  if (s == "conv3d") return Paradigm::kConv3D;
  throw std::invalid_argument("unknown aggregation paradigm '" + s + "' (expected bga or conv3d)");
}

struct ModelConfig {
  Variant variant = Variant::kTiny;
  Paradigm paradigm = Paradigm::kBGA;
  int d_max = 32;
  int groups = 0;            // 0 -> variant default
  int base_channels = 0;     // 0 -> variant C4
  int num_stages = 2;
  int blocks_per_stage = 0;  // 0 -> variant default
  bool use_attention = false;
  bool spatial_dense = false;
  std::uint64_t seed = 0;

  int disparities() const { return quarter_disparities(d_max); }
  int resolved_groups() const { return groups > 0 ? groups : defaults_for(variant).groups; }

  BackboneConfig backbone() const { return {variant, base_channels, false}; }

  BGAConfig bga() const {
    BGAConfig c;
    const BackboneConfig b = backbone();
    c.variant = variant;
    c.groups = resolved_groups();
    c.disparities = disparities();
    c.num_stages = num_stages;
    c.blocks_per_stage = blocks_per_stage;
    c.use_attention = use_attention;
    c.spatial_dense = spatial_dense;
    c.c4 = b.c4();
    c.c8 = b.c8();
    c.c16 = b.c16();
    return c;
  }

  void validate() const {
    const int c4 = backbone().c4();
    if (c4 % resolved_groups() != 0)
      throw std::invalid_argument("C4 = " + std::to_string(c4) + " is not divisible by the group count " +
                                  std::to_string(resolved_groups()));
    bga().validate();
  }

  // Identifies everything that determines parameter names and shapes.
  std::string fingerprint() const {
    const BGAConfig b = bga();
    std::ostringstream os;
    os << "variant=" << to_string(variant) << ";paradigm=" << to_string(paradigm) << ";d_max=" << d_max
       << ";groups=" << b.resolved_groups() << ";c4=" << backbone().c4() << ";stages=" << num_stages
       << ";blocks=" << b.resolved_blocks() << ";attention=" << use_attention << ";spatial_dense=" << spatial_dense;
    return os.str();
  }
};

// Parameter count of the BGA aggregator for `cfg`.
inline std::int64_t bga_param_count(const BGAConfig& cfg) {
  ParamStore<float> ps;
  BGA<float> agg(ps, cfg);
  return ps.count();
}

// 3D baseline whose parameter count is matched to the BGA aggregator of the same model config.
// Attention parameters are excluded from the budget since the baseline has no gate.
inline Baseline3DConfig matched_baseline(const ModelConfig& cfg) {
  BGAConfig b = cfg.bga();
  b.use_attention = false;
  return match_baseline_params(bga_param_count(b), b);
}

template <class T>
struct Prediction {
  Var<T> scores;       // N x D x H4 x W4
  Var<T> init_scores;  // N x D x H4 x W4
  Var<T> prob;         // N x D x H4 x W4
  Var<T> d_quarter;    // N x 1 x H4 x W4
  Var<T> d_init;       // N x 1 x H x W
  Var<T> d_final;      // N x 1 x H x W
};

template <class T>
class StereoModel {
 public:
  explicit StereoModel(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg_.validate();
    features_ = FeatureExtractor<T>(params_, cfg_.backbone());
    if (cfg_.paradigm == Paradigm::kBGA) {
      bga_ = BGA<T>(params_, cfg_.bga());
    } else {
      baseline_ = Baseline3D<T>(params_, matched_baseline(cfg_));
    }
    upsampler_ = LearnedUpsampler<T>(params_, "upsample", cfg_.backbone().c4());
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  std::int64_t aggregator_param_count() const { return params_.count_prefix("agg."); }

  // left, right: N x 3 x H x W in [0,1].
  Prediction<T> forward(const Var<T>& left, const Var<T>& right) const {
    auto [pl, pr] = features_(left, right);
    Var<T> vol4 = build_gwc_volume(pl.level_4, pr.level_4, cfg_.d_max, cfg_.resolved_groups());
    AggregatorOutput<T> agg = cfg_.paradigm == Paradigm::kBGA ? bga_(channel2disp(vol4), &pl) : baseline_(vol4);
    Prediction<T> p;
    p.scores = agg.scores;
    p.init_scores = agg.init_scores;
    SoftArgmin<T> fin = soft_argmin(agg.scores);
    SoftArgmin<T> ini = soft_argmin(agg.init_scores);
    p.prob = fin.probability;
    p.d_quarter = fin.disparity;
    p.d_init = upsample_interp(ini.disparity);
    p.d_final = upsampler_(fin.disparity, pl.level_4);
    return p;
  }

  // Every convolution of one forward pass at image size h x w.
  std::vector<ConvLayerDesc> describe(int h, int w, int batch = 1) const {
    std::vector<ConvLayerDesc> out = features_.describe(h, w, batch);
    const int h4 = h / kUpsampleFactor, w4 = w / kUpsampleFactor;
    // the backbone runs once per image
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out.push_back(out[i]);
    const auto agg = cfg_.paradigm == Paradigm::kBGA ? bga_.describe(h4, w4, batch)
                                                     : baseline_.describe(cfg_.disparities(), h4, w4, batch);
    out.insert(out.end(), agg.begin(), agg.end());
    const auto up = upsampler_.describe(h4, w4, batch);
    out.insert(out.end(), up.begin(), up.end());
    return out;
  }

  const BGA<T>& bga() const { return bga_; }
  const Baseline3D<T>& baseline() const { return baseline_; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  FeatureExtractor<T> features_;
  BGA<T> bga_;
  Baseline3D<T> baseline_;
  LearnedUpsampler<T> upsampler_;
};

// Packs a list of samples' images into N x 3 x H x W tensors.
template <class T, class Sample>
Tensor<T> stack_images(const std::vector<const Sample*>& batch, bool right) {
  const Tensor<float>& first = right ? batch.front()->right : batch.front()->left;
  const int N = static_cast<int>(batch.size());
  Tensor<T> out({N, 3, first.dim(1), first.dim(2)});
  const std::size_t per = first.numel();
  for (int n = 0; n < N; ++n) {
    const Tensor<float>& img = right ? batch[n]->right : batch[n]->left;
    if (img.shape() != first.shape()) throw std::invalid_argument("batch images differ in size");
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = static_cast<T>(img[i]);
  }
  return out;
}

}  // namespace dbs
