#pragma once

// Stereo samples, the random-dot synthetic generator, cropping and the on-disk dataset layout.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/image_io.hpp"
#include "dbs/tensor.hpp"

namespace dbs {

struct StereoSample {
  Tensor<float> left;           // 3 x H x W, [0,1]
  Tensor<float> right;          // 3 x H x W
  Tensor<float> disparity;      // H x W, pixels
  Tensor<std::uint8_t> valid;   // H x W

  int height() const { return disparity.dim(0); }
  int width() const { return disparity.dim(1); }

  void check() const {
    const int h = disparity.dim(0), w = disparity.dim(1);
    const Shape img{3, h, w};
    if (left.shape() != img || right.shape() != img || valid.shape() != Shape{h, w})
      throw std::invalid_argument("stereo sample tensors disagree on H x W");
    for (std::size_t i = 0; i < disparity.numel(); ++i)
      if (valid[i] && !(disparity[i] >= 0.0f)) throw std::invalid_argument("negative disparity at a valid pixel");
  }
};

struct SyntheticConfig {
  int height = 96;
  int width = 128;
  int d_max = 32;
  int num_regions = 6;
  double dot_density = 0.8;
  std::uint64_t seed = 0;
  int dot_size = 1;  // side of the square dots, pixels
  // Forces every region to one disparity (0..d_max-1) when set.
  std::optional<int> constant_disparity;

  void validate() const {
    if (height <= 0 || width <= 0) throw std::invalid_argument("synthetic: image size must be positive");
    if (d_max <= 0 || d_max % 4 != 0)
      throw std::invalid_argument("synthetic: d_max must be a positive multiple of 4, got " + std::to_string(d_max));
    if (d_max >= width)
      throw std::invalid_argument("synthetic: d_max " + std::to_string(d_max) + " must be smaller than width " +
                                  std::to_string(width));
    if (num_regions < 1) throw std::invalid_argument("synthetic: num_regions must be >= 1");
    if (!(dot_density > 0.0 && dot_density <= 1.0)) throw std::invalid_argument("synthetic: dot_density must be in (0,1]");
    if (dot_size < 1) throw std::invalid_argument("synthetic: dot_size must be >= 1");
    if (constant_disparity && (*constant_disparity < 0 || *constant_disparity >= d_max))
      throw std::invalid_argument("synthetic: constant disparity outside [0, d_max)");
  }
};

// SplitMix64: small, portable and fully specified, so generated data is identical everywhere.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  // uniform in [0, n)
  int below(int n) { return static_cast<int>(next() % static_cast<std::uint64_t>(n)); }
  int between(int lo, int hi) { return lo + below(hi - lo + 1); }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return SplitMix64(base ^ (0xd1b54a32d192ed03ull * (index + 1))).next();
}

// Random-dot stereogram over layered rectangles with constant integer disparity each.
// Layers are painted far to near (ascending disparity) and the first covers the whole frame.
// A left pixel is valid when its match x - d lies in the image and the right view shows the
// same layer there; everything else (occlusions, frame exits) is invalid.
inline StereoSample generate_random_dot_pair(const SyntheticConfig& cfg) {
  cfg.validate();
  const int H = cfg.height, W = cfg.width;
  SplitMix64 rng(cfg.seed);

  struct Layer {
    int x0, y0, x1, y1;  // half-open rectangle in left-view coordinates
    int disparity;
  };
  std::vector<int> disp(cfg.num_regions);
  for (auto& d : disp) d = cfg.constant_disparity ? *cfg.constant_disparity : rng.below(cfg.d_max);
  std::sort(disp.begin(), disp.end());
  std::vector<Layer> layers;
  layers.push_back({0, 0, W, H, disp[0]});
  for (int i = 1; i < cfg.num_regions; ++i) {
    const int rw = rng.between(std::max(1, W / 8), std::max(1, W / 2));
    const int rh = rng.between(std::max(1, H / 8), std::max(1, H / 2));
    const int x0 = rng.below(W - rw + 1), y0 = rng.below(H - rh + 1);
    layers.push_back({x0, y0, x0 + rw, y0 + rh, disp[i]});
  }
  const int L = static_cast<int>(layers.size());

  // Per-layer texture indexed by left-view coordinates, plus filler for uncovered right pixels.
  // Values are multiples of 1/255 so 8-bit PNG storage is lossless.
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<float> tex(static_cast<std::size_t>(L + 1) * 3 * plane);
  const int S = cfg.dot_size;
  const int cw = W / S + 2, ch = H / S + 2;
  std::vector<float> cells(static_cast<std::size_t>(cw) * ch * 3);
  for (int l = 0; l <= L; ++l) {
    float base[3];
    for (float& b : base) b = static_cast<float>(rng.below(256)) / 255.0f;
    for (std::size_t k = 0; k < static_cast<std::size_t>(cw) * ch; ++k) {
      const bool dot = rng.uniform() < cfg.dot_density;
      for (int c = 0; c < 3; ++c) cells[k * 3 + c] = dot ? static_cast<float>(rng.below(256)) / 255.0f : base[c];
    }
    // random phase so dot edges of different layers do not line up
    const int oy = rng.below(S), ox = rng.below(S);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t k = static_cast<std::size_t>((y + oy) / S) * cw + (x + ox) / S;
        for (int c = 0; c < 3; ++c)
          tex[(static_cast<std::size_t>(l) * 3 + c) * plane + static_cast<std::size_t>(y) * W + x] = cells[k * 3 + c];
      }
  }
  auto covers = [&](int l, int x, int y) {
    const Layer& r = layers[l];
    return x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
  };

  StereoSample s{Tensor<float>({3, H, W}), Tensor<float>({3, H, W}), Tensor<float>({H, W}),
                 Tensor<std::uint8_t>({H, W})};
  std::vector<int> top_left(plane), top_right(plane);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int tl = 0, tr = -1;
      for (int l = 0; l < L; ++l) {
        if (covers(l, x, y)) tl = l;
        if (covers(l, x + layers[l].disparity, y)) tr = l;
      }
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      top_left[p] = tl;
      top_right[p] = tr;
      for (int c = 0; c < 3; ++c) {
        s.left[c * plane + p] = tex[(static_cast<std::size_t>(tl) * 3 + c) * plane + p];
        s.right[c * plane + p] =
            tr < 0 ? tex[(static_cast<std::size_t>(L) * 3 + c) * plane + p]
                   : tex[(static_cast<std::size_t>(tr) * 3 + c) * plane + p + layers[tr].disparity];
      }
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      const int d = layers[top_left[p]].disparity;
      s.disparity[p] = static_cast<float>(d);
      s.valid[p] = (x - d >= 0 && top_right[p - d] == top_left[p]) ? 1 : 0;
    }
  return s;
}

// Colour jitter that keeps the pair exactly consistent: the same channel permutation and
// optional inversion on both views. Values stay multiples of 1/255.
inline void jitter_colours(StereoSample& s, const std::array<int, 3>& channels, bool invert) {
  const std::size_t plane = static_cast<std::size_t>(s.height()) * s.width();
  auto image = [&](Tensor<float>& im) {
    Tensor<float> out(im.shape());
    for (int c = 0; c < 3; ++c) {
      const float* src = im.ptr() + channels[c] * plane;
      float* dst = out.ptr() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = invert ? 1.0f - src[i] : src[i];
    }
    im = std::move(out);
  };
  image(s.left);
  image(s.right);
}

// Crops [y0, y0+h) x [x0, x0+w); out-of-frame pixels are filled by mirror reflection and marked invalid.
inline StereoSample crop(const StereoSample& s, int y0, int x0, int h, int w) {
  const int H = s.height(), W = s.width();
  if (h <= 0 || w <= 0) throw std::invalid_argument("crop size must be positive");
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  StereoSample out{Tensor<float>({3, h, w}), Tensor<float>({3, h, w}), Tensor<float>({h, w}), Tensor<std::uint8_t>({h, w})};
  const std::size_t ip = static_cast<std::size_t>(H) * W, op = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sy = y0 + y, sx = x0 + x;
      const bool inside = sy >= 0 && sy < H && sx >= 0 && sx < W;
      const std::size_t src = static_cast<std::size_t>(reflect(sy, H)) * W + reflect(sx, W);
      const std::size_t dst = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) {
        out.left[c * op + dst] = s.left[c * ip + src];
        out.right[c * op + dst] = s.right[c * ip + src];
      }
      out.disparity[dst] = s.disparity[src];
      // a valid in-frame pixel whose match leaves the crop window is still a true correspondence
      // in the crop only if x - d stays inside it
      out.valid[dst] = inside && s.valid[src] && x - s.disparity[src] >= 0.0f ? 1 : 0;
    }
  return out;
}

// Largest H, W not exceeding the inputs that are multiples of `stride`.
inline std::pair<int, int> floor_to_stride(int h, int w, int stride) { return {h / stride * stride, w / stride * stride}; }

// ---------------------------------------------------------------------------------------------
// Dataset directory: <root>/<index>_left.png, <index>_right.png, <index>_disp.pfm, manifest.json.
// Invalid ground-truth pixels are stored as +inf in the PFM.

inline std::string sample_stem(int index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

inline nlohmann::json to_json(const SyntheticConfig& c) {
  nlohmann::json j{{"height", c.height}, {"width", c.width},  {"d_max", c.d_max},
                   {"num_regions", c.num_regions}, {"dot_density", c.dot_density}, {"seed", c.seed}, {"dot_size", c.dot_size}};
  if (c.constant_disparity) j["constant_disparity"] = *c.constant_disparity;
  return j;
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.d_max = j.at("d_max").get<int>();
  c.num_regions = j.at("num_regions").get<int>();
  c.dot_density = j.at("dot_density").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.dot_size = j.value("dot_size", 1);
  if (j.contains("constant_disparity")) c.constant_disparity = j.at("constant_disparity").get<int>();
  return c;
}

inline void write_sample(const std::filesystem::path& root, int index, const StereoSample& s) {
  const std::string stem = sample_stem(index);
  write_rgb_png(root / (stem + "_left.png"), s.left);
  write_rgb_png(root / (stem + "_right.png"), s.right);
  Tensor<float> d = s.disparity;
  for (std::size_t i = 0; i < d.numel(); ++i)
    if (!s.valid[i]) d[i] = std::numeric_limits<float>::infinity();
  write_pfm(root / (stem + "_disp.pfm"), d);
}

inline StereoSample read_sample(const std::filesystem::path& root, int index) {
  const std::string stem = sample_stem(index);
  StereoSample s;
  s.left = load_rgb_png(root / (stem + "_left.png"));
  s.right = load_rgb_png(root / (stem + "_right.png"));
  s.disparity = load_pfm(root / (stem + "_disp.pfm")).map;
  s.valid = Tensor<std::uint8_t>(s.disparity.shape());
  for (std::size_t i = 0; i < s.disparity.numel(); ++i) {
    const bool ok = std::isfinite(s.disparity[i]) && s.disparity[i] >= 0.0f;
    s.valid[i] = ok;
    if (!ok) s.disparity[i] = 0.0f;
  }
  s.check();
  return s;
}

struct SyntheticDataset {
  SyntheticConfig config;  // seed is the base seed; sample i uses derive_seed(seed, i)
  std::vector<int> indices;
};

inline StereoSample synthesize_indexed(const SyntheticConfig& base, int index) {
  SyntheticConfig c = base;
  c.seed = derive_seed(base.seed, static_cast<std::uint64_t>(index));
  return generate_random_dot_pair(c);
}

inline SyntheticDataset write_synthetic_dataset(const std::filesystem::path& root, const SyntheticConfig& base, int count) {
  base.validate();
  if (count < 1) throw std::invalid_argument("dataset count must be >= 1");
  std::filesystem::create_directories(root);
  SyntheticDataset ds{base, {}};
  nlohmann::json samples = nlohmann::json::array();
  for (int i = 0; i < count; ++i) {
    write_sample(root, i, synthesize_indexed(base, i));
    ds.indices.push_back(i);
    samples.push_back({{"index", i}, {"stem", sample_stem(i)}, {"seed", derive_seed(base.seed, static_cast<std::uint64_t>(i))}});
  }
  const nlohmann::json manifest{{"format", "dbs-synthetic-v1"}, {"config", to_json(base)}, {"samples", samples}};
  write_file_atomic(root / "manifest.json", manifest.dump(2) + "\n");
  return ds;
}

inline SyntheticDataset read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw FormatError(FormatErrorKind::kIo, "no manifest.json in " + root.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("manifest: ") + e.what());
  }
  SyntheticDataset ds{synthetic_config_from_json(j.at("config")), {}};
  for (const auto& s : j.at("samples")) ds.indices.push_back(s.at("index").get<int>());
  return ds;
}

inline std::vector<StereoSample> load_dataset(const std::filesystem::path& root) {
  const SyntheticDataset ds = read_manifest(root);
  std::vector<StereoSample> out;
  for (int i : ds.indices) out.push_back(read_sample(root, i));
  return out;
}

}  // namespace dbs
