#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <random>
#include <set>

#include "dbs/data.hpp"
#include "test_util.hpp"

using namespace dbs;
using dbs::testing::temp_dir;

namespace {

std::string float_bytes(float v, bool little) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(v);
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[little ? i : 3 - i] = static_cast<char>((u >> (8 * i)) & 0xff);
  return s;
}

// Exhaustive photo-consistency check: fraction of valid pixels whose match is exact on all channels.
double consistency(const StereoSample& s) {
  const int H = s.height(), W = s.width();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::size_t valid = 0, ok = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (!s.valid[p]) continue;
      ++valid;
      const int d = static_cast<int>(s.disparity[p]);
      if (x - d < 0) continue;
      bool same = true;
      for (int c = 0; c < 3; ++c) same = same && s.left[c * plane + p] == s.right[c * plane + p - d];
      ok += same;
    }
  return valid ? static_cast<double>(ok) / valid : 0.0;
}

FormatErrorKind pfm_error(const std::string& bytes) {
  try {
    (void)decode_pfm(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return FormatErrorKind::kIo;
}

}  // namespace

TEST(Synthetic, ZeroShiftIsIdentity) {
  SyntheticConfig c;
  c.num_regions = 1;
  c.constant_disparity = 0;
  c.seed = 3;
  const StereoSample s = generate_random_dot_pair(c);
  EXPECT_TRUE(bit_equal(s.left, s.right));
  for (std::size_t i = 0; i < s.valid.numel(); ++i) ASSERT_EQ(s.valid[i], 1);
}

TEST(Synthetic, ConstantShiftOfFour) {
  SyntheticConfig c;
  c.num_regions = 3;
  c.constant_disparity = 4;
  c.seed = 4;
  const StereoSample s = generate_random_dot_pair(c);
  const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
  for (int y = 0; y < c.height; ++y)
    for (int x = 0; x < c.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * c.width + x;
      EXPECT_EQ(s.disparity[p], 4.0f);
      EXPECT_EQ(s.valid[p], x >= 4 ? 1 : 0);
      if (x >= 4)
        for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(s.left[ch * plane + p], s.right[ch * plane + p - 4]);
    }
}

TEST(Synthetic, RandomConfigIsFullyPhotoConsistent) {
  SyntheticConfig c;
  c.seed = 7;
  c.d_max = 32;
  c.height = 96;
  c.width = 128;
  const StereoSample s = generate_random_dot_pair(c);
  s.check();
  EXPECT_EQ(consistency(s), 1.0);
  for (int seed = 100; seed < 120; ++seed) {
    SyntheticConfig r = c;
    r.seed = seed;
    r.num_regions = 1 + seed % 8;
    r.dot_size = 1 + seed % 3;
    EXPECT_EQ(consistency(generate_random_dot_pair(r)), 1.0) << "seed " << seed;
  }
}

TEST(Synthetic, GroundTruthIsPiecewiseConstantIntegers) {
  SyntheticConfig c;
  c.seed = 8;
  c.num_regions = 5;
  const StereoSample s = generate_random_dot_pair(c);
  std::set<float> levels;
  for (float d : s.disparity.data()) {
    EXPECT_EQ(d, std::floor(d));
    EXPECT_GE(d, 0.0f);
    EXPECT_LT(d, static_cast<float>(c.d_max));
    levels.insert(d);
  }
  EXPECT_LE(levels.size(), 5u);
}

TEST(Synthetic, DeterministicForFixedSeed) {
  SyntheticConfig c;
  c.seed = 9;
  const StereoSample a = generate_random_dot_pair(c), b = generate_random_dot_pair(c);
  EXPECT_TRUE(bit_equal(a.left, b.left));
  EXPECT_TRUE(bit_equal(a.right, b.right));
  EXPECT_TRUE(bit_equal(a.disparity, b.disparity));
  EXPECT_TRUE(bit_equal(a.valid, b.valid));
  c.seed = 10;
  EXPECT_FALSE(bit_equal(a.left, generate_random_dot_pair(c).left));
}

TEST(Synthetic, RejectsBadConfigs) {
  SyntheticConfig c;
  c.d_max = 128;
  EXPECT_THROW(generate_random_dot_pair(c), std::invalid_argument);  // d_max >= width
  c.d_max = 30;
  EXPECT_THROW(generate_random_dot_pair(c), std::invalid_argument);  // not a multiple of 4
  c.d_max = 32;
  c.num_regions = 0;
  EXPECT_THROW(generate_random_dot_pair(c), std::invalid_argument);
}

TEST(Crop, ReflectsOutOfFrameAndInvalidatesIt) {
  SyntheticConfig c;
  c.seed = 11;
  c.height = 32;
  c.width = 64;
  c.d_max = 8;
  const StereoSample s = generate_random_dot_pair(c);
  const StereoSample inner = crop(s, 0, 16, 32, 32);
  EXPECT_EQ(consistency(inner), 1.0);
  const StereoSample outer = crop(s, -4, 48, 40, 32);
  EXPECT_EQ(outer.left.at(0, 0, 5), s.left.at(0, 4, 53));  // mirrored row 4 for y0 = -4
  for (int y = 0; y < 4; ++y) EXPECT_EQ(outer.valid.at(y, 5), 0);
  for (int x = 16; x < 32; ++x) EXPECT_EQ(outer.valid.at(10, x), 0);  // columns past the right edge
  EXPECT_EQ(consistency(outer), 1.0);
  EXPECT_EQ(floor_to_stride(100, 130, 32), (std::pair<int, int>{96, 128}));
}

TEST(Pfm, HandcraftedLittleEndian) {
  const PfmImage im = decode_pfm(std::string("Pf\n1 1\n-1.0\n") + float_bytes(2.5f, true));
  ASSERT_EQ(im.map.shape(), (Shape{1, 1}));
  EXPECT_EQ(im.map[0], 2.5f);
  EXPECT_EQ(im.scale, 1.0f);
}

TEST(Pfm, HandcraftedBigEndianAndRowFlip) {
  const PfmImage row = decode_pfm(std::string("Pf\n2 1\n1.0\n") + float_bytes(1.5f, false) + float_bytes(-3.25f, false));
  ASSERT_EQ(row.map.shape(), (Shape{1, 2}));
  EXPECT_EQ(row.map[0], 1.5f);
  EXPECT_EQ(row.map[1], -3.25f);
  // bottom row is stored first
  const PfmImage col = decode_pfm(std::string("Pf\n1 2\n-1\n") + float_bytes(7.0f, true) + float_bytes(9.0f, true));
  EXPECT_EQ(col.map.at(0, 0), 9.0f);
  EXPECT_EQ(col.map.at(1, 0), 7.0f);
}

TEST(Pfm, DistinctErrorKinds) {
  EXPECT_EQ(pfm_error("PF\n1 1\n-1\n" + std::string(12, '\0')), FormatErrorKind::kUnsupported);
  EXPECT_EQ(pfm_error("P6\n1 1\n-1\n"), FormatErrorKind::kMalformedHeader);
  EXPECT_EQ(pfm_error("Pf\nx 1\n-1\n"), FormatErrorKind::kMalformedHeader);
  EXPECT_EQ(pfm_error("Pf\n1 1\n0\n" + float_bytes(1.0f, true)), FormatErrorKind::kMalformedHeader);
  EXPECT_EQ(pfm_error("Pf\n2 2\n-1\n" + float_bytes(1.0f, true)), FormatErrorKind::kTruncated);
  EXPECT_THROW(load_pfm("/nonexistent/dbs.pfm"), FormatError);
}

TEST(Pfm, RandomRoundTripIsBitExact) {
  std::mt19937_64 rng(61);
  const Tensor<float> m = dbs::testing::random_tensor<float>({8, 8}, rng, -100.0, 100.0);
  const auto dir = temp_dir("pfm");
  write_pfm(dir / "m.pfm", m);
  EXPECT_TRUE(bit_equal(load_pfm(dir / "m.pfm").map, m));
  EXPECT_TRUE(bit_equal(decode_pfm(encode_pfm(m, 2.0f)).map, m));
}

TEST(Kitti, FormatDefinition) {
  const auto dir = temp_dir("kitti");
  PngData png{3, 1, 1, 16, {256, 0, 12800}};
  write_png(dir / "d.png", png);
  const KittiDisparity k = load_kitti_disparity_png(dir / "d.png");
  EXPECT_EQ(k.disparity[0], 1.0f);
  EXPECT_EQ(k.valid[0], 1);
  EXPECT_EQ(k.valid[1], 0);
  EXPECT_EQ(k.disparity[1], 0.0f);
  EXPECT_EQ(k.disparity[2], 50.0f);
}

TEST(Kitti, QuantizedRoundTripIsExact) {
  std::mt19937_64 rng(62);
  Tensor<float> d = dbs::testing::random_tensor<float>({6, 9}, rng, 0.01, 200.0);
  for (auto& v : d.data()) v = std::round(v * 256.0f) / 256.0f;
  const auto dir = temp_dir("kitti_rt");
  write_kitti_disparity_png(dir / "q.png", d);
  const KittiDisparity k = load_kitti_disparity_png(dir / "q.png");
  EXPECT_TRUE(bit_equal(k.disparity, d));
  write_kitti_disparity_png(dir / "q2.png", k.disparity, &k.valid);
  EXPECT_TRUE(bit_equal(load_kitti_disparity_png(dir / "q2.png").disparity, d));
}

TEST(Kitti, RejectsEightBitAndColour) {
  const auto dir = temp_dir("kitti_bad");
  write_png(dir / "g8.png", PngData{2, 2, 1, 8, {1, 2, 3, 4}});
  write_png(dir / "rgb16.png", PngData{1, 1, 3, 16, {1, 2, 3}});
  for (const char* f : {"g8.png", "rgb16.png"}) {
    try {
      (void)load_kitti_disparity_png(dir / f);
      ADD_FAILURE() << f;
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), FormatErrorKind::kUnsupported);
    }
  }
}

TEST(Dataset, DirectoryRoundTripIsBitExact) {
  SyntheticConfig c;
  c.height = 32;
  c.width = 64;
  c.d_max = 16;
  c.seed = 63;
  const auto dir = temp_dir("dataset");
  write_synthetic_dataset(dir, c, 3);
  EXPECT_TRUE(std::filesystem::exists(dir / "000001_left.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "000002_disp.pfm"));
  const SyntheticDataset m = read_manifest(dir);
  EXPECT_EQ(m.indices, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(m.config.seed, 63u);
  const std::vector<StereoSample> loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    const StereoSample ref = synthesize_indexed(c, i);
    EXPECT_TRUE(bit_equal(loaded[i].left, ref.left));
    EXPECT_TRUE(bit_equal(loaded[i].right, ref.right));
    EXPECT_TRUE(bit_equal(loaded[i].valid, ref.valid));
    for (std::size_t p = 0; p < ref.disparity.numel(); ++p)
      if (ref.valid[p]) ASSERT_EQ(loaded[i].disparity[p], ref.disparity[p]);
  }
  EXPECT_THROW(read_manifest(dir / "missing"), FormatError);
}

TEST(ColourJitter, KeepsPairsConsistent) {
  SyntheticConfig c;
  c.height = 32;
  c.width = 64;
  c.d_max = 16;
  c.seed = 64;
  const StereoSample s = generate_random_dot_pair(c);
  StereoSample a = s;
  jitter_colours(a, {2, 0, 1}, true);
  EXPECT_EQ(consistency(a), 1.0);
  EXPECT_EQ(a.left.at(2, 0, 5), 1.0f - s.left.at(1, 0, 5));
  EXPECT_EQ(a.right.at(0, 9, 3), 1.0f - s.right.at(2, 9, 3));
  EXPECT_TRUE(bit_equal(a.disparity, s.disparity));
  StereoSample b = s;
  jitter_colours(b, {0, 1, 2}, false);
  EXPECT_TRUE(bit_equal(b.left, s.left));
  EXPECT_TRUE(bit_equal(b.right, s.right));
}
