#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dbs/features.hpp"
#include "test_util.hpp"

using namespace dbs;
using dbs::testing::random_tensor;

namespace {

template <class T>
bool pyramids_bit_equal(const FeaturePyramid<T>& a, const FeaturePyramid<T>& b) {
  return bit_equal(a.level_4.value(), b.level_4.value()) && bit_equal(a.level_8.value(), b.level_8.value()) &&
         bit_equal(a.level_16.value(), b.level_16.value());
}

}  // namespace

TEST(Features, ShapeContractFor96x128) {
  ParamStore<float> ps(1);
  FeatureExtractor<float> net(ps, BackboneConfig{});
  std::mt19937_64 rng(51);
  const Var<float> img(random_tensor<float>({1, 3, 96, 128}, rng, 0.0, 1.0));
  const auto [l, r] = net(img, img);
  const int c4 = BackboneConfig{}.c4();
  EXPECT_EQ(c4, 32);
  EXPECT_EQ(l.level_4.shape(), (Shape{1, c4, 24, 32}));
  EXPECT_EQ(l.level_8.shape(), (Shape{1, BackboneConfig{}.c8(), 12, 16}));
  EXPECT_EQ(l.level_16.shape(), (Shape{1, BackboneConfig{}.c16(), 6, 8}));
  EXPECT_TRUE(pyramids_bit_equal(l, r));
}

TEST(Features, VariantWidthsAndBaseChannels) {
  const std::array<std::pair<Variant, int>, 4> ladder = {
      {{Variant::kTiny, 32}, {Variant::kS, 48}, {Variant::kM, 64}, {Variant::kL, 96}}};
  for (const auto& [v, c4] : ladder) EXPECT_EQ(BackboneConfig{v}.c4(), c4);
  BackboneConfig custom;
  custom.base_channels = 16;
  ParamStore<float> ps;
  FeatureExtractor<float> net(ps, custom);
  const auto [l, r] = net(Var<float>(Tensor<float>({1, 3, 32, 64}, 0.5f)), Var<float>(Tensor<float>({1, 3, 32, 64}, 0.5f)));
  EXPECT_EQ(l.level_4.dim(1), 16);
}

TEST(Features, SwappingInputsSwapsPyramids) {
  ParamStore<float> ps(2);
  FeatureExtractor<float> net(ps, BackboneConfig{});
  std::mt19937_64 rng(52);
  const Var<float> a(random_tensor<float>({2, 3, 64, 64}, rng, 0.0, 1.0));
  const Var<float> b(random_tensor<float>({2, 3, 64, 64}, rng, 0.0, 1.0));
  const auto [la, rb] = net(a, b);
  const auto [lb, ra] = net(b, a);
  EXPECT_TRUE(pyramids_bit_equal(la, ra));
  EXPECT_TRUE(pyramids_bit_equal(rb, lb));
}

TEST(Features, RunTwiceChecksumStableAndFinite) {
  std::mt19937_64 rng(53);
  const Tensor<float> img = random_tensor<float>({1, 3, 64, 96}, rng, 0.0, 1.0);
  double sums[2];
  for (int run = 0; run < 2; ++run) {
    ParamStore<float> ps(7);
    FeatureExtractor<float> net(ps, BackboneConfig{Variant::kS});
    const auto [l, r] = net(Var<float>(img), Var<float>(img));
    double s = 0.0;
    for (const auto* t : {&l.level_4.value(), &l.level_8.value(), &l.level_16.value()})
      for (float v : t->data()) {
        ASSERT_TRUE(std::isfinite(v));
        s += v;
      }
    sums[run] = s;
  }
  EXPECT_EQ(std::bit_cast<std::uint64_t>(sums[0]), std::bit_cast<std::uint64_t>(sums[1]));
}

TEST(Features, FiniteOnExtremeImages) {
  ParamStore<float> ps(3);
  FeatureExtractor<float> net(ps, BackboneConfig{});
  for (float v : {0.0f, 1.0f}) {
    const Var<float> img(Tensor<float>({1, 3, 32, 32}, v));
    const auto [l, r] = net(img, img);
    for (float x : l.level_4.value().data()) ASSERT_TRUE(std::isfinite(x));
  }
}

TEST(Features, RejectsNonDivisibleInputNamingStride) {
  ParamStore<float> ps;
  FeatureExtractor<float> net(ps, BackboneConfig{});
  const Var<float> img(Tensor<float>({1, 3, 48, 64}, 0.5f));
  try {
    (void)net(img, img);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("32"), std::string::npos) << e.what();
  }
  EXPECT_THROW(net(img, Var<float>(Tensor<float>({1, 3, 64, 64}))), std::invalid_argument);
  BackboneConfig pre;
  pre.use_pretrained = true;
  EXPECT_THROW(FeatureExtractor<float>(ps, pre), std::invalid_argument);
}

TEST(Features, InputGradientReachesImage) {
  ParamStore<double> ps(4);
  BackboneConfig c;
  c.base_channels = 8;
  FeatureExtractor<double> net(ps, c);
  std::mt19937_64 rng(54);
  Var<double> img(random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0), true);
  const FeaturePyramid<double> p = net.forward_one(img);
  sum_all(p.level_4).backward();
  double g = 0.0;
  for (double v : img.grad().data()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
}
