#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "dbs/checkpoint.hpp"
#include "dbs/training.hpp"
#include "test_util.hpp"

using namespace dbs;
using dbs::testing::random_tensor;
using dbs::testing::temp_dir;

namespace {

Var<double> pixels(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Var<double>(Tensor<double>({1, 1, 1, n}, std::move(v)));
}

Tensor<std::uint8_t> mask_of(std::vector<std::uint8_t> m) {
  const int n = static_cast<int>(m.size());
  return Tensor<std::uint8_t>({1, 1, 1, n}, std::move(m));
}

double loss_of(double e) {
  return smooth_l1(pixels({e}), Tensor<double>({1, 1, 1, 1}, 0.0), mask_of({1})).value()[0];
}

ModelConfig small_model() {
  ModelConfig m;
  m.d_max = 16;
  m.base_channels = 8;
  m.seed = 5;
  return m;
}

std::vector<StereoSample> small_set(int n, std::uint64_t seed) {
  SyntheticConfig c;
  c.height = 32;
  c.width = 64;
  c.d_max = 16;
  c.seed = seed;
  std::vector<StereoSample> out;
  for (int i = 0; i < n; ++i) out.push_back(synthesize_indexed(c, i));
  return out;
}

TrainConfig small_train(int steps) {
  TrainConfig t;
  t.batch = 1;
  t.steps = steps;
  t.crop_height = 32;
  t.crop_width = 64;
  t.log_every = 1;
  t.eval_every = 0;
  t.seed = 3;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(SmoothL1, HandExamples) {
  EXPECT_EQ(smooth_l1(pixels({1.0, 2.0}), Tensor<double>({1, 1, 1, 2}, {1.0, 2.0}), mask_of({1, 1})).value()[0], 0.0);
  EXPECT_EQ(loss_of(0.5), 0.125);
  EXPECT_EQ(loss_of(2.0), 1.5);
  EXPECT_EQ(loss_of(-2.0), 1.5);
  // invalid pixels do not enter the mean
  const Tensor<double> gt({1, 1, 1, 3}, 0.0);
  EXPECT_EQ(smooth_l1(pixels({0.5, 100.0, 2.0}), gt, mask_of({1, 0, 1})).value()[0], (0.125 + 1.5) / 2.0);
}

TEST(SmoothL1, EmptyMaskWarnsAndReturnsZero) {
  std::vector<std::string> seen;
  auto keep = warning_handler();
  warning_handler() = [&](const std::string& m) { seen.push_back(m); };
  const double l = smooth_l1(pixels({3.0, 4.0}), Tensor<double>({1, 1, 1, 2}, 0.0), mask_of({0, 0})).value()[0];
  warning_handler() = keep;
  EXPECT_EQ(l, 0.0);
  EXPECT_EQ(seen.size(), 1u);
  EXPECT_THROW(smooth_l1(pixels({1.0}), Tensor<double>({1, 1, 1, 2}, 0.0), mask_of({1, 1})), std::invalid_argument);
}

TEST(SmoothL1, NonNegativeMonotoneAndC1AtBeta) {
  double prev = -1.0;
  for (int i = 0; i <= 400; ++i) {
    const double e = i * 0.01;
    const double l = loss_of(e);
    EXPECT_GE(l, 0.0);
    EXPECT_GT(l, prev);
    EXPECT_EQ(l, loss_of(-e));
    prev = l;
  }
  const double eps = 1e-7;
  EXPECT_NEAR(loss_of(1.0 - eps), loss_of(1.0 + eps), 3e-7);
  auto grad_at = [](double e) {
    Var<double> p(Tensor<double>({1, 1, 1, 1}, e), true);
    smooth_l1(p, Tensor<double>({1, 1, 1, 1}, 0.0), mask_of({1})).backward();
    return p.grad()[0];
  };
  EXPECT_NEAR(grad_at(1.0 - eps), grad_at(1.0 + eps), 1e-6);
}

TEST(SmoothL1, MaskedPixelsGetExactlyZeroGradient) {
  std::mt19937_64 rng(71);
  Var<double> p(random_tensor({1, 1, 4, 4}, rng, -5.0, 5.0), true);
  Tensor<std::uint8_t> m({1, 1, 4, 4});
  for (int i = 0; i < 16; i += 3) m[i] = 1;
  smooth_l1(p, Tensor<double>({1, 1, 4, 4}, 0.0), m).backward();
  for (int i = 0; i < 16; ++i) {
    if (m[i]) EXPECT_NE(p.grad()[i], 0.0);
    else EXPECT_EQ(std::bit_cast<std::uint64_t>(p.grad()[i]), 0u);
  }
}

TEST(TotalLoss, WeightedHeads) {
  const Tensor<double> gt({1, 1, 1, 2}, {3.0, 5.0});
  const auto m = mask_of({1, 1});
  const Var<double> perfect = pixels({3.0, 5.0}), off = pixels({4.5, 3.5});  // |e| = 1.5 -> smooth L1 = 1.0
  EXPECT_EQ(total_loss(perfect, perfect, gt, m).value()[0], 0.0);
  EXPECT_EQ(total_loss(off, perfect, gt, m).value()[0], 0.3);
  EXPECT_EQ(total_loss(perfect, off, gt, m).value()[0], 1.0);
  EXPECT_EQ(LossWeights{}.init, 0.3);
  EXPECT_EQ(LossWeights{}.final, 1.0);
}

TEST(OneCycle, WarmupPeakAndFloor) {
  const OneCycle s{4e-4, 1000};
  EXPECT_DOUBLE_EQ(s(0), 4e-4 / 25.0);
  EXPECT_DOUBLE_EQ(s(300), 4e-4);
  EXPECT_NEAR(s(1000), 4e-4 / 25.0 / 1e4, 1e-18);
  for (int i = 1; i < 300; ++i) EXPECT_GT(s(i), s(i - 1));
  for (int i = 301; i <= 1000; ++i) EXPECT_LT(s(i), s(i - 1));
}

TEST(Adam, DescendsOnQuadratic) {
  ParamStore<double> ps;
  Var<double> w = ps.create("w", {1, 1, 1, 3}, Init::kZero, 1);
  const Tensor<double> target({1, 1, 1, 3}, {1.0, -2.0, 0.5});
  Adam<double> opt(ps);
  auto loss = [&] {
    ps.zero_grad();
    Var<double> l = smooth_l1(w, target, mask_of({1, 1, 1}));
    l.backward();
    return l.value()[0];
  };
  double prev = loss();
  for (int i = 0; i < 200; ++i) {
    opt.step(0.05);
    const double cur = loss();
    if (i < 10) EXPECT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(Training, ZeroObjectiveLeavesWeightsUnchanged) {
  StereoModel<float> model(small_model());
  std::vector<std::pair<std::string, Tensor<float>>> before;
  for (const auto& [name, v] : model.params().params())
    if (!model.params().is_buffer(name)) before.emplace_back(name, v.value());
  TrainConfig t = small_train(2);
  t.weights = {0.0, 0.0};
  const TrainResult r = train(model, small_set(2, 1), {}, t);
  for (const auto& rec : r.log)
    if (rec.split == "train") EXPECT_EQ(rec.loss, 0.0);
  std::size_t k = 0;
  for (const auto& [name, v] : model.params().params())
    if (!model.params().is_buffer(name)) EXPECT_TRUE(bit_equal(v.value(), before[k++].second)) << name;
}

TEST(Training, OneSmallStepDecreasesSampleLoss) {
  StereoModel<double> model(small_model());
  const StereoSample s = small_set(1, 2)[0];
  std::vector<const StereoSample*> one{&s};
  const Var<double> l(stack_images<double>(one, false)), r(stack_images<double>(one, true));
  const Tensor<double> gt = s.disparity.cast<double>().reshaped({1, 1, 32, 64});
  const Tensor<std::uint8_t> mask = s.valid.reshaped({1, 1, 32, 64});
  TrainingModeGuard batch_stats;
  auto objective = [&] {
    const Prediction<double> p = model.forward(l, r);
    return total_loss(p.d_init, p.d_final, gt, mask);
  };
  Adam<double> opt(model.params());
  model.params().zero_grad();
  Var<double> before = objective();
  before.backward();
  opt.step(1e-6);
  NoGradGuard ng;
  EXPECT_LT(objective().value()[0], before.value()[0]);
}

TEST(Training, DeterministicRunsProduceIdenticalLogs) {
  const auto train_set = small_set(4, 3), val_set = small_set(1, 4);
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    StereoModel<float> model(small_model());
    TrainConfig t = small_train(3);
    t.deterministic = true;
    t.eval_every = 2;
    t.out_dir = temp_dir("train_det" + std::to_string(run));
    train(model, train_set, val_set, t);
    logs[run] = slurp(t.out_dir / "metrics.jsonl");
    EXPECT_TRUE(std::filesystem::exists(t.out_dir / "ckpt_3.bin"));
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
  std::istringstream lines(logs[0]);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "split", "loss", "epe", "d1", "wall_ms"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["wall_ms"].get<double>(), 0.0);
    ++n;
  }
  EXPECT_EQ(n, 5);  // three train records, val at steps 2 and 3
}

TEST(Training, NonFiniteLossAbortsWithStep) {
  std::vector<StereoSample> bad = small_set(1, 5);
  for (std::size_t i = 0; i < bad[0].disparity.numel(); ++i) bad[0].disparity[i] = std::numeric_limits<float>::quiet_NaN();
  StereoModel<float> model(small_model());
  TrainConfig t = small_train(3);
  t.out_dir = temp_dir("train_nan");
  try {
    train(model, bad, {}, t);
    FAIL() << "expected abort";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.step(), 1);
  }
  const auto j = nlohmann::json::parse(slurp(t.out_dir / "metrics.jsonl"));
  EXPECT_EQ(j["step"].get<int>(), 1);
  EXPECT_TRUE(j.contains("error"));
}

TEST(Training, CheckpointsRestoreExactlyAndCheckFingerprint) {
  StereoModel<float> model(small_model());
  TrainConfig t = small_train(2);
  t.ckpt_every = 1;
  t.out_dir = temp_dir("train_ckpt");
  const auto val = small_set(1, 6);
  train(model, small_set(2, 7), val, t);
  EXPECT_TRUE(std::filesystem::exists(t.out_dir / "ckpt_1.bin"));
  EXPECT_EQ(resolve_checkpoint(t.out_dir), t.out_dir / "ckpt_2.bin");
  const Checkpoint c = load_checkpoint(resolve_checkpoint(t.out_dir));
  EXPECT_EQ(c.step, 2u);

  StereoModel<float> fresh(small_model());
  restore(fresh.params(), c, small_model().fingerprint());
  const EvalReport a = evaluate(model, val), b = evaluate(fresh, val);
  EXPECT_EQ(a.epe, b.epe);

  ModelConfig other = small_model();
  other.paradigm = Paradigm::kConv3D;
  StereoModel<float> wrong(other);
  EXPECT_THROW(restore(wrong.params(), c, other.fingerprint()), CheckpointError);
  std::string bytes = encode_checkpoint(c);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(c).substr(0, 40)), CheckpointError);
}

TEST(TrainConfig, RejectsInvalidSettings) {
  TrainConfig t;
  t.batch = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = TrainConfig{};
  t.crop_width = 100;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  EXPECT_EQ(TrainConfig{}.batch, 4);
  EXPECT_EQ(TrainConfig{}.lr, 4e-4);
}
