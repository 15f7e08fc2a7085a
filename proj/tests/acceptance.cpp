// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only if all pass.
// Usage: acceptance [criterion numbers...]   (no arguments runs all twelve)

#include <sys/wait.h>

#include <bit>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "dbs/aggregation.hpp"
#include "dbs/bench.hpp"
#include "dbs/costvolume.hpp"
#include "dbs/data.hpp"
#include "dbs/metrics.hpp"
#include "dbs/regression.hpp"
#include "dbs/training.hpp"
#include "test_util.hpp"

using namespace dbs;
using dbs::testing::gradient_check;
using dbs::testing::random_tensor;
using dbs::testing::temp_dir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

template <class T>
void randomize(ParamStore<T>& ps, std::mt19937_64& rng, double amp = 0.5) {
  std::uniform_real_distribution<double> u(-amp, amp), pos(0.5, 1.5);
  for (const auto& [name, v] : ps.params()) {
    Var<T> h = v;
    const bool is_var = name.ends_with(".running_var");
    for (auto& x : h.mutable_value().data()) x = static_cast<T>(is_var ? pos(rng) : u(rng));
  }
}

BGAConfig tiny_bga(int D) {
  BGAConfig c;
  c.disparities = D;
  return c;
}

// ---- 1 -------------------------------------------------------------------------------------

Tensor<double> loop_gwc(const Tensor<double>& l, const Tensor<double>& r, int D, int G) {
  const int N = l.dim(0), C = l.dim(1), H = l.dim(2), W = l.dim(3), cg = C / G;
  Tensor<double> out({N, G, D, H, W});
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < G; ++g)
      for (int d = 0; d < D; ++d)
        for (int y = 0; y < H; ++y)
          for (int x = d; x < W; ++x) {
            double acc = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c) acc += l.at(n, c, y, x) * r.at(n, c, y, x - d);
            out.at(n, g, d, y, x) = acc / cg;
          }
  return out;
}

Outcome correlation_oracle() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const int G = 1 << (k % 3);                 // 1, 2, 4
    const int C = G * (1 + k % (8 / G));        // <= 8
    const int H = 1 + k % 8, W = 4 + 4 * (k % 2);
    const int D = 1 + k % W;                    // <= W <= 8
    const Tensor<double> l = random_tensor({1 + k % 2, C, H, W}, rng), r = random_tensor({1 + k % 2, C, H, W}, rng);
    const Tensor<double> v = build_gwc_volume(Var<double>(l), Var<double>(r), 4 * D, G).value();
    worst = std::max(worst, max_abs_diff(v, loop_gwc(l, r, D, G)));
  }
  return {worst <= 1e-6, "max |diff| " + sci(worst) + " over 20 instances"};
}

// ---- 2 -------------------------------------------------------------------------------------

Outcome channel2disp_bijection() {
  std::mt19937_64 rng(102);
  int exact = 0;
  double worst_sum = 0.0;
  for (int k = 0; k < 100; ++k) {
    const int G = 1 + k % 4, D = 1 + k % 7;
    const Tensor<double> v = random_tensor({1 + k % 2, G, D, 1 + k % 5, 2 + k % 6}, rng);
    const Tensor<double> f = channel2disp(v);
    exact += bit_equal(disp2channel(f, G), v);
    worst_sum = std::max(worst_sum, std::abs(sum(f) - sum(v)));
  }
  return {exact == 100 && worst_sum == 0.0,
          std::to_string(exact) + "/100 bit-exact round trips, max sum drift " + sci(worst_sum)};
}

// ---- 3 -------------------------------------------------------------------------------------

template <class T>
bool spatial_isolated(const SpatialAggregation<T>& layer, int levels, const Tensor<T>& x) {
  const int cin = x.dim(1), bin = cin / levels;
  const Tensor<T> full = layer(Var<T>(x)).value();
  const int bout = full.dim(1) / levels;
  const std::size_t pin = x.numel() / (static_cast<std::size_t>(x.dim(0)) * cin);
  const std::size_t pout = full.numel() / (static_cast<std::size_t>(full.dim(0)) * full.dim(1));
  for (int k = 0; k < levels; ++k) {
    Tensor<T> z = x;
    for (int n = 0; n < x.dim(0); ++n)
      for (int c = 0; c < cin; ++c)
        if (c / bin != k)
          for (std::size_t p = 0; p < pin; ++p) z[(static_cast<std::size_t>(n) * cin + c) * pin + p] = T{0};
    const Tensor<T> iso = layer(Var<T>(z)).value();
    for (int n = 0; n < x.dim(0); ++n)
      for (int c = k * bout; c < (k + 1) * bout; ++c)
        for (std::size_t p = 0; p < pout; ++p) {
          const std::size_t i = (static_cast<std::size_t>(n) * full.dim(1) + c) * pout + p;
          if (!same_bits(full[i], iso[i])) return false;
        }
  }
  return true;
}

template <class T>
bool disparity_isolated(const DisparityAggregation<T>& layer, Tensor<T> x, std::mt19937_64& rng) {
  const int H = x.dim(2), W = x.dim(3);
  const int py = static_cast<int>(rng() % H), px = static_cast<int>(rng() % W);
  const Tensor<T> a = layer(Var<T>(x)).value();
  for (int c = 0; c < x.dim(1); ++c) x.at(0, c, py, px) += T{1};
  const Tensor<T> b = layer(Var<T>(x)).value();
  for (int c = 0; c < a.dim(1); ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        if ((y != py || xx != px) && !same_bits(a.at(0, c, y, xx), b.at(0, c, y, xx))) return false;
  return true;
}

Outcome decoupling_invariants() {
  std::mt19937_64 rng(103);
  const int D = 8;
  ParamStore<double> ps(3);
  BGA<double> bga(ps, tiny_bga(D));
  int checks = 0, ok = 0;
  for (int trial = 0; trial < 10; ++trial) {
    randomize(ps, rng);
    for (const auto* layer : bga.spatial_layers()) {
      ++checks;
      ok += spatial_isolated(*layer, D, random_tensor({1, layer->in_channels(), 6, 8}, rng));
    }
    for (const auto* layer : bga.disparity_layers()) {
      ++checks;
      ok += disparity_isolated(*layer, random_tensor({1, layer->in_channels(), 6, 8}, rng), rng);
    }
  }
  return {checks > 0 && ok == checks,
          std::to_string(ok) + "/" + std::to_string(checks) + " layer checks bit-equal (" +
              std::to_string(bga.spatial_layers().size()) + " spatial + " + std::to_string(bga.disparity_layers().size()) +
              " disparity layers x 10 inputs)"};
}

// ---- 4 -------------------------------------------------------------------------------------

Outcome disparity_reach() {
  std::mt19937_64 rng(104);
  const int D = 8;
  ParamStore<double> ps(4);
  BGA<double> bga(ps, tiny_bga(D));
  randomize(ps, rng);
  // first encoder block: input is D contiguous bundles, one per disparity level
  const DisparityAggregation<double>& layer = *bga.disparity_layers()[1];
  const int C = layer.in_channels(), bundle = C / D;
  Var<double> x(random_tensor({1, C, 3, 3}, rng), true);
  const Var<double> y = layer(x);
  int zeros = 0, leaks = 0;
  std::set<int> reached_levels;
  for (int o = 0; o < y.shape()[1]; ++o) {
    x.zero_grad();
    Tensor<double> seed(y.shape());
    seed.at(0, o, 1, 1) = 1.0;
    y.backward(seed);
    const Tensor<double> g = x.grad();
    for (int c = 0; c < C; ++c) {
      if (g.at(0, c, 1, 1) == 0.0) ++zeros;
      else if (o == 0) reached_levels.insert(c / bundle);
      for (int p = 0; p < 9; ++p)
        if (p != 4 && g[static_cast<std::size_t>(c) * 9 + p] != 0.0) ++leaks;
    }
  }
  const bool dense = zeros == 0 && leaks == 0 && static_cast<int>(reached_levels.size()) == D;

  // One 3x3x3 layer of the matched baseline moves an impulse by at most one disparity level.
  Baseline3DConfig cfg;
  cfg.groups = 2;
  cfg.disparities = 9;
  cfg.widths = {3, 3, 3};
  ParamStore<double> ps3(5);
  Baseline3D<double> base(ps3, cfg);
  randomize(ps3, rng);
  Tensor<double> zero({1, 2, 9, 7, 7}), impulse({1, 2, 9, 7, 7});
  impulse.at(0, 1, 4, 3, 3) = 1.0;
  const Tensor<double> a = base.entry()(Var<double>(zero)).value(), b = base.entry()(Var<double>(impulse)).value();
  int lo = 9, hi = -1;
  for (int o = 0; o < 3; ++o)
    for (int d = 0; d < 9; ++d)
      for (int yy = 0; yy < 7; ++yy)
        for (int xx = 0; xx < 7; ++xx)
          if (a.at(0, o, d, yy, xx) != b.at(0, o, d, yy, xx)) {
            lo = std::min(lo, d);
            hi = std::max(hi, d);
          }
  const bool local = lo == 3 && hi == 5;
  return {dense && local, "disparity layer: " + std::to_string(zeros) + " zero Jacobian entries, " +
                              std::to_string(reached_levels.size()) + "/" + std::to_string(D) +
                              " levels reached; 3D layer impulse spans d=" + std::to_string(lo) + ".." +
                              std::to_string(hi) + " around 4"};
}

// ---- 5 -------------------------------------------------------------------------------------

Outcome gradient_checks() {
  std::mt19937_64 rng(105);
  const Tensor<double> l = random_tensor({1, 4, 3, 4}, rng), r = random_tensor({1, 4, 3, 4}, rng);
  const double e_gwc = std::max(
      gradient_check([&](const Var<double>& v) { return build_gwc_volume(v, Var<double>(r), 12, 2); }, l, rng),
      gradient_check([&](const Var<double>& v) { return build_gwc_volume(Var<double>(l), v, 12, 2); }, r, rng));
  const double e_soft = gradient_check([](const Var<double>& v) { return soft_argmin(v).disparity; },
                                       random_tensor({2, 6, 2, 3}, rng, -3.0, 3.0), rng);
  ParamStore<double> ps(6);
  BGA<double> bga(ps, tiny_bga(4));
  randomize(ps, rng);
  const Tensor<double> x = random_tensor({1, 32, 4, 6}, rng);
  const double e_bga = std::max(gradient_check([&](const Var<double>& v) { return bga(v).scores; }, x, rng),
                                gradient_check([&](const Var<double>& v) { return bga(v).init_scores; }, x, rng));
  return {e_gwc <= 1e-4 && e_soft <= 1e-4 && e_bga <= 1e-3,
          "rel err gwc " + sci(e_gwc) + ", soft-argmin " + sci(e_soft) + ", tiny BGA " + sci(e_bga)};
}

// ---- 6 -------------------------------------------------------------------------------------

Outcome soft_argmin_contracts() {
  std::mt19937_64 rng(106);
  const int D = 12;
  const Tensor<double> s = random_tensor({1, D, 1, 1000}, rng, -50.0, 50.0);
  const Tensor<double> d = soft_argmin(Var<double>(s)).disparity.value();
  int in_range = 0;
  for (double v : d.data()) in_range += v >= 0.0 && v <= D - 1;
  bool uniform_exact = true;
  for (int n : {2, 7, 16, 48}) {
    const double u = soft_argmin(Var<double>(Tensor<double>({1, n, 1, 1}, 0.37))).disparity.value()[0];
    uniform_exact = uniform_exact && u == (n - 1) / 2.0;
  }
  Tensor<double> shifted = s;
  std::uniform_real_distribution<double> shift(-100.0, 100.0);
  for (int p = 0; p < 1000; ++p) {
    const double c = shift(rng);
    for (int k = 0; k < D; ++k) shifted.at(0, k, 0, p) += c;
  }
  const double drift = max_abs_diff(soft_argmin(Var<double>(shifted)).disparity.value(), d);
  return {in_range == 1000 && uniform_exact && drift <= 1e-6,
          std::to_string(in_range) + "/1000 in [0, D-1], uniform exact " + (uniform_exact ? "yes" : "no") +
              ", shift drift " + sci(drift)};
}

// ---- 7 -------------------------------------------------------------------------------------

Outcome loss_arithmetic() {
  const Tensor<double> gt({1, 1, 1, 2}, {3.0, 5.0});
  const Tensor<std::uint8_t> m({1, 1, 1, 2}, 1);
  const Var<double> perfect(Tensor<double>({1, 1, 1, 2}, {3.0, 5.0}));
  const Var<double> off(Tensor<double>({1, 1, 1, 2}, {4.5, 3.5}));  // |e| = 1.5 everywhere
  const double a = total_loss(perfect, perfect, gt, m).value()[0];
  const double b = total_loss(off, perfect, gt, m).value()[0];
  const double c = total_loss(perfect, off, gt, m).value()[0];
  return {a == 0.0 && b == 0.3 && c == 1.0, "losses " + fmt(a, 6) + " / " + fmt(b, 6) + " / " + fmt(c, 6)};
}

// ---- 8 -------------------------------------------------------------------------------------

struct LearningRun {
  EvalReport report;
  double seconds = 0.0;
};

LearningRun learn(Paradigm paradigm, const std::vector<StereoSample>& train_set, const std::vector<StereoSample>& val_set) {
  ModelConfig mc;
  mc.paradigm = paradigm;
  mc.seed = 3;
  StereoModel<float> model(mc);
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch = 4;
  tc.lr = 3e-3;
  tc.crop_height = 64;
  tc.crop_width = 96;
  tc.augment = true;
  tc.seed = 0;
  tc.eval_every = 0;
  tc.log_every = 250;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r = train(model, train_set, val_set, tc);
  return {r.final_eval, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

Outcome synthetic_learning() {
  SyntheticConfig sc;  // 96 x 128, d_max 32
  sc.dot_size = 8;
  sc.seed = 1;
  SyntheticConfig held = sc;
  held.seed = 999;
  std::vector<StereoSample> train_set, val_set;
  for (int i = 0; i < 50; ++i) train_set.push_back(synthesize_indexed(sc, i));
  for (int i = 0; i < 10; ++i) val_set.push_back(synthesize_indexed(held, i));

  const LearningRun bga = learn(Paradigm::kBGA, train_set, val_set);
  std::cout << "    bga:    EPE " << fmt(bga.report.epe) << "  >3px " << fmt(bga.report.d1_3px, 2) << "%  "
            << fmt(bga.seconds, 0) << " s" << std::endl;
  const LearningRun c3 = learn(Paradigm::kConv3D, train_set, val_set);
  std::cout << "    conv3d: EPE " << fmt(c3.report.epe) << "  >3px " << fmt(c3.report.d1_3px, 2) << "%  "
            << fmt(c3.seconds, 0) << " s" << std::endl;
  const double total = bga.seconds + c3.seconds;
  const bool pass = bga.report.epe < 1.5 && bga.report.d1_3px < 8.0 && c3.report.epe <= 2.0 * bga.report.epe &&
                    total < 30 * 60;
  return {pass, "BGA EPE " + fmt(bga.report.epe) + " (>3px " + fmt(bga.report.d1_3px, 2) + "%), conv3d EPE " +
                    fmt(c3.report.epe) + " (ratio " + fmt(c3.report.epe / bga.report.epe, 2) + "), " + fmt(total, 0) +
                    " s total"};
}

// ---- 9 -------------------------------------------------------------------------------------

Outcome performance_direction() {
  BenchmarkLock lock;
  const BenchmarkReport r =
      compare_paradigms({Variant::kTiny, Variant::kS, Variant::kM, Variant::kL}, default_bench_shapes());
  int flops = 0, latency = 0, budget = 0;
  for (const auto& p : r.pairs) {
    flops += p.flops_pass;
    latency += p.latency_pass;
    budget += std::abs(p.param_ratio - 1.0) <= 0.10;
  }
  std::istringstream table(to_table(r));
  for (std::string line; std::getline(table, line);) std::cout << "    " << line << "\n";
  const int n = static_cast<int>(r.pairs.size());
  return {n == 12 && flops == n && latency == n && budget == n,
          "FLOPs " + std::to_string(flops) + "/" + std::to_string(n) + ", latency " + std::to_string(latency) + "/" +
              std::to_string(n) + ", params within 10% " + std::to_string(budget) + "/" + std::to_string(n)};
}

// ---- 10 ------------------------------------------------------------------------------------

Outcome metrics_oracle() {
  std::mt19937_64 rng(110);
  std::bernoulli_distribution keep(0.7);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Tensor<double> p = random_tensor({9, 13}, rng, 0.0, 30.0), g = random_tensor({9, 13}, rng, 0.0, 30.0);
    Tensor<std::uint8_t> m({9, 13});
    for (auto& v : m.data()) v = keep(rng);
    double s = 0.0;
    int n = 0, b1 = 0, b3 = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      if (!m[i]) continue;
      const double e = std::fabs(p[i] - g[i]);
      s += e;
      b1 += e > 1.0;
      b3 += e > 3.0;
      ++n;
    }
    worst = std::max({worst, std::abs(*epe(p, g, m) - s / n), std::abs(*outlier_rate(p, g, m, 1.0) - 100.0 * b1 / n),
                      std::abs(*outlier_rate(p, g, m, 3.0) - 100.0 * b3 / n)});
  }
  const double h16 = distribution_diagnostics(Tensor<double>({16, 1, 1}, 1.0 / 16.0)).entropy[0];
  const double h3 = distribution_diagnostics(Tensor<double>({3, 1, 1}, {0.5, 0.25, 0.25})).entropy[0];
  const bool entropy_ok = std::abs(h16 - 2.7726) < 5e-5 && std::abs(h3 - 1.0397) < 5e-5;
  return {worst <= 1e-6 && entropy_ok,
          "max |diff| " + sci(worst) + " over 20 maps, entropies " + fmt(h16) + " / " + fmt(h3)};
}

// ---- 11 ------------------------------------------------------------------------------------

std::string float_bytes(float v, bool little) {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(v);
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[little ? i : 3 - i] = static_cast<char>((u >> (8 * i)) & 0xff);
  return s;
}

Outcome format_round_trips() {
  std::mt19937_64 rng(111);
  const fs::path dir = temp_dir("accept_formats");
  const Tensor<float> m = random_tensor<float>({7, 11}, rng, -500.0, 500.0);
  write_pfm(dir / "m.pfm", m);
  const bool pfm_rt = bit_equal(load_pfm(dir / "m.pfm").map, m);

  Tensor<float> d = random_tensor<float>({7, 11}, rng, 0.0, 250.0);
  for (auto& v : d.data()) v = std::round(v * 256.0f) / 256.0f;
  d[3] = 0.0f;  // invalid pixel
  Tensor<std::uint8_t> valid({7, 11}, 1);
  valid[3] = 0;
  write_kitti_disparity_png(dir / "d.png", d, &valid);
  const KittiDisparity k = load_kitti_disparity_png(dir / "d.png");
  const bool png_rt = bit_equal(k.disparity, d) && bit_equal(k.valid, valid);

  const PfmImage le = decode_pfm(std::string("Pf\n1 1\n-1.0\n") + float_bytes(2.5f, true));
  const PfmImage be = decode_pfm(std::string("Pf\n1 2\n1.0\n") + float_bytes(7.0f, false) + float_bytes(9.0f, false));
  write_png(dir / "fixture.png", PngData{3, 1, 1, 16, {256, 0, 12800}});
  const KittiDisparity kf = load_kitti_disparity_png(dir / "fixture.png");
  const bool fixtures = le.map[0] == 2.5f && be.map.at(0, 0) == 9.0f && be.map.at(1, 0) == 7.0f &&
                        kf.disparity[0] == 1.0f && kf.valid[1] == 0 && kf.disparity[2] == 50.0f;
  fs::remove_all(dir);
  return {pfm_rt && png_rt && fixtures, std::string("PFM ") + (pfm_rt ? "exact" : "MISMATCH") + ", KITTI PNG " +
                                            (png_rt ? "exact" : "MISMATCH") + ", fixtures " + (fixtures ? "ok" : "WRONG")};
}

// ---- 12 ------------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int shell(const std::string& cmd) {
  const int s = std::system(cmd.c_str());
  return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
}

Outcome cli_determinism() {
  const fs::path root = temp_dir("accept_determinism");
  const std::string bin = std::string("DBS_DETERMINISTIC=1 ") + DBS_CLI_PATH;
  const std::string quiet = " >/dev/null 2>&1";
  const std::string common = " --height 32 --width 64 --d-max 16";
  if (shell(bin + " synth-gen --count 4 --seed 21 --out " + (root / "train").string() + common + quiet) != 0 ||
      shell(bin + " synth-gen --count 1 --seed 22 --out " + (root / "val").string() + common + quiet) != 0)
    return {false, "synth-gen failed"};
  std::string files[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path out = root / ("run" + std::to_string(k));
    const std::string train = bin + " train --data " + (root / "train").string() + " --val " + (root / "val").string() +
                              " --out " + out.string() +
                              " --steps 4 --set model.d_max=16 --set model.base_channels=8 --set train.batch=2"
                              " --set train.crop_height=32 --set train.crop_width=64 --set train.log_every=1"
                              " --set train.eval_every=2 --set train.augment=true";
    const std::string infer = bin + " infer --ckpt " + out.string() + " --left " +
                              (root / "val" / "000000_left.png").string() + " --right " +
                              (root / "val" / "000000_right.png").string() + " --out " + (out / "infer").string();
    if (shell(train + quiet) != 0) return {false, "train run " + std::to_string(k) + " failed"};
    if (shell(infer + quiet) != 0) return {false, "infer run " + std::to_string(k) + " failed"};
    for (const char* f : {"metrics.jsonl", "ckpt_4.bin", "infer/disparity.pfm", "infer/disparity_kitti.png"}) {
      const std::string bytes = slurp(out / f);
      if (bytes.empty()) return {false, std::string("missing ") + f};
      files[k] += std::string(f) + ":" + std::to_string(bytes.size()) + ":" + bytes;
    }
  }
  fs::remove_all(root);
  return {files[0] == files[1], files[0] == files[1] ? "log, checkpoint and outputs bit-identical across two runs"
                                                      : "outputs differ between runs"};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
  double limit_s;  // 0: no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "correlation oracle", correlation_oracle, 10},
      {2, "channel2disp bijectivity", channel2disp_bijection, 5},
      {3, "decoupling invariants", decoupling_invariants, 30},
      {4, "global disparity reach", disparity_reach, 0},
      {5, "gradient checks", gradient_checks, 120},
      {6, "soft-argmin contracts", soft_argmin_contracts, 0},
      {7, "loss arithmetic", loss_arithmetic, 0},
      {8, "synthetic learning check", synthetic_learning, 30 * 60},
      {9, "performance direction", performance_direction, 0},
      {10, "metrics oracle", metrics_oracle, 0},
      {11, "format round trips", format_round_trips, 0},
      {12, "determinism", cli_determinism, 0},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.limit_s, 0) + " s limit";
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << " ["
              << fmt(secs, 2) << " s]" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed")) << "\n";
  return failed ? 1 : 0;
}
