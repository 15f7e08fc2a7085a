#pragma once

// Analytic FLOP counting, wall-clock latency measurement and the decoupled-vs-coupled comparison.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dbs/model.hpp"

namespace dbs {

inline constexpr int kMinWarmup = 10;
inline constexpr int kMinIters = 30;

// 2 * output elements * (kernel volume * in_channels / groups), summed over layers.
inline std::int64_t count_flops(const std::vector<ConvLayerDesc>& layers) {
  std::int64_t total = 0;
  for (const auto& l : layers) {
    std::int64_t out = static_cast<std::int64_t>(l.batch) * l.out_channels;
    for (int e : l.out_size) {
      if (e < 0) throw std::invalid_argument("layer " + l.name + " has an unresolved output extent");
      out *= e;
    }
    const std::int64_t kvol = static_cast<std::int64_t>(l.kernel[0]) * l.kernel[1] * l.kernel[2];
    total += 2 * out * kvol * (l.in_channels / l.groups);
  }
  return total;
}

struct LatencyStats {
  std::vector<double> series_ms;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
  int warmup = 0;
  int iters = 0;
  std::string clock = "std::chrono::steady_clock";
};

class BenchmarkAborted : public std::runtime_error {
 public:
  BenchmarkAborted(const std::string& why, std::vector<double> partial)
      : std::runtime_error("benchmark aborted after " + std::to_string(partial.size()) + " timed iterations: " + why),
        partial_(std::move(partial)) {}
  const std::vector<double>& partial_series() const { return partial_; }

 private:
  std::vector<double> partial_;
};

// Nearest-rank percentile of an unsorted series.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty series");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty series");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs `fn` warmup + iters times and times each call after it returns (CPU execution is synchronous).
inline LatencyStats measure_latency(const std::function<void()>& fn, int warmup = kMinWarmup, int iters = kMinIters) {
  if (warmup < kMinWarmup) throw std::invalid_argument("warmup must be >= " + std::to_string(kMinWarmup));
  if (iters < kMinIters) throw std::invalid_argument("iters must be >= " + std::to_string(kMinIters));
  LatencyStats s;
  s.warmup = warmup;
  s.iters = iters;
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup + iters; ++i) {
    const auto t0 = clock::now();
    try {
      fn();
    } catch (const std::exception& e) {
      throw BenchmarkAborted(e.what(), s.series_ms);
    }
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    if (i >= warmup) s.series_ms.push_back(ms);
  }
  s.median_ms = median(s.series_ms);
  s.p95_ms = percentile(s.series_ms, 95.0);
  double acc = 0.0;
  for (double v : s.series_ms) acc += v;
  s.mean_ms = acc / static_cast<double>(s.series_ms.size());
  return s;
}

inline std::string hardware_descriptor() {
  std::ifstream in("/proc/cpuinfo");
  std::string line, model = "unknown cpu";
  while (std::getline(in, line))
    if (line.rfind("model name", 0) == 0) {
      model = line.substr(line.find(':') + 2);
      break;
    }
  return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, cpu float32";
}

// Exclusive advisory lock so that two benchmarks never time each other.
class BenchmarkLock {
 public:
  explicit BenchmarkLock(std::string path = "/tmp/dbs-bench.lock") : path_(std::move(path)) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open benchmark lock " + path_);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("another benchmark holds " + path_);
    }
  }
  ~BenchmarkLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  BenchmarkLock(const BenchmarkLock&) = delete;
  BenchmarkLock& operator=(const BenchmarkLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

// Aggregator input: D disparity candidates on an h x w quarter-resolution grid.
struct BenchShape {
  int disparities = 16;
  int height = 24;
  int width = 32;
  bool operator==(const BenchShape&) const = default;
};

inline std::string to_string(const BenchShape& s) {
  return std::to_string(s.disparities) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

inline BenchShape parse_bench_shape(const std::string& text) {
  BenchShape s;
  char x1 = 0, x2 = 0;
  std::istringstream is(text);
  if (!(is >> s.disparities >> x1 >> s.height >> x2 >> s.width) || x1 != 'x' || x2 != 'x' || !is.eof() ||
      s.disparities < 1 || s.height < 1 || s.width < 1)
    throw std::invalid_argument("bad shape '" + text + "', expected DxHxW, e.g. 16x24x32");
  return s;
}

inline std::vector<BenchShape> default_bench_shapes() { return {{8, 24, 32}, {16, 24, 32}, {16, 48, 64}}; }

struct BenchRow {
  std::string aggregator;  // "bga" or "conv3d"; "-full" suffix for whole-model rows
  std::string variant;
  BenchShape shape;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
  int warmup = 0;
  int iters = 0;
  std::string hardware;
  bool operator==(const BenchRow&) const = default;
};

struct PairVerdict {
  std::string variant;
  BenchShape shape;
  double param_ratio = 0.0;  // conv3d / bga
  bool flops_pass = false;
  bool latency_pass = false;
  bool operator==(const PairVerdict&) const = default;
};

struct BenchmarkReport {
  std::vector<BenchRow> rows;
  std::vector<PairVerdict> pairs;
  bool all_pass() const {
    return std::all_of(pairs.begin(), pairs.end(), [](const PairVerdict& p) { return p.flops_pass && p.latency_pass; });
  }
  bool operator==(const BenchmarkReport&) const = default;
};

// Both aggregators for one variant at one disparity count, with the baseline matched to the BGA budget.
struct AggregatorPair {
  BGAConfig bga;
  Baseline3DConfig conv3d;
  std::int64_t bga_params = 0;
  std::int64_t conv3d_params = 0;
};

inline AggregatorPair make_pair_for(Variant v, int disparities) {
  AggregatorPair p;
  p.bga.variant = v;
  p.bga.disparities = disparities;
  p.bga_params = bga_param_count(p.bga);
  p.conv3d = match_baseline_params(p.bga_params, p.bga);
  p.conv3d_params = baseline3d_param_count(p.conv3d);
  const double ratio = static_cast<double>(p.conv3d_params) / static_cast<double>(p.bga_params);
  if (std::abs(ratio - 1.0) > 0.10)
    throw std::invalid_argument("parameter budgets differ by more than 10% for variant " + to_string(v));
  return p;
}

inline std::int64_t bga_flops(const BGAConfig& cfg, int h, int w) {
  ParamStore<float> ps;
  return count_flops(BGA<float>(ps, cfg).describe(h, w));
}

inline std::int64_t conv3d_flops(const Baseline3DConfig& cfg, int h, int w) {
  ParamStore<float> ps;
  return count_flops(Baseline3D<float>(ps, cfg).describe(cfg.disparities, h, w));
}

struct BenchOptions {
  int warmup = kMinWarmup;
  int iters = kMinIters;
  std::uint64_t seed = 0;
  bool full_model = false;  // also time feature extraction through upsampling, reported but not gated
};

// Whole model on a 4h x 4w image pair with d_max = 4D, so its aggregator sees the shape `s`.
inline BenchRow time_full_model(Variant v, Paradigm par, const BenchShape& s, const BenchOptions& opt,
                                const std::string& hw) {
  ModelConfig mc;
  mc.variant = v;
  mc.paradigm = par;
  mc.d_max = 4 * s.disparities;
  mc.seed = opt.seed;
  const StereoModel<float> model(mc);
  const int H = 4 * s.height, W = 4 * s.width;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> l({1, 3, H, W}), r({1, 3, H, W});
  for (auto& x : l.data()) x = u(rng);
  for (auto& x : r.data()) x = u(rng);
  const Var<float> lv(l), rv(r);
  const LatencyStats st = measure_latency([&] { (void)model.forward(lv, rv); }, opt.warmup, opt.iters);
  return {to_string(par) + "-full", to_string(v), s, model.params().count(), count_flops(model.describe(H, W)),
          st.median_ms, st.p95_ms, st.mean_ms, st.warmup, st.iters, hw};
}

// Times the two aggregators of each (variant, shape) in isolation on random volumes (batch 1, no graph).
inline BenchmarkReport compare_paradigms(const std::vector<Variant>& variants, const std::vector<BenchShape>& shapes,
                                         const BenchOptions& opt = {}) {
  BenchmarkReport report;
  const std::string hw = hardware_descriptor();
  NoGradGuard ng;
  for (Variant v : variants)
    for (const BenchShape& s : shapes) {
      const AggregatorPair pair = make_pair_for(v, s.disparities);
      const int G = pair.bga.resolved_groups();
      std::mt19937_64 rng(opt.seed);
      std::normal_distribution<float> nd;
      Tensor<float> vol({1, G, s.disparities, s.height, s.width});
      for (auto& x : vol.data()) x = nd(rng);
      const Var<float> vol4(vol);
      const Var<float> vol3(channel2disp(vol));

      ParamStore<float> ps_b(opt.seed), ps_c(opt.seed);
      BGA<float> bga(ps_b, pair.bga);
      Baseline3D<float> c3(ps_c, pair.conv3d);
      const LatencyStats lb = measure_latency([&] { (void)bga(vol3); }, opt.warmup, opt.iters);
      const LatencyStats lc = measure_latency([&] { (void)c3(vol4); }, opt.warmup, opt.iters);

      BenchRow rb{"bga", to_string(v), s, pair.bga_params, count_flops(bga.describe(s.height, s.width)),
                  lb.median_ms, lb.p95_ms, lb.mean_ms, lb.warmup, lb.iters, hw};
      BenchRow rc{"conv3d", to_string(v), s, pair.conv3d_params,
                  count_flops(c3.describe(s.disparities, s.height, s.width)), lc.median_ms, lc.p95_ms, lc.mean_ms,
                  lc.warmup, lc.iters, hw};
      report.pairs.push_back({to_string(v), s, static_cast<double>(rc.params) / static_cast<double>(rb.params),
                              rb.flops < rc.flops, rb.median_ms < rc.median_ms});
      report.rows.push_back(std::move(rb));
      report.rows.push_back(std::move(rc));
      if (opt.full_model)
        for (Paradigm par : {Paradigm::kBGA, Paradigm::kConv3D})
          report.rows.push_back(time_full_model(v, par, s, opt, hw));
    }
  return report;
}

inline nlohmann::json to_json(const BenchRow& r) {
  return {{"kind", "row"},          {"aggregator", r.aggregator}, {"variant", r.variant},
          {"shape", to_string(r.shape)}, {"params", r.params},   {"flops", r.flops},
          {"median_ms", r.median_ms}, {"p95_ms", r.p95_ms},       {"mean_ms", r.mean_ms},
          {"warmup", r.warmup},     {"iters", r.iters},           {"hardware", r.hardware}};
}

inline nlohmann::json to_json(const PairVerdict& p) {
  return {{"kind", "pair"},
          {"variant", p.variant},
          {"shape", to_string(p.shape)},
          {"param_ratio", p.param_ratio},
          {"flops_pass", p.flops_pass},
          {"latency_pass", p.latency_pass}};
}

inline std::string to_json_lines(const BenchmarkReport& r) {
  std::string out;
  for (const auto& row : r.rows) out += to_json(row).dump() + "\n";
  for (const auto& p : r.pairs) out += to_json(p).dump() + "\n";
  return out;
}

inline BenchmarkReport bench_report_from_json_lines(const std::string& text) {
  BenchmarkReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string kind = j.at("kind");
    if (kind == "row") {
      r.rows.push_back({j.at("aggregator"), j.at("variant"), parse_bench_shape(j.at("shape")), j.at("params"),
                        j.at("flops"), j.at("median_ms"), j.at("p95_ms"), j.at("mean_ms"), j.at("warmup"),
                        j.at("iters"), j.at("hardware")});
    } else if (kind == "pair") {
      r.pairs.push_back({j.at("variant"), parse_bench_shape(j.at("shape")), j.at("param_ratio"), j.at("flops_pass"),
                         j.at("latency_pass")});
    } else {
      throw std::invalid_argument("unknown benchmark record kind '" + kind + "'");
    }
  }
  return r;
}

inline std::string to_table(const BenchmarkReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(13) << "agg" << std::setw(8) << "variant" << std::setw(12) << "DxHxW" << std::right
     << std::setw(10) << "params" << std::setw(14) << "MFLOPs" << std::setw(12) << "median ms" << std::setw(10)
     << "p95 ms" << "\n";
  for (const auto& row : r.rows)
    os << std::left << std::setw(13) << row.aggregator << std::setw(8) << row.variant << std::setw(12)
       << to_string(row.shape) << std::right << std::setw(10) << row.params << std::setw(14) << std::fixed
       << std::setprecision(2) << static_cast<double>(row.flops) / 1e6 << std::setw(12) << std::setprecision(3)
       << row.median_ms << std::setw(10) << row.p95_ms << "\n";
  for (const auto& p : r.pairs)
    os << p.variant << " " << to_string(p.shape) << ": params conv3d/bga " << std::setprecision(3) << p.param_ratio
       << ", FLOPs bga<conv3d " << (p.flops_pass ? "pass" : "FAIL") << ", latency bga<conv3d "
       << (p.latency_pass ? "pass" : "FAIL") << "\n";
  if (!r.rows.empty()) os << "hardware: " << r.rows.front().hardware << "\n";
  return os.str();
}

}  // namespace dbs
