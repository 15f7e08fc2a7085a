#pragma once

// Loss, optimiser, learning-rate schedule and the training loop.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/checkpoint.hpp"
#include "dbs/data.hpp"
#include "dbs/metrics.hpp"
#include "dbs/model.hpp"

namespace dbs {

// Receives non-fatal warnings; defaults to stderr.
inline std::function<void(const std::string&)>& warning_handler() {
  static std::function<void(const std::string&)> h = [](const std::string& m) { std::clog << "warning: " << m << "\n"; };
  return h;
}

inline bool deterministic_from_env() {
  const char* v = std::getenv("DBS_DETERMINISTIC");
  return v && std::string(v) == "1";
}

inline constexpr double kSmoothL1Beta = 1.0;

// Mean smooth-L1 of (pred - gt) over valid pixels. Zero (with a warning) when nothing is valid.
template <class T>
Var<T> smooth_l1(const Var<T>& pred, const Tensor<T>& gt, const Tensor<std::uint8_t>& mask, double beta = kSmoothL1Beta) {
  const Tensor<T>& P = pred.value();
  if (P.shape() != gt.shape() || gt.numel() != mask.numel())
    throw std::invalid_argument("smooth_l1: pred " + shape_str(P.shape()) + ", gt " + shape_str(gt.shape()) + ", mask " +
                                shape_str(mask.shape()) + " disagree");
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.numel(); ++i) n += mask[i] != 0;
  if (n == 0) warning_handler()("smooth_l1: no valid pixel, loss is 0");
  const T b = static_cast<T>(beta);
  T acc{0};
  for (std::size_t i = 0; i < P.numel(); ++i)
    if (mask[i]) {
      const T e = std::abs(P[i] - gt[i]);
      acc += e < b ? T(0.5) * e * e / b : e - T(0.5) * b;
    }
  Tensor<T> out({}, n ? acc / static_cast<T>(n) : T{0});
  return Var<T>::make(std::move(out), {pred}, [pred, gt, mask, n, b](const Tensor<T>& dy) {
    Tensor<T>* g = pred.grad_sink();
    if (!g || n == 0) return;
    const Tensor<T>& P = pred.value();
    const T s = dy[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < P.numel(); ++i)
      if (mask[i]) {
        const T e = P[i] - gt[i];
        (*g)[i] += s * (std::abs(e) < b ? e / b : (e > 0 ? T{1} : T{-1}));
      }
  });
}

struct LossWeights {
  double init = 0.3;
  double final = 1.0;
};

template <class T>
Var<T> total_loss(const Var<T>& d_init, const Var<T>& d_final, const Tensor<T>& gt, const Tensor<std::uint8_t>& mask,
                  LossWeights w = {}) {
  return add(scale(smooth_l1(d_init, gt, mask), static_cast<T>(w.init)), scale(smooth_l1(d_final, gt, mask), static_cast<T>(w.final)));
}

// One-cycle schedule: cosine warm-up from lr/div to lr, then cosine decay to lr/(div*final_div).
struct OneCycle {
  double max_lr = 4e-4;
  int total_steps = 1000;
  double pct_start = 0.3;
  double div = 25.0;
  double final_div = 1e4;

  double operator()(int step) const {
    const double start = max_lr / div, end = start / final_div;
    const double warm = std::max(1.0, pct_start * total_steps);
    auto cos_interp = [](double a, double b, double t) { return b + (a - b) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)); };
    if (step < warm) return cos_interp(start, max_lr, step / warm);
    const double rest = std::max(1.0, total_steps - warm);
    return cos_interp(max_lr, end, std::min(1.0, (step - warm) / rest));
  }
};

template <class T>
class Adam {
 public:
  explicit Adam(const ParamStore<T>& ps, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& [name, v] : ps.params()) {
      params_.push_back(v);
      m_.emplace_back(v.value().shape(), T{0});
      v_.emplace_back(v.value().shape(), T{0});
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!params_[k].has_grad()) continue;
      const Tensor<T>& g = params_[k].grad();
      Tensor<T>& w = params_[k].mutable_value();
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        m[i] = static_cast<T>(b1_ * m[i] + (1.0 - b1_) * g[i]);
        v[i] = static_cast<T>(b2_ * v[i] + (1.0 - b2_) * g[i] * g[i]);
        w[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  int steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
};

struct TrainConfig {
  double lr = 4e-4;
  int batch = 4;
  int steps = 2000;
  std::uint64_t seed = 0;
  LossWeights weights;
  int crop_height = 96;
  int crop_width = 128;
  bool deterministic = false;
  bool augment = false;  // random channel order and inversion per sample
  int log_every = 50;
  int eval_every = 500;     // 0 disables periodic evaluation (the final step is always evaluated)
  int ckpt_every = 1000;    // 0 keeps only the final checkpoint
  std::filesystem::path out_dir;  // empty: no files written

  void validate() const {
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
    if (weights.init < 0.0 || weights.final < 0.0) throw std::invalid_argument("train: loss weights must be >= 0");
    check_backbone_input(crop_height, crop_width);
    if (log_every < 1) throw std::invalid_argument("train: log_every must be >= 1");
  }
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(int step, const std::string& why)
      : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + why), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

struct LogRecord {
  int step = 0;
  std::string split;
  double loss = 0.0;
  double epe = 0.0;
  double d1 = 0.0;  // 1px outlier rate, percent
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"split", split}, {"loss", loss}, {"epe", epe}, {"d1", d1}, {"wall_ms", wall_ms}};
  }
};

struct TrainResult {
  std::vector<LogRecord> log;
  EvalReport final_eval;
  int steps_done = 0;
};

// Evaluates the model on full samples, one at a time, without recording a graph.
// `loss` receives the mean total loss over samples when given.
template <class T>
EvalReport evaluate(const StereoModel<T>& model, const std::vector<StereoSample>& samples, double* loss = nullptr,
                    LossWeights w = {}, bool kitti_compound = false) {
  NoGradGuard ng;
  TrainingModeGuard eval_mode(false);
  std::vector<ImageMetrics> per;
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const StereoSample& s = samples[i];
    std::vector<const StereoSample*> one{&s};
    Var<T> l(stack_images<T>(one, false)), r(stack_images<T>(one, true));
    Prediction<T> p = model.forward(l, r);
    const Tensor<T> gt = s.disparity.template cast<T>().reshaped({1, 1, s.height(), s.width()});
    if (loss) total += static_cast<double>(total_loss(p.d_init, p.d_final, gt, s.valid, w).value()[0]);
    per.push_back(evaluate_image(sample_stem(static_cast<int>(i)), p.d_final.value().reshaped({s.height(), s.width()}),
                                 s.disparity.template cast<T>(), s.valid, kitti_compound));
  }
  if (loss) *loss = samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
  return summarize(std::move(per));
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line << "\n";
}

// Trains `model` in place. Batches are drawn with replacement and randomly cropped; the RNG is
// seeded from cfg.seed, so runs are reproducible. In deterministic mode wall_ms is logged as 0.
template <class T>
TrainResult train(StereoModel<T>& model, const std::vector<StereoSample>& train_set,
                  const std::vector<StereoSample>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const bool deterministic = cfg.deterministic || deterministic_from_env();
  const std::filesystem::path log_path = cfg.out_dir.empty() ? std::filesystem::path{} : cfg.out_dir / "metrics.jsonl";
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::filesystem::remove(log_path);
  }
  std::mt19937_64 rng(cfg.seed);
  Adam<T> opt(model.params());
  const OneCycle sched{cfg.lr, cfg.steps};
  TrainResult result;
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  auto emit = [&](LogRecord rec) {
    rec.wall_ms = deterministic ? 0.0 : std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    if (!log_path.empty()) append_line(log_path, rec.to_json().dump());
    result.log.push_back(rec);
  };
  auto save = [&](int step) {
    if (cfg.out_dir.empty()) return;
    save_checkpoint(cfg.out_dir / checkpoint_name(step), snapshot(model.params(), model.config().fingerprint(), step));
    write_latest_pointer(cfg.out_dir, step);
  };

  double loss_acc = 0.0, epe_acc = 0.0, d1_acc = 0.0;
  int acc_n = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<StereoSample> crops;
    for (int b = 0; b < cfg.batch; ++b) {
      const StereoSample& s = train_set[rng() % train_set.size()];
      const int y0 = s.height() > cfg.crop_height ? static_cast<int>(rng() % (s.height() - cfg.crop_height + 1)) : 0;
      const int x0 = s.width() > cfg.crop_width ? static_cast<int>(rng() % (s.width() - cfg.crop_width + 1)) : 0;
      crops.push_back(s.height() == cfg.crop_height && s.width() == cfg.crop_width
                          ? s
                          : crop(s, y0, x0, cfg.crop_height, cfg.crop_width));
      if (cfg.augment) {
        std::array<int, 3> order{0, 1, 2};
        std::shuffle(order.begin(), order.end(), rng);
        jitter_colours(crops.back(), order, rng() & 1);
      }
    }
    std::vector<const StereoSample*> ptrs;
    for (const auto& c : crops) ptrs.push_back(&c);
    const int N = cfg.batch, H = cfg.crop_height, W = cfg.crop_width;
    Tensor<T> gt({N, 1, H, W});
    Tensor<std::uint8_t> mask({N, 1, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        gt[n * plane + i] = static_cast<T>(crops[n].disparity[i]);
        mask[n * plane + i] = crops[n].valid[i];
      }

    model.params().zero_grad();
    Prediction<T> p;
    {
      TrainingModeGuard batch_stats;
      p = model.forward(Var<T>(stack_images<T>(ptrs, false)), Var<T>(stack_images<T>(ptrs, true)));
    }
    Var<T> loss = total_loss(p.d_init, p.d_final, gt, mask, cfg.weights);
    const double lv = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(lv)) {
      if (!log_path.empty()) append_line(log_path, nlohmann::json{{"step", step}, {"split", "train"}, {"error", "non-finite loss"}}.dump());
      throw TrainingAborted(step, "non-finite loss");
    }
    loss.backward();
    opt.step(sched(step - 1));

    loss_acc += lv;
    epe_acc += epe(p.d_final.value(), gt, mask).value_or(0.0);
    d1_acc += outlier_rate(p.d_final.value(), gt, mask, 1.0).value_or(0.0);
    ++acc_n;
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      emit({step, "train", loss_acc / acc_n, epe_acc / acc_n, d1_acc / acc_n, 0.0});
      loss_acc = epe_acc = d1_acc = 0.0;
      acc_n = 0;
    }
    const bool last = step == cfg.steps;
    if (!val_set.empty() && (last || (cfg.eval_every > 0 && step % cfg.eval_every == 0))) {
      double vl = 0.0;
      EvalReport r = evaluate(model, val_set, &vl, cfg.weights);
      emit({step, "val", vl, r.epe, r.d1_1px, 0.0});
      if (last) result.final_eval = std::move(r);
    }
    if (last || (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0)) save(step);
    result.steps_done = step;
  }
  return result;
}

}  // namespace dbs
