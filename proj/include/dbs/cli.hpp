#pragma once

// Command-line front end: synth-gen, train, eval, infer, bench, selftest.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dbs/bench.hpp"
#include "dbs/checkpoint.hpp"
#include "dbs/config.hpp"
#include "dbs/data.hpp"
#include "dbs/metrics.hpp"
#include "dbs/model.hpp"
#include "dbs/selftest.hpp"
#include "dbs/training.hpp"
#include "dbs/visualize.hpp"

namespace dbs::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kConfig = 3, kRuntime = 4 };

namespace fs = std::filesystem;

inline ModelConfig model_config(const RunConfig& rc) {
  ModelConfig m;
  m.variant = parse_variant(rc.str("agg.variant"));
  m.paradigm = parse_paradigm(rc.str("agg.paradigm"));
  m.d_max = static_cast<int>(rc.integer("model.d_max"));
  m.groups = static_cast<int>(rc.integer("agg.groups"));
  m.base_channels = static_cast<int>(rc.integer("model.base_channels"));
  m.num_stages = static_cast<int>(rc.integer("agg.num_stages"));
  m.blocks_per_stage = static_cast<int>(rc.integer("agg.blocks_per_stage"));
  m.use_attention = rc.boolean("agg.use_attention");
  m.spatial_dense = rc.boolean("agg.spatial_dense");
  m.seed = static_cast<std::uint64_t>(rc.integer("model.seed"));
  m.validate();
  return m;
}

inline SyntheticConfig synthetic_config(const RunConfig& rc) {
  SyntheticConfig s;
  s.height = static_cast<int>(rc.integer("data.height"));
  s.width = static_cast<int>(rc.integer("data.width"));
  s.d_max = static_cast<int>(rc.integer("model.d_max"));
  s.num_regions = static_cast<int>(rc.integer("data.num_regions"));
  s.dot_density = rc.real("data.dot_density");
  s.dot_size = static_cast<int>(rc.integer("data.dot_size"));
  s.seed = static_cast<std::uint64_t>(rc.integer("data.seed"));
  s.validate();
  return s;
}

inline TrainConfig train_config(const RunConfig& rc) {
  TrainConfig t;
  t.lr = rc.real("train.lr");
  t.batch = static_cast<int>(rc.integer("train.batch"));
  t.steps = static_cast<int>(rc.integer("train.steps"));
  t.seed = static_cast<std::uint64_t>(rc.integer("train.seed"));
  t.weights = {rc.real("train.lambda0"), rc.real("train.lambda1")};
  t.crop_height = static_cast<int>(rc.integer("train.crop_height"));
  t.crop_width = static_cast<int>(rc.integer("train.crop_width"));
  t.augment = rc.boolean("train.augment");
  t.deterministic = rc.boolean("train.deterministic") || deterministic_from_env();
  t.log_every = static_cast<int>(rc.integer("train.log_every"));
  t.eval_every = static_cast<int>(rc.integer("train.eval_every"));
  t.ckpt_every = static_cast<int>(rc.integer("train.ckpt_every"));
  t.out_dir = rc.str("train.out");
  t.validate();
  return t;
}

inline void write_run_record(const fs::path& dir, const std::string& command, const RunConfig& rc) {
  fs::create_directories(dir);
  std::string text = "# dbs " + command + "\n";
  if (deterministic_from_env()) text += "# DBS_DETERMINISTIC=1\n";
  write_file_atomic(dir / ("config_" + command + ".txt"), text + rc.resolved_text());
}

// Model and aggregator keys stored next to a checkpoint, so eval/infer rebuild the same network.
inline void merge_checkpoint_config(RunConfig& rc, const fs::path& ckpt) {
  const fs::path file = resolve_checkpoint(ckpt);
  const fs::path rec = file.parent_path() / "config_train.txt";
  if (!fs::exists(rec)) return;
  RunConfig stored;
  stored.merge_file(rec);
  for (const auto& k : config_schema())
    if (k.name.rfind("model.", 0) == 0 || k.name.rfind("agg.", 0) == 0) rc.set(k.name, stored.str(k.name));
}

inline std::unique_ptr<StereoModel<float>> load_model(const RunConfig& rc, const fs::path& ckpt) {
  auto model = std::make_unique<StereoModel<float>>(model_config(rc));
  restore(model->params(), load_checkpoint(resolve_checkpoint(ckpt)), model->config().fingerprint());
  return model;
}

struct Invocation {
  std::vector<std::string> config_files;
  std::vector<std::string> overrides;
  // subcommand flags mapped onto config keys
  std::vector<std::pair<std::string, std::string>> flag_values;
};

class Dispatcher {
 public:
  Dispatcher(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    CLI::App app{"Decoupled stereo cost aggregation toolkit", "dbs"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    app.footer("Config keys (set with --set key=value or a --config file):\n" + config_reference() +
               "Exit codes: 0 ok, 2 usage, 3 config error, 4 runtime failure.");

    auto add_common = [&](CLI::App* sub) {
      sub->add_option("--config", inv_.config_files, "Flat key = value config file (repeatable)");
      sub->add_option("--set", inv_.overrides, "Override one key, key=value (repeatable)");
    };
    auto map_flag = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
      sub->add_option_function<std::string>(
          flag, [this, key](const std::string& v) { inv_.flag_values.emplace_back(key, v); }, help + " [" + key + "]");
    };

    auto* synth = app.add_subcommand("synth-gen", "Write a synthetic random-dot stereo dataset");
    add_common(synth);
    map_flag(synth, "--count", "data.count", "Number of samples");
    map_flag(synth, "--out", "data.root", "Output directory");
    map_flag(synth, "--seed", "data.seed", "Base seed");
    map_flag(synth, "--height", "data.height", "Image height");
    map_flag(synth, "--width", "data.width", "Image width");
    map_flag(synth, "--d-max", "model.d_max", "Maximum disparity");

    auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
    add_common(train);
    map_flag(train, "--data", "data.root", "Training dataset directory");
    map_flag(train, "--val", "data.val_root", "Held-out dataset directory");
    map_flag(train, "--out", "train.out", "Output directory");
    map_flag(train, "--steps", "train.steps", "Optimiser steps");
    map_flag(train, "--paradigm", "agg.paradigm", "bga or conv3d");
    map_flag(train, "--variant", "agg.variant", "tiny, S, M or L");

    std::string ckpt, predictor = "model", eval_out, left, right, gt, infer_out;
    auto* eval = app.add_subcommand("eval", "Evaluate predictions against ground truth");
    add_common(eval);
    eval->add_option("--ckpt", ckpt, "Checkpoint file or training directory, or 'none'")->required();
    map_flag(eval, "--data", "data.root", "Dataset directory");
    eval->add_option("--predictor", predictor, "model, or gt to score the ground truth itself")
        ->check(CLI::IsMember({"model", "gt"}));
    eval->add_option("--out", eval_out, "Directory for the record file (default: <data>/eval)");

    auto* infer = app.add_subcommand("infer", "Predict disparity for one rectified image pair");
    add_common(infer);
    infer->add_option("--ckpt", ckpt, "Checkpoint file or training directory")->required();
    infer->add_option("--left", left, "Left image (PNG)")->required();
    infer->add_option("--right", right, "Right image (PNG)")->required();
    infer->add_option("--gt", gt, "Ground-truth disparity (PFM, non-finite = invalid) for an error map");
    infer->add_option("--out", infer_out, "Output directory")->required();

    auto* bench = app.add_subcommand("bench", "Compare BGA and parameter-matched 3D aggregation");
    add_common(bench);
    map_flag(bench, "--shapes", "bench.shapes", "Comma-separated DxHxW sizes");
    map_flag(bench, "--variants", "bench.variants", "Comma-separated variants");
    map_flag(bench, "--iters", "bench.iters", "Timed iterations");
    map_flag(bench, "--warmup", "bench.warmup", "Warm-up iterations");
    map_flag(bench, "--out", "bench.out", "Output directory");
    map_flag(bench, "--full-model", "bench.full_model", "true also times the whole model (not gated)");

    auto* selftest = app.add_subcommand("selftest", "Run the built-in invariant checks");

    if (argc > 1 && argv[1][0] != '-') {
      bool found = false;
      for (const auto* sub : app.get_subcommands({})) found = found || sub->get_name() == argv[1];
      if (!found) {
        err_ << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
        return kUsage;
      }
    }
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      out_ << app.help();
      return kOk;
    } catch (const CLI::CallForAllHelp& e) {
      out_ << app.help("", CLI::AppFormatMode::All);
      return kOk;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << app.help();
      return kUsage;
    }

    RunConfig rc;
    try {
      if (eval->parsed() && ckpt != "none") merge_checkpoint_config(rc, ckpt);
      if (infer->parsed()) merge_checkpoint_config(rc, ckpt);
      for (const auto& f : inv_.config_files) rc.merge_file(f);
      for (const auto& o : inv_.overrides) rc.apply_override(o);
      for (const auto& [k, v] : inv_.flag_values) rc.set(k, v);
    } catch (const std::exception& e) {
      err_ << "config error: " << e.what() << "\n";
      return kConfig;
    }

    try {
      if (synth->parsed()) return synth_gen(rc);
      if (train->parsed()) return run_train(rc);
      if (eval->parsed()) return run_eval(rc, ckpt, predictor, eval_out);
      if (infer->parsed()) return run_infer(rc, ckpt, left, right, gt, infer_out);
      if (bench->parsed()) return run_bench(rc);
      if (selftest->parsed()) return run_selftest(out_) ? kOk : kRuntime;
    } catch (const ConfigError& e) {
      err_ << "config error: " << e.what() << "\n";
      return kConfig;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << "\n";
      return kRuntime;
    }
    return kUsage;
  }

 private:
  // Runs `f` and reports std::invalid_argument as a configuration problem.
  template <class F>
  auto resolve(F&& f) {
    try {
      return f();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  int synth_gen(const RunConfig& rc) {
    const SyntheticConfig sc = resolve([&] { return synthetic_config(rc); });
    const fs::path root = rc.str("data.root");
    const long long count = rc.integer("data.count");
    if (root.empty()) throw ConfigError("synth-gen needs --out (data.root)");
    if (count < 1) throw ConfigError("data.count must be >= 1");
    write_run_record(root, "synth-gen", rc);
    write_synthetic_dataset(root, sc, static_cast<int>(count));
    out_ << "wrote " << count << " samples to " << root.string() << "\n";
    return kOk;
  }

  int run_train(const RunConfig& rc) {
    const ModelConfig mc = resolve([&] { return model_config(rc); });
    const TrainConfig tc = resolve([&] { return train_config(rc); });
    if (rc.str("data.root").empty()) throw ConfigError("train needs --data (data.root)");
    const auto train_set = load_dataset(rc.str("data.root"));
    std::vector<StereoSample> val_set;
    if (!rc.str("data.val_root").empty()) val_set = load_dataset(rc.str("data.val_root"));
    write_run_record(tc.out_dir, "train", rc);
    StereoModel<float> model(mc);
    out_ << "training " << to_string(mc.paradigm) << " " << to_string(mc.variant) << ": " << model.params().count()
         << " parameters (" << model.aggregator_param_count() << " in the aggregator)\n";
    const TrainResult r = train(model, train_set, val_set, tc);
    for (const auto& rec : r.log)
      if (rec.split == "val" || rec.step == r.steps_done) out_ << rec.to_json().dump() << "\n";
    out_ << "checkpoint " << (tc.out_dir / checkpoint_name(r.steps_done)).string() << "\n";
    return kOk;
  }

  int run_eval(const RunConfig& rc, const std::string& ckpt, const std::string& predictor, std::string out_dir) {
    if (rc.str("data.root").empty()) throw ConfigError("eval needs --data (data.root)");
    if (predictor == "model" && ckpt == "none") throw ConfigError("--predictor model needs a checkpoint");
    const fs::path root = rc.str("data.root");
    if (out_dir.empty()) out_dir = (root / "eval").string();
    const bool compound = rc.boolean("eval.kitti_compound");
    const auto samples = load_dataset(root);
    write_run_record(out_dir, "eval", rc);
    EvalReport report;
    if (predictor == "gt") {
      std::vector<ImageMetrics> per;
      for (std::size_t i = 0; i < samples.size(); ++i)
        per.push_back(evaluate_image(sample_stem(static_cast<int>(i)), samples[i].disparity, samples[i].disparity,
                                     samples[i].valid, compound));
      report = summarize(std::move(per));
    } else {
      auto model = load_model(rc, ckpt);
      report = evaluate(*model, samples, nullptr, {}, compound);
    }
    write_file_atomic(fs::path(out_dir) / "eval.jsonl", to_json_lines(report));
    out_ << to_table(report);
    return kOk;
  }

  int run_infer(const RunConfig& rc, const std::string& ckpt, const std::string& left, const std::string& right,
                const std::string& gt, const std::string& out_dir) {
    auto model = load_model(rc, ckpt);
    const Tensor<float> l = load_rgb_png(left), r = load_rgb_png(right);
    if (l.shape() != r.shape()) throw std::invalid_argument("left and right images differ in size");
    const int H = l.dim(1), W = l.dim(2);
    check_backbone_input(H, W);
    write_run_record(out_dir, "infer", rc);
    Tensor<float> disp;
    {
      NoGradGuard ng;
      const Prediction<float> p = model->forward(Var<float>(l.reshaped({1, 3, H, W})), Var<float>(r.reshaped({1, 3, H, W})));
      disp = p.d_final.value().reshaped({H, W});
    }
    const fs::path o = out_dir;
    write_pfm(o / "disparity.pfm", disp);
    write_kitti_disparity_png(o / "disparity_kitti.png", disp);
    const float d_max = static_cast<float>(model->config().d_max);
    write_rgb_png(o / "disparity_color.png", colorize_disparity(disp, d_max));
    if (!gt.empty()) {
      Tensor<float> g = load_pfm(gt).map;
      if (g.shape() != disp.shape()) throw std::invalid_argument("ground truth size differs from the images");
      Tensor<std::uint8_t> valid(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) {
        valid[i] = std::isfinite(g[i]) && g[i] >= 0.0f;
        if (!valid[i]) g[i] = 0.0f;
      }
      write_rgb_png(o / "error.png", colorize_error(disp, g, valid));
      const ImageMetrics m = evaluate_image("infer", disp, g, valid);
      out_ << to_json(m).dump() << "\n";
    }
    out_ << "wrote " << o.string() << "\n";
    return kOk;
  }

  int run_bench(const RunConfig& rc) {
    std::vector<Variant> variants;
    std::vector<BenchShape> shapes;
    BenchOptions opt;
    resolve([&] {
      for (const auto& v : split_list(rc.str("bench.variants"))) variants.push_back(parse_variant(v));
      for (const auto& s : split_list(rc.str("bench.shapes"))) shapes.push_back(parse_bench_shape(s));
      opt.iters = static_cast<int>(rc.integer("bench.iters"));
      opt.warmup = static_cast<int>(rc.integer("bench.warmup"));
      opt.full_model = rc.boolean("bench.full_model");
      if (opt.iters < kMinIters) throw std::invalid_argument("bench.iters must be >= " + std::to_string(kMinIters));
      if (opt.warmup < kMinWarmup) throw std::invalid_argument("bench.warmup must be >= " + std::to_string(kMinWarmup));
      if (variants.empty() || shapes.empty()) throw std::invalid_argument("bench needs at least one variant and shape");
      return 0;
    });
    const fs::path out = rc.str("bench.out");
    write_run_record(out, "bench", rc);
    BenchmarkLock lock;
    const BenchmarkReport report = compare_paradigms(variants, shapes, opt);
    write_file_atomic(out / "bench.jsonl", to_json_lines(report));
    write_file_atomic(out / "bench.txt", to_table(report));
    out_ << to_table(report);
    return kOk;
  }

  std::ostream& out_;
  std::ostream& err_;
  Invocation inv_;
};

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return Dispatcher(out, err).run(argc, argv);
}

}  // namespace dbs::cli
