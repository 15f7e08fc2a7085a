#pragma once

// Flat `section.key = value` run configuration with a fixed schema.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbs {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"data.root", "", "dataset directory (synth-gen output or training data)"},
      {"data.val_root", "", "held-out dataset directory"},
      {"data.count", "50", "samples written by synth-gen"},
      {"data.height", "96", "synthetic image height"},
      {"data.width", "128", "synthetic image width"},
      {"data.num_regions", "6", "disparity layers per synthetic image"},
      {"data.dot_density", "0.8", "fraction of textured pixels"},
      {"data.dot_size", "1", "side of the square texture cells in pixels"},
      {"data.seed", "0", "synthetic base seed"},
      {"model.d_max", "32", "maximum disparity in full-resolution pixels, multiple of 4"},
      {"model.base_channels", "0", "C4 feature channels; 0 uses the variant default"},
      {"model.seed", "0", "weight initialisation seed"},
      {"agg.variant", "tiny", "tiny | S | M | L"},
      {"agg.paradigm", "bga", "bga | conv3d"},
      {"agg.groups", "0", "correlation groups; 0 uses the variant default"},
      {"agg.num_stages", "2", "encoder scales beyond 1/4"},
      {"agg.blocks_per_stage", "0", "0 uses the variant default"},
      {"agg.use_attention", "false", "sigmoid spatial gate from the left feature pyramid"},
      {"agg.spatial_dense", "false", "dense instead of disparity-grouped spatial convolutions"},
      {"train.lr", "0.0004", "peak learning rate of the one-cycle schedule"},
      {"train.batch", "4", "samples per step"},
      {"train.steps", "2000", "optimiser steps"},
      {"train.seed", "0", "batch sampling seed"},
      {"train.lambda0", "0.3", "weight of the interpolated-head loss"},
      {"train.lambda1", "1", "weight of the learned-head loss"},
      {"train.crop_height", "96", "training crop height, multiple of 32"},
      {"train.crop_width", "128", "training crop width, multiple of 32"},
      {"train.augment", "false", "colour jitter of training pairs: random channel order and inversion"},
      {"train.deterministic", "false", "bit-reproducible logs (wall_ms written as 0)"},
      {"train.log_every", "50", "steps between training log records"},
      {"train.eval_every", "500", "steps between held-out evaluations; 0 evaluates only at the end"},
      {"train.ckpt_every", "1000", "steps between checkpoints; 0 saves only the final one"},
      {"train.out", "runs/train", "output directory for the log and checkpoints"},
      {"eval.kitti_compound", "false", "count >3px outliers only if also above 5% of the true disparity"},
      {"bench.variants", "tiny,S,M,L", "comma-separated variants"},
      {"bench.shapes", "8x24x32,16x24x32,16x48x64", "comma-separated DxHxW aggregator input sizes"},
      {"bench.iters", "30", "timed iterations, >= 30"},
      {"bench.warmup", "10", "untimed warm-up iterations, >= 10"},
      {"bench.full_model", "false", "also time the whole model on 4H x 4W images (reported, not gated)"},
      {"bench.out", "runs/bench", "output directory for the report"},
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) {
    const auto& s = config_schema();
    return std::any_of(s.begin(), s.end(), [&](const ConfigKey& k) { return k.name == key; });
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  // Lines of `key = value`; '#' starts a comment.
  void merge_text(const std::string& text, const std::string& origin = "<text>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      try {
        apply_override(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.string());
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError(key + " = '" + v + "' is not an integer");
    }
  }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t pos = 0;
      const double x = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError(key + " = '" + v + "' is not a number");
    }
  }

  bool boolean(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + " = '" + v + "' is not a boolean");
  }

  // Every key in schema order; feeding this back through merge_text reproduces the config.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& k : config_schema()) os << k.name << " = " << values_.at(k.name) << "\n";
    return os.str();
  }

  bool operator==(const RunConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

inline std::string config_reference() {
  std::ostringstream os;
  for (const auto& k : config_schema())
    os << "  " << k.name << " (default " << (k.default_value.empty() ? "empty" : k.default_value) << "): " << k.doc
       << "\n";
  return os.str();
}

}  // namespace dbs
