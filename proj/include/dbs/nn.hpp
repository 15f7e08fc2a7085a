#pragma once

// Parameter storage and the small set of layers the networks are built from.

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dbs/ops.hpp"

namespace dbs {

enum class Init { kZero, kOne, kHeUniform };

template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  // fan_in only matters for kHeUniform.
  Var<T> create(const std::string& name, Shape shape, Init init, int fan_in = 1) {
    return add(name, std::move(shape), init, fan_in, false);
  }

  // Non-trainable state saved with the weights (running statistics); excluded from counts.
  Var<T> create_buffer(const std::string& name, Shape shape, Init init) {
    return add(name, std::move(shape), init, 1, true);
  }

  // Weights and buffers, in creation order.
  const std::vector<std::pair<std::string, Var<T>>>& params() const { return params_; }

  bool is_buffer(const std::string& name) const { return buffers_.count(name) != 0; }

  std::int64_t count() const { return count_prefix(""); }
  std::int64_t count_prefix(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& [name, v] : params_)
      if (name.rfind(prefix, 0) == 0 && !is_buffer(name)) n += static_cast<std::int64_t>(v.value().numel());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.second.zero_grad();
  }

 private:
  Var<T> add(const std::string& name, Shape shape, Init init, int fan_in, bool buffer) {
    for (const auto& [n, v] : params_)
      if (n == name) throw std::logic_error("duplicate parameter name: " + name);
    Tensor<T> t(std::move(shape), T{0});
    switch (init) {
      case Init::kZero:
        break;
      case Init::kOne:
        t.fill(T{1});
        break;
      case Init::kHeUniform: {
        // leaky-relu gain with slope 0.1
        const double bound = std::sqrt(6.0 / ((1.0 + 0.01) * std::max(fan_in, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
        break;
      }
    }
    Var<T> v(std::move(t), !buffer);
    params_.emplace_back(name, v);
    if (buffer) buffers_.insert(name);
    return v;
  }

  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::set<std::string> buffers_;
};

// Static description of one convolution, enough to count its arithmetic.
struct ConvLayerDesc {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  std::array<int, 3> kernel{1, 1, 1};
  int groups = 1;
  std::array<int, 3> out_size{1, 1, 1};  // -1 marks an unresolved extent
  int batch = 1;
};

template <class T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  ConvSpec spec;
  int in_channels = 0, out_channels = 0;
  std::array<int, 3> kernel{1, 1, 1};
  std::string name;

  Conv() = default;
  // kernel {1,k,k} for 2D layers, {k,k,k} for 3D layers.
  Conv(ParamStore<T>& ps, std::string name_, int in, int out, std::array<int, 3> k, ConvSpec s,
       bool with_bias, Init init = Init::kHeUniform)
      : spec(s), in_channels(in), out_channels(out), kernel(k), name(std::move(name_)) {
    if (in % s.groups != 0 || out % s.groups != 0)
      throw std::invalid_argument(name + ": channels " + std::to_string(in) + "->" + std::to_string(out) +
                                  " not divisible by groups " + std::to_string(s.groups));
    const int fan_in = in / s.groups * k[0] * k[1] * k[2];
    weight = ps.create(name + ".weight", {out, in / s.groups, k[0], k[1], k[2]}, init, fan_in);
    if (with_bias) bias = ps.create(name + ".bias", {out}, Init::kZero);
  }

  bool is_2d() const { return kernel[0] == 1 && spec.stride[0] == 1 && spec.pad[0] == 0; }

  // Accepts N x C x H x W (2D layers) or N x C x D x H x W.
  Var<T> operator()(const Var<T>& x) const {
    if (x.value().ndim() == 4) {
      const Shape& s = x.shape();
      Var<T> y = conv3d(reshape(x, {s[0], s[1], 1, s[2], s[3]}), weight, bias, spec);
      const Shape& ys = y.shape();
      return reshape(y, {ys[0], ys[1], ys[3], ys[4]});
    }
    return conv3d(x, weight, bias, spec);
  }

  std::array<int, 3> out_size(std::array<int, 3> in) const {
    std::array<int, 3> o{};
    for (int i = 0; i < 3; ++i)
      o[i] = in[i] < 0 ? -1 : conv_out_size(in[i], kernel[i], spec.stride[i], spec.pad[i]);
    return o;
  }

  ConvLayerDesc describe(std::array<int, 3> in, int batch = 1) const {
    return ConvLayerDesc{name, in_channels, out_channels, kernel, spec.groups, out_size(in), batch};
  }

  std::int64_t param_count() const {
    return static_cast<std::int64_t>(weight.value().numel() + (bias.defined() ? bias.value().numel() : 0));
  }
};

// Batch normalization. In training mode each channel is standardized with its statistics over
// the batch and spatial extents, and running estimates are updated; otherwise the running
// estimates are used, which makes the layer a fixed per-channel affine map. Either way no
// statistic mixes channels.
template <class T>
struct ChannelNorm {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;
  Var<T> scale, shift;
  Var<T> running_mean, running_var;

  ChannelNorm() = default;
  ChannelNorm(ParamStore<T>& ps, const std::string& name, int channels)
      : scale(ps.create(name + ".scale", {channels}, Init::kOne)),
        shift(ps.create(name + ".shift", {channels}, Init::kZero)),
        running_mean(ps.create_buffer(name + ".running_mean", {channels}, Init::kZero)),
        running_var(ps.create_buffer(name + ".running_var", {channels}, Init::kOne)) {}

  Var<T> operator()(const Var<T>& x) const {
    if (training_mode()) {
      std::vector<double> mean, var;
      Var<T> y = batch_standardize(x, T(kEps), &mean, &var);
      const double n = static_cast<double>(x.value().numel() / x.value().dim(1));
      Var<T> rm = running_mean, rv = running_var;  // handles share the stored tensors
      for (std::size_t c = 0; c < mean.size(); ++c) {
        const double unbiased = n > 1.0 ? var[c] * n / (n - 1.0) : var[c];
        rm.mutable_value()[c] = static_cast<T>((1.0 - kMomentum) * rm.value()[c] + kMomentum * mean[c]);
        rv.mutable_value()[c] = static_cast<T>((1.0 - kMomentum) * rv.value()[c] + kMomentum * unbiased);
      }
      return channel_affine(y, scale, shift);
    }
    const int C = static_cast<int>(scale.value().numel());
    Tensor<T> a({C}), b({C});
    for (int c = 0; c < C; ++c) {
      const double is = 1.0 / std::sqrt(static_cast<double>(running_var.value()[c]) + kEps);
      a[c] = static_cast<T>(is);
      b[c] = static_cast<T>(-static_cast<double>(running_mean.value()[c]) * is);
    }
    return channel_affine(channel_affine(x, Var<T>(std::move(a)), Var<T>(std::move(b))), scale, shift);
  }
};

// conv -> norm -> leaky relu
template <class T>
struct ConvBlock {
  Conv<T> conv;
  ChannelNorm<T> norm;
  bool activate = true;

  ConvBlock() = default;
  ConvBlock(ParamStore<T>& ps, const std::string& name, int in, int out, std::array<int, 3> k, ConvSpec s,
            bool act = true)
      : conv(ps, name + ".conv", in, out, k, s, false), norm(ps, name + ".norm", out), activate(act) {}

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = norm(conv(x));
    return activate ? leaky_relu(y) : y;
  }
};

inline std::array<int, 3> spatial2(int h, int w) { return {1, h, w}; }

}  // namespace dbs
