#pragma once

// Disparity error metrics and per-pixel diagnostics of the regressed distribution.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dbs/tensor.hpp"

namespace dbs {

inline void check_metric_shapes(const Shape& pred, const Shape& gt, const Shape& mask) {
  if (pred != gt || gt != mask)
    throw std::invalid_argument("metric inputs disagree: pred " + shape_str(pred) + ", gt " + shape_str(gt) + ", mask " +
                                shape_str(mask));
}

// Mean |pred - gt| over valid pixels; nullopt when no pixel is valid.
template <class T>
std::optional<double> epe(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<std::uint8_t>& mask) {
  check_metric_shapes(pred.shape(), gt.shape(), mask.shape());
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i)
    if (mask[i]) {
      acc += std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
      ++n;
    }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

// Percentage of valid pixels with |pred - gt| > threshold.
// With `kitti_compound`, a pixel counts only if it also exceeds 5% of the true disparity.
template <class T>
std::optional<double> outlier_rate(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<std::uint8_t>& mask,
                                   double threshold, bool kitti_compound = false) {
  if (!(threshold > 0.0)) throw std::invalid_argument("outlier threshold must be positive");
  check_metric_shapes(pred.shape(), gt.shape(), mask.shape());
  std::size_t n = 0, bad = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i)
    if (mask[i]) {
      const double e = std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
      bool out = e > threshold;
      if (kitti_compound) out = out && e > 0.05 * std::abs(static_cast<double>(gt[i]));
      bad += out;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

inline constexpr double kPeakRatioCap = 1e6;
inline constexpr double kProbabilityDrift = 1e-4;

struct DistributionDiagnostics {
  Tensor<double> entropy;     // nats
  Tensor<double> peak_ratio;  // largest / second largest, capped at kPeakRatioCap
};

// prob: D x H x W (or N x D x H x W, diagnostics then N x H x W).
template <class T>
DistributionDiagnostics distribution_diagnostics(const Tensor<T>& prob) {
  Shape s = prob.shape();
  if (s.size() == 3) s.insert(s.begin(), 1);
  if (s.size() != 4) throw std::invalid_argument("distribution_diagnostics expects D x H x W");
  const int N = s[0], D = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Shape os = prob.ndim() == 3 ? Shape{s[2], s[3]} : Shape{N, s[2], s[3]};
  DistributionDiagnostics out{Tensor<double>(os), Tensor<double>(os)};
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double total = 0.0, h = 0.0, first = -1.0, second = -1.0;
      for (int d = 0; d < D; ++d) {
        const double v = static_cast<double>(prob[(static_cast<std::size_t>(n) * D + d) * plane + p]);
        if (v < -kProbabilityDrift) throw std::invalid_argument("negative probability in distribution");
        total += v;
        if (v > 0.0) h -= v * std::log(v);
        if (v > first) {
          second = first;
          first = v;
        } else if (v > second) {
          second = v;
        }
      }
      if (std::abs(total - 1.0) > kProbabilityDrift)
        throw std::invalid_argument("probability column sums to " + std::to_string(total) + ", not 1");
      out.entropy[n * plane + p] = h;
      out.peak_ratio[n * plane + p] =
          second <= first / kPeakRatioCap ? kPeakRatioCap : first / second;
    }
  return out;
}

struct ImageMetrics {
  std::string name;
  std::optional<double> epe;
  std::optional<double> d1_1px;
  std::optional<double> d1_3px;
  std::size_t valid_count = 0;
};

struct EvalReport {
  double epe = 0.0;
  double d1_1px = 0.0;
  double d1_3px = 0.0;
  std::size_t valid_count = 0;
  std::size_t excluded = 0;  // images with no valid pixel
  std::vector<ImageMetrics> per_image;
};

template <class T>
ImageMetrics evaluate_image(const std::string& name, const Tensor<T>& pred, const Tensor<T>& gt,
                            const Tensor<std::uint8_t>& mask, bool kitti_compound = false) {
  ImageMetrics m{name, epe(pred, gt, mask), outlier_rate(pred, gt, mask, 1.0),
                 outlier_rate(pred, gt, mask, 3.0, kitti_compound), 0};
  for (std::size_t i = 0; i < mask.numel(); ++i) m.valid_count += mask[i] != 0;
  return m;
}

// Aggregates are pixel-weighted over all valid pixels; images without valid pixels are excluded.
inline EvalReport summarize(std::vector<ImageMetrics> images) {
  EvalReport r;
  double e = 0.0, b1 = 0.0, b3 = 0.0;
  for (const auto& m : images) {
    if (!m.epe) {
      ++r.excluded;
      continue;
    }
    const double n = static_cast<double>(m.valid_count);
    e += *m.epe * n;
    b1 += *m.d1_1px * n;
    b3 += *m.d1_3px * n;
    r.valid_count += m.valid_count;
  }
  if (r.valid_count > 0) {
    const double n = static_cast<double>(r.valid_count);
    r.epe = e / n;
    r.d1_1px = b1 / n;
    r.d1_3px = b3 / n;
  }
  r.per_image = std::move(images);
  return r;
}

inline nlohmann::json to_json(const ImageMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"image", m.name}, {"epe", opt(m.epe)}, {"d1_1px", opt(m.d1_1px)}, {"d1_3px", opt(m.d1_3px)},
          {"valid_count", m.valid_count}};
}

// One record per image followed by a summary record.
inline std::string to_json_lines(const EvalReport& r) {
  std::string out;
  for (const auto& m : r.per_image) {
    nlohmann::json j = to_json(m);
    j["kind"] = "image";
    out += j.dump() + "\n";
  }
  const nlohmann::json s{{"kind", "summary"}, {"epe", r.epe},           {"d1_1px", r.d1_1px},
                         {"d1_3px", r.d1_3px}, {"valid_count", r.valid_count}, {"excluded", r.excluded}};
  return out + s.dump() + "\n";
}

inline std::string to_table(const EvalReport& r) {
  std::ostringstream os;
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream c;
    if (v) c << std::fixed << std::setprecision(4) << *v; else c << "n/a";
    return c.str();
  };
  os << std::left << std::setw(16) << "image" << std::right << std::setw(10) << "EPE" << std::setw(10) << "D1 1px%"
     << std::setw(10) << ">3px%" << std::setw(10) << "valid" << "\n";
  for (const auto& m : r.per_image)
    os << std::left << std::setw(16) << m.name << std::right << std::setw(10) << cell(m.epe) << std::setw(10)
       << cell(m.d1_1px) << std::setw(10) << cell(m.d1_3px) << std::setw(10) << m.valid_count << "\n";
  os << std::left << std::setw(16) << "all" << std::right << std::setw(10) << cell(r.epe) << std::setw(10)
     << cell(r.d1_1px) << std::setw(10) << cell(r.d1_3px) << std::setw(10) << r.valid_count << "\n";
  return os.str();
}

}  // namespace dbs
