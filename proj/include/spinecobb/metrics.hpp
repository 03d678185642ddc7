#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spinecobb/core.hpp"

namespace spinecobb::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
};

/// Jaccard, Dice, pixel accuracy, sensitivity, specificity. Each lies in [0,1].
struct SegMetrics {
  double ja = 1.0;
  double dice = 1.0;
  double ac = 1.0;
  double se = 1.0;
  double sp = 1.0;
};

inline constexpr double kMaskThreshold = 0.5;
inline constexpr double kSmapeEpsilon = 1e-8;

/// Soft map -> {0,1} with value >= 0.5 as foreground.
Tensor binarize(const Tensor& soft, double threshold = kMaskThreshold);

/// Both inputs must be binary and equally shaped.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt);
/// Ratios with the 0/0 -> 1 convention.
SegMetrics seg_metrics_from_counts(const ConfusionCounts& c);
SegMetrics seg_metrics(const Tensor& pred, const Tensor& gt);

/// Per-angle mean absolute error in degrees.
std::array<double, 3> mae_deg(std::span<const AngleDegrees> preds, std::span<const AngleDegrees> gts);
/// Mean over samples of sum|gt - pred| / sum(gt + pred + eps), times 100.
double smape_percent(std::span<const AngleDegrees> preds, std::span<const AngleDegrees> gts,
                     double epsilon = kSmapeEpsilon);

struct SampleRecord {
  std::string source_id;
  AngleDegrees pred{};
  AngleDegrees gt{};
  double smape = 0.0;  // percent
  std::optional<SegMetrics> seg;
};

struct EvalReport {
  std::array<double, 3> mae{};
  double smape = 0.0;  // percent
  std::optional<SegMetrics> seg;
  std::size_t sample_count = 0;
  std::vector<SampleRecord> samples;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);

  /// One aligned row in the ablation-table layout: MAE triple and SMAPE (%).
  std::string table_row(const std::string& label) const;
  std::string table() const;
  std::string per_sample_csv() const;

  bool operator==(const EvalReport&) const;
};

struct SegPair {
  Tensor pred;  // soft or binary; binarized at 0.5
  Tensor gt;
};

/// ids, preds and gts must align; seg may be empty (section omitted) or
/// aligned with them. Segmentation metrics are per-image means.
EvalReport build_report(std::span<const std::string> ids, std::span<const AngleDegrees> preds,
                        std::span<const AngleDegrees> gts, std::span<const SegPair> seg = {});

}  // namespace spinecobb::metrics
