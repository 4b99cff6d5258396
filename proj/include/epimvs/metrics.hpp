#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace epimvs {

struct MetricsOptions {
  double prediction_floor = 1e-6;
  std::vector<double> thresholds = {0.2, 0.5, 1.0};  // thre@x, scene units
};

/// Depth error table over the labelled pixels.
struct MetricsReport {
  std::size_t pixels = 0;
  double abs_rel = 0.0;
  // sqrt(mean |d - d*|): the square root is part of the tabulated definition.
  double abs_diff = 0.0;
  double abs_diff_mean = 0.0;  // conventional mean |d - d*|
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double log10 = 0.0;
  double delta[3] = {0.0, 0.0, 0.0};  // max(d/d*, d*/d) < 1.25^k
  std::vector<double> thresholds;
  std::vector<double> thre;  // |d - d*| < x
  double scale = 1.0;        // factor applied to pred before scoring

  // Column names and values in table order.
  std::vector<std::string> Columns() const;
  std::vector<double> Values() const;
};

// pred is clamped from below at the floor; gt must be positive where mask is
// set. Throws ArgumentError on size mismatch or an empty mask.
MetricsReport Evaluate(std::span<const double> pred, std::span<const double> gt,
                       std::span<const std::uint8_t> mask, const MetricsOptions& options = {});

// median(gt) / median(pred) over the mask.
double MedianScale(std::span<const double> pred, std::span<const double> gt,
                   std::span<const std::uint8_t> mask, double prediction_floor = 1e-6);

MetricsReport EvaluateScaleAligned(std::span<const double> pred, std::span<const double> gt,
                                   std::span<const std::uint8_t> mask,
                                   const MetricsOptions& options = {});

// Accumulates pixels from several maps so one report covers a whole set.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(MetricsOptions options = {}) : options_(std::move(options)) {}
  void Add(std::span<const double> pred, std::span<const double> gt,
           std::span<const std::uint8_t> mask);
  MetricsReport Report() const;

 private:
  MetricsOptions options_;
  std::vector<double> pred_, gt_;
};

}  // namespace epimvs
