#include "epimvs/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

void CheckInputs(std::span<const double> pred, std::span<const double> gt,
                 std::span<const std::uint8_t> mask) {
  if (pred.size() != gt.size() || mask.size() != gt.size()) {
    throw ArgumentError("metrics: pred, gt and mask sizes differ");
  }
}

double Median(std::vector<double> values) {
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

}  // namespace

std::vector<std::string> MetricsReport::Columns() const {
  std::vector<std::string> cols = {"AbsRel", "AbsDiff", "SqRel",   "RMSE",      "RMSELog",
                                   "d<1.25", "d<1.25^2", "d<1.25^3", "Log10", "AbsDiffMean"};
  for (double x : thresholds) {
    std::string label = std::to_string(x);
    label.erase(label.find_last_not_of('0') + 1);
    if (label.back() == '.') label.pop_back();
    cols.push_back("thre@" + label);
  }
  return cols;
}

std::vector<double> MetricsReport::Values() const {
  std::vector<double> vals = {abs_rel,  abs_diff, sq_rel,   rmse,  rmse_log,
                              delta[0], delta[1], delta[2], log10, abs_diff_mean};
  vals.insert(vals.end(), thre.begin(), thre.end());
  return vals;
}

MetricsReport Evaluate(std::span<const double> pred, std::span<const double> gt,
                       std::span<const std::uint8_t> mask, const MetricsOptions& options) {
  CheckInputs(pred, gt, mask);
  MetricsReport r;
  r.thresholds = options.thresholds;
  r.thre.assign(options.thresholds.size(), 0.0);
  double abs_rel = 0, abs_diff = 0, sq_rel = 0, sq = 0, sq_log = 0, log10 = 0;
  double delta[3] = {0, 0, 0};
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    const double g = gt[i];
    if (!(g > 0.0) || !std::isfinite(g)) throw ArgumentError("metrics: gt must be positive on mask");
    if (std::isnan(pred[i])) throw ArgumentError("metrics: NaN prediction");
    const double d = std::max(pred[i], options.prediction_floor);
    const double diff = d - g;
    abs_rel += std::abs(diff) / g;
    abs_diff += std::abs(diff);
    sq_rel += diff * diff / g;
    sq += diff * diff;
    const double dl = std::log(d) - std::log(g);
    sq_log += dl * dl;
    log10 += std::abs(std::log10(d) - std::log10(g));
    const double ratio = std::max(d / g, g / d);
    double bound = 1.25;
    for (double& dk : delta) {
      if (ratio < bound) dk += 1.0;
      bound *= 1.25;
    }
    for (std::size_t t = 0; t < r.thre.size(); ++t) {
      if (std::abs(diff) < options.thresholds[t]) r.thre[t] += 1.0;
    }
    ++n;
  }
  if (n == 0) throw ArgumentError("metrics: empty mask");
  const double inv = 1.0 / static_cast<double>(n);
  r.pixels = n;
  r.abs_rel = abs_rel * inv;
  r.abs_diff_mean = abs_diff * inv;
  r.abs_diff = std::sqrt(r.abs_diff_mean);
  r.sq_rel = sq_rel * inv;
  r.rmse = std::sqrt(sq * inv);
  r.rmse_log = std::sqrt(sq_log * inv);
  r.log10 = log10 * inv;
  for (int k = 0; k < 3; ++k) r.delta[k] = delta[k] * inv;
  for (double& t : r.thre) t *= inv;
  return r;
}

double MedianScale(std::span<const double> pred, std::span<const double> gt,
                   std::span<const std::uint8_t> mask, double prediction_floor) {
  CheckInputs(pred, gt, mask);
  std::vector<double> p, g;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    p.push_back(std::max(pred[i], prediction_floor));
    g.push_back(gt[i]);
  }
  if (p.empty()) throw ArgumentError("metrics: empty mask");
  return Median(std::move(g)) / Median(std::move(p));
}

MetricsReport EvaluateScaleAligned(std::span<const double> pred, std::span<const double> gt,
                                   std::span<const std::uint8_t> mask,
                                   const MetricsOptions& options) {
  const double scale = MedianScale(pred, gt, mask, options.prediction_floor);
  std::vector<double> scaled(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    scaled[i] = std::max(pred[i], options.prediction_floor) * scale;
  }
  MetricsReport r = Evaluate(scaled, gt, mask, options);
  r.scale = scale;
  return r;
}

void MetricsAccumulator::Add(std::span<const double> pred, std::span<const double> gt,
                             std::span<const std::uint8_t> mask) {
  CheckInputs(pred, gt, mask);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    pred_.push_back(pred[i]);
    gt_.push_back(gt[i]);
  }
}

MetricsReport MetricsAccumulator::Report() const {
  const std::vector<std::uint8_t> all(gt_.size(), 1);
  return Evaluate(pred_, gt_, all, options_);
}

}  // namespace epimvs
