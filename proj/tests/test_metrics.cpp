#include <cmath>

#include <doctest.h>

#include "epimvs/errors.hpp"
#include "epimvs/metrics.hpp"
#include "oracles.hpp"

using namespace epimvs;

namespace {

bool Close(double a, double b, double tol = 1e-12) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

}  // namespace

TEST_CASE("metrics agree with the per-pixel oracle on random maps") {
  Rng rng(1);
  std::uniform_real_distribution<double> gt_dist(0.5, 8.0), noise(-1.5, 1.5);
  std::bernoulli_distribution keep(0.8);
  const std::vector<double> thresholds = {0.2, 0.5, 1.0};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 50 + trial;
    std::vector<double> pred(n), gt(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = gt_dist(rng);
      // Some predictions go non-positive to exercise the floor.
      pred[i] = gt[i] + noise(rng);
      mask[i] = keep(rng);
    }
    mask[0] = 1;
    const MetricsReport r = Evaluate(pred, gt, mask);
    const oracle::Metrics o = oracle::DepthMetrics(pred, gt, mask, thresholds);
    CHECK(Close(r.abs_rel, o.abs_rel));
    CHECK(Close(r.abs_diff, o.abs_diff));
    CHECK(Close(r.abs_diff_mean, o.abs_diff_mean));
    CHECK(Close(r.sq_rel, o.sq_rel));
    CHECK(Close(r.rmse, o.rmse));
    CHECK(Close(r.rmse_log, o.rmse_log));
    CHECK(Close(r.log10, o.log10));
    for (int k = 0; k < 3; ++k) CHECK(Close(r.delta[k], o.delta[k]));
    REQUIRE(r.thre.size() == 3);
    for (int k = 0; k < 3; ++k) CHECK(Close(r.thre[k], o.thre[k]));
    CHECK(r.pixels == static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)));
  }
}

TEST_CASE("scaled ground truth gives the scale error") {
  const std::vector<double> gt = {1.0, 2.0, 3.5, 4.0};
  const std::vector<std::uint8_t> mask(4, 1);
  for (double c : {0.5, 0.9, 1.0, 1.3, 2.0}) {
    std::vector<double> pred(gt);
    for (double& p : pred) p *= c;
    const MetricsReport r = Evaluate(pred, gt, mask);
    CHECK(Close(r.abs_rel, std::abs(c - 1.0)));
    CHECK(Close(r.rmse_log, std::abs(std::log(c))));
    CHECK(Close(r.log10, std::abs(std::log10(c))));
    // A constant ratio puts every pixel on the same side of each bound.
    const double ratio = std::max(c, 1.0 / c);
    CHECK(r.delta[0] == (ratio < 1.25 ? 1.0 : 0.0));
    CHECK(r.delta[1] == (ratio < 1.5625 ? 1.0 : 0.0));
    CHECK(r.delta[2] == (ratio < 1.953125 ? 1.0 : 0.0));
    CHECK(Close(MedianScale(pred, gt, mask), 1.0 / c));
    const MetricsReport aligned = EvaluateScaleAligned(pred, gt, mask);
    CHECK(aligned.abs_rel < 1e-12);
    CHECK(Close(aligned.scale, 1.0 / c));
  }
}

TEST_CASE("a perfect prediction scores zero error and full accuracy") {
  const std::vector<double> gt = {1.0, 2.0, 3.0};
  const std::vector<std::uint8_t> mask = {1, 1, 1};
  const MetricsReport r = Evaluate(gt, gt, mask);
  CHECK(r.abs_rel == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.delta[0] == 1.0);
  for (double t : r.thre) CHECK(t == 1.0);
  CHECK(r.Columns().size() == r.Values().size());
  CHECK(r.Columns().front() == "AbsRel");
}

TEST_CASE("masked pixels and the prediction floor") {
  const std::vector<double> gt = {2.0, 0.0, 1.0};
  const std::vector<double> pred = {2.0, 99.0, -3.0};
  const std::vector<std::uint8_t> mask = {1, 0, 1};
  const MetricsReport r = Evaluate(pred, gt, mask);
  CHECK(r.pixels == 2);
  CHECK(Close(r.abs_rel, (0.0 + (1.0 - 1e-6)) / 2.0));
  CHECK(std::isfinite(r.rmse_log));
}

TEST_CASE("accumulating maps equals evaluating their concatenation") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  std::vector<double> p1(30), g1(30), p2(20), g2(20);
  for (auto* v : {&p1, &g1, &p2, &g2}) {
    for (double& x : *v) x = u(rng);
  }
  const std::vector<std::uint8_t> m1(30, 1), m2(20, 1);
  MetricsAccumulator acc;
  acc.Add(p1, g1, m1);
  acc.Add(p2, g2, m2);
  std::vector<double> p(p1), g(g1);
  p.insert(p.end(), p2.begin(), p2.end());
  g.insert(g.end(), g2.begin(), g2.end());
  const std::vector<std::uint8_t> m(50, 1);
  CHECK(Close(acc.Report().abs_rel, Evaluate(p, g, m).abs_rel));
}

TEST_CASE("metric argument errors") {
  const std::vector<double> a = {1.0, 2.0}, b = {1.0};
  const std::vector<std::uint8_t> mask = {1, 1}, none = {0, 0};
  CHECK_THROWS_AS(Evaluate(a, b, mask), ArgumentError);
  CHECK_THROWS_AS(Evaluate(a, a, none), ArgumentError);
  CHECK_THROWS_AS(MetricsAccumulator().Report(), ArgumentError);
}
