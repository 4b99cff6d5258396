#include <cmath>
#include <set>

#include <doctest.h>

#include "epimvs/errors.hpp"
#include "epimvs/network.hpp"
#include "oracles.hpp"

using namespace epimvs;

namespace {

NetworkConfig Small(NetworkConfig c) {
  c.height = 16;
  c.width = 24;
  c.hypotheses = 4;
  c.volume_bins = 5;
  c.channels = {3, 4, 4, 4};
  return c;
}

struct Inputs {
  Variable image;
  std::vector<Variable> refs;
  CameraIntrinsics k;
  std::vector<RelativePose> poses;
};

Inputs RandomInputs(const NetworkConfig& c, Rng& rng, int views = 2) {
  Inputs in;
  in.image = oracle::RandomVariable({1, c.input_channels, c.height, c.width}, rng, -1, 1, false);
  for (int i = 0; i < views; ++i) {
    in.refs.push_back(
        oracle::RandomVariable({1, c.input_channels, c.height, c.width}, rng, -1, 1, false));
    in.poses.push_back(oracle::RandomPose(rng, 0.05, 0.2));
  }
  in.k = CameraIntrinsics::FromFocal(0.9 * c.width, 0.9 * c.width, c.width / 2.0, c.height / 2.0);
  return in;
}

bool Equal(std::span<const double> a, std::span<const double> b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

TEST_CASE("forward output shapes and a normalized volume") {
  const NetworkConfig c = NetworkConfig::Ours();
  DepthNetwork net(c, 1);
  Rng rng(2);
  const Inputs in = RandomInputs(c, rng);
  const auto pred = net.Forward(in.image, in.refs, in.k, in.poses);
  CHECK(pred.depth_quarter.shape() == Shape{1, 1, 12, 16});
  CHECK(pred.depth_full.shape() == Shape{1, 1, 48, 64});
  CHECK(pred.probability.shape() == Shape{12, 16, 16});
  CHECK_FALSE(pred.confidence);
  const auto p = pred.probability.data();
  for (int i = 0; i < 12 * 16; ++i) {
    double total = 0.0;
    for (int k = 0; k < 16; ++k) total += p[i * 16 + k];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  for (double d : pred.depth_quarter.data()) {
    CHECK(d >= c.depth_min);
    CHECK(d <= c.depth_max);
  }
}

TEST_CASE("soft-argmax of a one-hot volume returns the hypothesis") {
  const auto hyp = SampleDepthHypotheses(4, 1.0, 5.0);
  for (int k = 0; k < 4; ++k) {
    std::vector<double> onehot(4, 0.0);
    onehot[k] = 1.0;
    const Variable d = SoftArgmaxDepth(Variable({1, 4}, onehot), hyp);
    CHECK(d.data()[0] == hyp[k]);
  }
  CHECK_THROWS_AS(SoftArgmaxDepth(Variable::Zeros({2, 3}), hyp), ArgumentError);
}

TEST_CASE("the zero-initialized residual head starts from the upsampled estimate") {
  const NetworkConfig c = Small(NetworkConfig::Ours());
  DepthNetwork net(c, 3);
  Rng rng(4);
  const Inputs in = RandomInputs(c, rng);
  const auto pred = net.Forward(in.image, in.refs, in.k, in.poses);
  const Variable up = UpsampleNearest(pred.depth_quarter, 4);
  CHECK(Equal(pred.depth_full.data(), up.data()));
}

TEST_CASE("a zero image with zero biases gives zero features at every stage") {
  const NetworkConfig c = Small(NetworkConfig::Ours());
  DepthNetwork net(c, 5);
  for (auto& [name, v] : net.Parameters()) {
    if (name.ends_with(".bias")) {
      Variable h = v;
      for (double& x : h.mutable_data()) x = 0.0;
    }
  }
  const auto maps = net.FeatureForward(Variable::Zeros({1, 1, c.height, c.width}));
  REQUIRE_FALSE(maps.empty());
  for (const auto& m : maps) {
    for (double x : m.data()) CHECK(x == 0.0);
  }
}

TEST_CASE("attention placement per configuration") {
  Rng rng(6);
  SUBCASE("ours: one attention stage at stride 4, one grid") {
    const NetworkConfig c = Small(NetworkConfig::Ours());
    DepthNetwork net(c, 1);
    const Inputs in = RandomInputs(c, rng);
    ForwardTrace trace;
    net.Forward(in.image, in.refs, in.k, in.poses, &trace);
    CHECK(trace.grid_constructions == 1);
    CHECK(trace.attention_stages == std::vector<int>{2});
    const auto& grid = trace.grids.at(2);
    CHECK(grid.rows() == c.height / 4);
    CHECK(grid.views() == 2);
    CHECK(grid.hypotheses() == c.hypotheses);
    CHECK(trace.attention.at(2).weights.shape() == Shape{grid.pixels(), 2, c.hypotheses});
  }
  SUBCASE("robust: attention at strides 2, 4 and 8") {
    const NetworkConfig c = Small(NetworkConfig::OursRobust());
    DepthNetwork net(c, 1);
    const Inputs in = RandomInputs(c, rng);
    ForwardTrace trace;
    net.Forward(in.image, in.refs, in.k, in.poses, &trace);
    CHECK(trace.attention_stages == std::vector<int>{1, 2, 3});
    CHECK(trace.grids.at(1).rows() == c.height / 2);
    CHECK(trace.grids.at(3).rows() == c.height / 8);
  }
  SUBCASE("mono: no attention, references and poses are ignored") {
    const NetworkConfig c = Small(NetworkConfig::Mono());
    DepthNetwork net(c, 1);
    const Inputs in = RandomInputs(c, rng);
    ForwardTrace trace;
    const auto a = net.Forward(in.image, in.refs, in.k, in.poses, &trace);
    const auto b = net.Forward(in.image, {}, in.k, {});
    CHECK(trace.grid_constructions == 0);
    CHECK(Equal(a.depth_full.data(), b.depth_full.data()));
    for (const auto& [name, v] : net.Parameters()) CHECK_FALSE(name.starts_with("G."));
  }
}

TEST_CASE("multi-view output depends on the poses") {
  const NetworkConfig c = Small(NetworkConfig::Ours());
  DepthNetwork net(c, 7);
  Rng rng(8);
  Inputs in = RandomInputs(c, rng);
  const auto a = net.Forward(in.image, in.refs, in.k, in.poses);
  in.poses[0].translation.x() += 0.3;
  const auto b = net.Forward(in.image, in.refs, in.k, in.poses);
  CHECK_FALSE(Equal(a.depth_quarter.data(), b.depth_quarter.data()));
}

TEST_CASE("construction is deterministic in the seed") {
  const NetworkConfig c = Small(NetworkConfig::Ours());
  DepthNetwork a(c, 11), b(c, 11), d(c, 12);
  const auto pa = a.Parameters(), pb = b.Parameters(), pd = d.Parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  std::set<std::string> names;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(Equal(pa[i].second.data(), pb[i].second.data()));
    any_diff |= !Equal(pa[i].second.data(), pd[i].second.data());
    names.insert(pa[i].first);
  }
  CHECK(any_diff);
  CHECK(names.size() == pa.size());
  std::size_t total = 0;
  for (const auto& [n, v] : pa) total += v.numel();
  CHECK(a.ParameterCount() == total);
}

TEST_CASE("invalid configurations and inputs") {
  NetworkConfig c = NetworkConfig::Ours();
  c.attention_layers = {4};
  CHECK_THROWS_AS(DepthNetwork(c, 1), ConfigurationError);
  c = NetworkConfig::Ours();
  c.height = 50;
  CHECK_THROWS_AS(DepthNetwork(c, 1), ConfigurationError);
  c = NetworkConfig::Ours();
  c.depth_min = 5.0;
  CHECK_THROWS_AS(DepthNetwork(c, 1), ConfigurationError);
  c = NetworkConfig::Ours();
  c.code_kind = DepthCodeKind::kCosine;
  c.channels = {8, 16, 23, 24};
  CHECK_THROWS_AS(DepthNetwork(c, 1), ConfigurationError);

  const NetworkConfig s = Small(NetworkConfig::Ours());
  DepthNetwork net(s, 1);
  Rng rng(9);
  Inputs in = RandomInputs(s, rng);
  CHECK_THROWS_AS(net.Forward(Variable::Zeros({1, 1, 8, 8}), in.refs, in.k, in.poses),
                  ArgumentError);
  CHECK_THROWS_AS(net.Forward(in.image, {}, in.k, {}), ArgumentError);
  in.poses.pop_back();
  CHECK_THROWS_AS(net.Forward(in.image, in.refs, in.k, in.poses), ArgumentError);
}

TEST_CASE("confidence head is positive") {
  NetworkConfig c = Small(NetworkConfig::Ours());
  c.confidence_head = true;
  DepthNetwork net(c, 13);
  Rng rng(14);
  const Inputs in = RandomInputs(c, rng);
  const auto pred = net.Forward(in.image, in.refs, in.k, in.poses);
  REQUIRE(pred.confidence);
  for (double s : pred.confidence.data()) CHECK(s > 0.0);
}

TEST_CASE("end-to-end gradients match finite differences on a small network") {
  for (const NetworkConfig& base : {NetworkConfig::Ours(), NetworkConfig::OursRobust()}) {
    const NetworkConfig c = Small(base);
    DepthNetwork net(c, 15);
    Rng rng(16);
    const Inputs in = RandomInputs(c, rng);
    // Perturb the zero-initialized head so every path carries gradient.
    std::vector<Variable> leaves;
    for (auto& [name, v] : net.Parameters()) {
      Variable h = v;
      if (name.starts_with("F.residual")) FillUniform(h.mutable_data(), -0.1, 0.1, rng);
      leaves.push_back(h);
    }
    const Variable r = oracle::RandomVariable({1, 1, c.height, c.width}, rng, -1, 1, false);
    auto loss = [&] { return Sum(Mul(net.Forward(in.image, in.refs, in.k, in.poses).depth_full, r)); };
    // The floor covers key biases, whose true gradient vanishes because a
    // shift shared by all hypotheses cancels in the softmax.
    const auto result = oracle::GradCheck(loss, leaves, 1e-4, 1e-4, 3, 17, 2.5e-5);
    CAPTURE(result.max_relative_error);
    CHECK(result.max_relative_error < 1e-4);
    CHECK(result.skipped * 10 < result.checked);
  }
}
