#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <doctest.h>

#include "epimvs/errors.hpp"
#include "epimvs/training.hpp"
#include "oracles.hpp"

using namespace epimvs;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("epimvs_test_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

SceneOptions TinyScene() {
  SceneOptions o;
  o.height = 16;
  o.width = 24;
  o.views = 3;
  o.seed = 21;
  return o;
}

TrainingConfig TinyConfig(NetworkConfig net = NetworkConfig::Ours()) {
  TrainingConfig c;
  c.network = net;
  c.network.height = 16;
  c.network.width = 24;
  c.network.hypotheses = 4;
  c.network.volume_bins = 5;
  c.network.channels = {3, 4, 4, 4};
  c.epochs = 2;
  c.seed = 5;
  return c;
}

std::string ReadAll(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("L1 and confidence losses against direct sums") {
  Variable pred({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  Variable gt({1, 1, 1, 4}, {1.5, 2.0, 1.0, 9.0});
  Variable sigma({1, 1, 1, 4}, {0.5, 1.0, 2.0, 4.0});
  const std::vector<std::uint8_t> mask = {1, 1, 1, 0};
  CHECK(std::abs(L1Loss(pred, gt, mask).item() - (0.5 + 0.0 + 2.0) / 3.0) < 1e-15);
  const double expected =
      (0.5 / 0.5 + std::log(0.5) + 0.0 + std::log(1.0) + 2.0 / 2.0 + std::log(2.0)) / 3.0;
  CHECK(std::abs(ConfidenceLoss(pred, gt, sigma, mask).item() - expected) < 1e-15);

  Variable bad({1, 1, 1, 4}, {0.5, 0.0, 2.0, 4.0});
  CHECK_THROWS_AS(ConfidenceLoss(pred, gt, bad, mask), ComputationError);
  Variable masked_out({1, 1, 1, 4}, {0.5, 1.0, 2.0, -1.0});
  CHECK_THROWS_AS(ConfidenceLoss(pred, gt, masked_out, mask), ComputationError);
  CHECK_THROWS_AS(L1Loss(pred, Variable::Zeros({1, 1, 2, 2}), mask), ArgumentError);
  CHECK_THROWS_AS(L1Loss(pred, gt, std::vector<std::uint8_t>(3, 1)), ArgumentError);
}

TEST_CASE("confidence loss gradient is finite-difference exact") {
  Rng rng(3);
  Variable pred = oracle::RandomVariable({1, 1, 3, 3}, rng, 1, 2);
  Variable gt = oracle::RandomVariable({1, 1, 3, 3}, rng, 2.5, 3.5, false);
  Variable sigma = oracle::RandomVariable({1, 1, 3, 3}, rng, 0.3, 1.5);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0, 1, 1, 1};
  const auto r = oracle::GradCheck([&] { return ConfidenceLoss(pred, gt, sigma, mask); },
                                   {pred, sigma});
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("first Adam step moves each parameter by the learning rate against its gradient") {
  Variable p({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({{"p", p}}, AdamOptions{0.01});
  Tape tape;
  Variable loss = Sum(Mul(p, Variable({3}, {3.0, -0.25, 0.0})));
  tape.Backward(loss);
  adam.Step();
  // With bias correction m_hat = g and v_hat = g^2 at t = 1.
  const auto d = p.data();
  CHECK(std::abs(d[0] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))) < 1e-15);
  CHECK(std::abs(d[1] - (-2.0 + 0.01 * 0.25 / (0.25 + 1e-8))) < 1e-15);
  CHECK(d[2] == 0.5);
  CHECK(adam.step_count() == 1);
  CHECK(std::abs(adam.first_moments()[0][0] - 0.1 * 3.0) < 1e-15);
  CHECK(std::abs(adam.second_moments()[0][0] - 0.001 * 9.0) < 1e-15);
}

TEST_CASE("Adam refuses non-finite gradients before touching parameters") {
  Variable p({2}, {1.0, 2.0}, true);
  Adam adam({{"bad.weight", p}});
  p.mutable_grad()[1] = std::nan("");
  try {
    adam.Step();
    FAIL("expected ComputationError");
  } catch (const ComputationError& e) {
    CHECK(std::string(e.what()).find("bad.weight") != std::string::npos);
  }
  CHECK(p.data()[0] == 1.0);
  CHECK(adam.step_count() == 0);
  CHECK_THROWS_AS(Adam({{"p", p}}, AdamOptions{0.1, 1.0}), ArgumentError);
}

TEST_CASE("gradient clipping rescales to the joint norm") {
  Variable a({2}, {0.0, 0.0}, true), b({1}, {0.0}, true);
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 0.0;
  b.mutable_grad()[0] = 4.0;
  const NamedParameters params = {{"a", a}, {"b", b}};
  CHECK(ClipGradNorm(params, 10.0) == 5.0);
  CHECK(b.grad()[0] == 4.0);
  CHECK(ClipGradNorm(params, 1.0) == 5.0);
  CHECK(std::abs(a.grad()[0] - 0.6) < 1e-15);
  CHECK(std::abs(b.grad()[0] - 0.8) < 1e-15);
  CHECK_THROWS_AS(ClipGradNorm(params, 0.0), ArgumentError);
}

TEST_CASE("configuration parsing") {
  const TrainingConfig c = ParseTrainingConfig(R"({
    "network": {"preset": "ours-robust", "code_kind": "cosine", "hypotheses": 8},
    "schedule": {"epochs": 3, "learning_rate": 0.01, "decay_epochs": [1, 2], "seed": 9}
  })");
  CHECK(c.network.attention_layers == NetworkConfig::OursRobust().attention_layers);
  CHECK(c.network.code_kind == DepthCodeKind::kCosine);
  CHECK(c.network.hypotheses == 8);
  CHECK(c.seed == 9);
  CHECK(c.LearningRateAt(0) == 0.01);
  CHECK(std::abs(c.LearningRateAt(1) - 1e-3) < 1e-18);
  CHECK(std::abs(c.LearningRateAt(2) - 1e-4) < 1e-18);

  const TrainingConfig back = ParseTrainingConfig(TrainingConfigToJson(c));
  CHECK(TrainingConfigToJson(back) == TrainingConfigToJson(c));

  CHECK(ParseTrainingConfig(R"({"network": {"preset": "mono"}})").network.attention_layers.empty());
  CHECK_THROWS_AS(ParseTrainingConfig(R"({"network": {"chanels": [1]}})"), ConfigurationError);
  CHECK_THROWS_AS(ParseTrainingConfig(R"({"optimizer": {}})"), ConfigurationError);
  CHECK_THROWS_AS(ParseTrainingConfig(R"({"network": {"preset": "huge"}})"), ConfigurationError);
  CHECK_THROWS_AS(ParseTrainingConfig(R"({"schedule": {"epochs": "ten"}})"), ConfigurationError);
  CHECK_THROWS_AS(ParseTrainingConfig("{not json"), ConfigurationError);
  CHECK_THROWS_AS(ParseTrainingConfig(R"({"schedule": {"confidence_loss": true}})"),
                  ConfigurationError);
  CHECK_THROWS_AS(LoadTrainingConfig("/nonexistent/config.json"), FormatError);
}

TEST_CASE("input standardization") {
  Image img(2, 2, 2);
  img.data = {1, 2, 3, 4, 5, 5, 5, 5};
  const Variable x = ImageToInput(img);
  CHECK(x.shape() == Shape{1, 2, 2, 2});
  const auto d = x.data();
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < 4; ++i) mean += d[i];
  for (int i = 0; i < 4; ++i) sq += d[i] * d[i];
  CHECK(std::abs(mean) < 1e-15);
  CHECK(std::abs(sq / 4 - 1.0) < 1e-12);
  for (int i = 4; i < 8; ++i) CHECK(d[i] == 0.0);
}

TEST_CASE("datasets pair each view with its references and optional perturbed poses") {
  const SyntheticScene scene = GenerateScene(TinyScene());
  const Dataset data = MakeDataset(scene, 4);
  REQUIRE(data.size() == 3);
  for (const auto& s : data) {
    CHECK(s.scene == 4);
    CHECK(s.references.size() == scene.references[s.view].size());
    CHECK(s.poses.size() == s.references.size());
    CHECK(s.mask.size() == s.gt.numel());
  }
  PerturbationRecord rec;
  rec.source = 0;
  rec.reference = scene.references[0][0];
  Rng rng(2);
  rec.perturbed = oracle::RandomPose(rng, 0.1, 0.1);
  const std::vector<PerturbationRecord> recs = {rec};
  const Dataset noisy = MakeDataset(scene, 0, &recs);
  CHECK(noisy[0].poses[0].translation == rec.perturbed.translation);
  CHECK(noisy[0].poses[1].translation == data[0].poses[1].translation);
}

TEST_CASE("training writes logs and checkpoints and is deterministic") {
  const SyntheticScene scene = GenerateScene(TinyScene());
  const Dataset data = MakeDataset(scene);
  const TrainingConfig config = TinyConfig();
  TempDir dir("train");

  DepthNetwork a(config.network, 1);
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_step = [&](std::int64_t, double loss) { losses.push_back(loss); };
  const TrainResult ra = Train(a, data, config, dir.path, hooks);
  CHECK(ra.steps == 6);
  CHECK(losses.size() == 6);
  REQUIRE(ra.log.size() == 2);

  const std::string csv = ReadAll(dir.path / "metrics.csv");
  CHECK(csv.starts_with("epoch,steps,learning_rate,mean_loss,abs_rel\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(fs::exists(dir.path / "checkpoint.bin"));
  CHECK(ParseTrainingConfig(ReadAll(dir.path / "config.json")).seed == config.seed);

  DepthNetwork b(config.network, 1);
  const TrainResult rb = Train(b, data, config);
  CHECK(rb.log.back().mean_loss == ra.log.back().mean_loss);

  DepthNetwork restored(config.network, 99);
  LoadCheckpoint(dir.path, restored);
  const auto pa = a.Parameters(), pr = restored.Parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa[i].second.data(), y = pr[i].second.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
  const DepthMap pred_a = Predict(a, data[0]), pred_r = Predict(restored, data[0]);
  CHECK(pred_a.depth == pred_r.depth);

  DepthNetwork other(TinyConfig(NetworkConfig::Mono()).network, 1);
  CHECK_THROWS_AS(LoadCheckpoint(dir.path, other), FormatError);
  CHECK_THROWS_AS(LoadCheckpoint(dir.path / "missing", a), FormatError);
}

TEST_CASE("a few steps on one scene reduce the training loss") {
  const SyntheticScene scene = GenerateScene(TinyScene());
  const Dataset data = MakeDataset(scene);
  TrainingConfig config = TinyConfig();
  config.epochs = 20;
  DepthNetwork net(config.network, 2);
  const TrainResult r = Train(net, data, config);
  CHECK(r.log.back().mean_loss < 0.7 * r.log.front().mean_loss);
  const MetricsReport m = EvaluateDataset(net, data);
  CHECK(m.pixels > 0);
  CHECK(std::isfinite(m.abs_rel));
}

TEST_CASE("training with the confidence loss") {
  const SyntheticScene scene = GenerateScene(TinyScene());
  const Dataset data = MakeDataset(scene);
  TrainingConfig config = TinyConfig();
  config.network.confidence_head = true;
  config.confidence_loss = true;
  DepthNetwork net(config.network, 3);
  const TrainResult r = Train(net, data, config);
  CHECK(std::isfinite(r.log.back().mean_loss));
  const DepthMap pred = Predict(net, data[0]);
  CHECK(pred.confidence.size() == pred.depth.size());
  CHECK_THROWS_AS(Train(net, {}, config), ArgumentError);
}
