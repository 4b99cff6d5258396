#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "epimvs/metrics.hpp"
#include "epimvs/network.hpp"
#include "epimvs/robustness.hpp"
#include "epimvs/scenekit.hpp"

namespace epimvs {

// Mean |pred - gt| over the mask.
Variable L1Loss(const Variable& pred, const Variable& gt, std::span<const std::uint8_t> mask);

// Mean over the mask of |pred - gt| / sigma + log sigma. Any nonpositive or
// non-finite sigma is a ComputationError, masked or not.
Variable ConfidenceLoss(const Variable& pred, const Variable& gt, const Variable& sigma,
                        std::span<const std::uint8_t> mask);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected adaptive moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam(NamedParameters parameters, AdamOptions options = {});

  void ZeroGrad();
  // Parameters without an accumulated gradient are treated as having a zero
  // gradient. A non-finite gradient throws ComputationError naming the
  // parameter, before anything is modified.
  void Step();

  double learning_rate() const { return options_.learning_rate; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  std::int64_t step_count() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  NamedParameters parameters_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_ = 0;
};

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
double ClipGradNorm(const NamedParameters& parameters, double max_norm);

struct TrainingSample {
  int scene = 0;
  int view = 0;
  CameraIntrinsics intrinsics;
  Variable image;                   // [1,C,H,W], standardized intensities
  std::vector<Variable> references;  // same layout
  std::vector<RelativePose> poses;   // source -> reference
  Variable gt;                       // [1,1,H,W]
  std::vector<std::uint8_t> mask;    // gt > 0
};

using Dataset = std::vector<TrainingSample>;

// Per-channel standardized intensities (zero mean, unit variance) as
// [1,C,H,W]; a constant channel is only centred.
Variable ImageToInput(const Image& image);

// One sample per view of the scene, using its reference lists. When
// perturbations are given, each (source, reference) pose found among them is
// replaced by its perturbed value.
Dataset MakeDataset(const SyntheticScene& scene, int scene_index = 0,
                    const std::vector<PerturbationRecord>* perturbations = nullptr);

struct TrainingConfig {
  NetworkConfig network;
  int epochs = 10;
  int steps_per_epoch = 0;  // 0: one pass over the dataset
  double learning_rate = 1e-3;
  std::vector<int> decay_epochs;
  double decay_factor = 0.1;
  double clip_norm = 0.0;  // 0 disables clipping
  bool confidence_loss = false;
  std::uint64_t seed = 1;
  int checkpoint_every = 1;

  void Validate() const;
  // Learning rate in effect during a 0-based epoch.
  double LearningRateAt(int epoch) const;
};

// JSON with "network" and "schedule" objects; unknown keys are rejected.
TrainingConfig ParseTrainingConfig(const std::string& json_text);
TrainingConfig LoadTrainingConfig(const std::filesystem::path& path);
std::string TrainingConfigToJson(const TrainingConfig& config);
void SaveTrainingConfig(const std::filesystem::path& path, const TrainingConfig& config);

struct EpochLog {
  int epoch = 0;
  int steps = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double abs_rel = 0.0;  // masked AbsRel of the training predictions
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::int64_t steps = 0;
};

struct TrainHooks {
  // Called after every optimizer step with the step index and loss.
  std::function<void(std::int64_t step, double loss)> on_step;
};

// Deterministic given config.seed and the network's initial state. With a
// non-empty out_dir writes config.json, metrics.csv and checkpoint.{bin,txt}
// (initially and after every checkpoint_every epochs). A non-finite loss
// aborts with ComputationError and leaves the last checkpoint in place.
TrainResult Train(DepthNetwork& network, const Dataset& data, const TrainingConfig& config,
                  const std::filesystem::path& out_dir = {}, const TrainHooks& hooks = {});

// One training loss evaluation (no optimizer step).
Variable SampleLoss(const DepthNetwork& network, const TrainingSample& sample, bool confidence);

DepthMap Predict(const DepthNetwork& network, const TrainingSample& sample);
MetricsReport EvaluateDataset(const DepthNetwork& network, const Dataset& data,
                              bool scale_aligned = false, const MetricsOptions& options = {});

// checkpoint.txt lists "param <name> <offset> <rank> <dims...>" after a tag
// line; checkpoint.bin holds the float64 values back to back, little-endian.
void SaveCheckpoint(const std::filesystem::path& dir, const DepthNetwork& network);
void LoadCheckpoint(const std::filesystem::path& dir, DepthNetwork& network);

}  // namespace epimvs
