#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "epimvs/attention.hpp"
#include "epimvs/geometry.hpp"
#include "epimvs/tensor.hpp"

namespace epimvs {

/// Shape and mode of the depth network. Encoder stage s runs at stride 2^s;
/// the depth probability volume lives at stage 2 (stride 4).
struct NetworkConfig {
  std::vector<int> channels = {8, 16, 24, 24};
  std::set<int> attention_layers = {2};
  int hypotheses = 16;
  int volume_bins = 16;
  double depth_min = 1.0;
  double depth_max = 5.0;
  int height = 48;
  int width = 64;
  int input_channels = 1;
  int feature_stride = 4;
  DepthCodeKind code_kind = DepthCodeKind::kLearned;
  bool mask_enabled = true;
  bool view_mean = false;
  bool confidence_head = false;

  static NetworkConfig Ours();
  static NetworkConfig OursRobust();  // attention at strides 2, 4 and 8
  static NetworkConfig Mono();

  int stages() const { return static_cast<int>(channels.size()); }
  bool multi_view() const { return !attention_layers.empty(); }
  void Validate() const;
};

struct DepthPrediction {
  Variable depth_quarter;  // [1,1,H/4,W/4]
  Variable depth_full;     // [1,1,H,W]
  Variable probability;    // [H/4, W/4, K']
  Variable confidence;     // [1,1,H,W], only with a confidence head
};

struct ForwardTrace {
  int grid_constructions = 0;
  std::vector<int> attention_stages;
  std::map<int, EpipolarSampleGrid> grids;
  std::map<int, AttentionTrace> attention;
};

using NamedParameters = std::vector<std::pair<std::string, Variable>>;

struct ConvLayer {
  Variable weight;  // [C',C,k,k]
  Variable bias;    // [C']
  int stride = 1;
  Padding padding;

  Variable operator()(const Variable& x) const;
};

/// Feature network G and depth network F with epipolar attention injected
/// after the configured encoder stages.
class DepthNetwork {
 public:
  DepthNetwork(NetworkConfig config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  const DepthHypothesisSet& attention_hypotheses() const { return attention_hypotheses_; }
  const DepthHypothesisSet& volume_hypotheses() const { return volume_hypotheses_; }

  // Per-stage G activations, stage 0 .. max attention stage (or all stages
  // when the configuration has no attention).
  std::vector<Variable> FeatureForward(const Variable& image) const;

  // image [1,C,H,W]; one pose per reference image (source -> reference).
  DepthPrediction Forward(const Variable& image, const std::vector<Variable>& ref_images,
                          const CameraIntrinsics& intrinsics,
                          const std::vector<RelativePose>& poses,
                          ForwardTrace* trace = nullptr) const;

  NamedParameters Parameters() const;
  std::size_t ParameterCount() const;

  const AttentionParams& attention(int stage) const { return attention_.at(stage); }
  AttentionParams& mutable_attention(int stage) { return attention_.at(stage); }

 private:
  struct Stage {
    ConvLayer a, b;
  };
  struct Encoder {
    std::vector<Stage> stages;
  };

  Variable RunStage(const Stage& stage, const Variable& x) const;

  NetworkConfig config_;
  DepthHypothesisSet attention_hypotheses_;
  DepthHypothesisSet volume_hypotheses_;
  Encoder depth_encoder_;
  Encoder feature_encoder_;
  std::map<int, AttentionParams> attention_;
  std::vector<std::pair<ConvLayer, ConvLayer>> decoder_;  // one per stage L-2 .. 2
  std::vector<ConvLayer> volume_head_;                    // 3 conv + 3 up-conv
  std::vector<ConvLayer> refine_;                         // stages 1 .. 0
  ConvLayer residual_head_;
  ConvLayer confidence_head_;
};

// probability [..., K'] normalized over the last axis -> expected depth with
// the last axis dropped.
Variable SoftArgmaxDepth(const Variable& probability, const DepthHypothesisSet& hypotheses);

// Nearest x4 upsample of [1,1,h,w] plus a [1,1,4h,4w] residual.
Variable ResidualUpsample(const Variable& depth_quarter, const Variable& residual);

}  // namespace epimvs
