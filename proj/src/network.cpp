#include "epimvs/network.hpp"

#include <algorithm>
#include <cmath>

#include "epimvs/errors.hpp"
#include "epimvs/random.hpp"

namespace epimvs {
namespace {

constexpr int kVolumeStage = 2;

ConvLayer MakeConv(int c_in, int c_out, int ksize, int stride, Rng& rng) {
  ConvLayer layer;
  layer.weight = Variable::Zeros({c_out, c_in, ksize, ksize}, true);
  layer.bias = Variable::Zeros({c_out}, true);
  layer.stride = stride;
  // Stride-2 layers pad only the leading edge so output u is centred on input
  // pixel 2u, matching CameraIntrinsics::Downscaled.
  layer.padding = stride == 1 ? Padding{ksize / 2, ksize / 2} : Padding{ksize / 2, 0};
  const double bound = std::sqrt(6.0 / (c_in * ksize * ksize));
  FillUniform(layer.weight.mutable_data(), -bound, bound, rng);
  return layer;
}

ConvLayer MakeZeroConv(int c_in, int c_out, int ksize) {
  ConvLayer layer;
  layer.weight = Variable::Zeros({c_out, c_in, ksize, ksize}, true);
  layer.bias = Variable::Zeros({c_out}, true);
  layer.padding = Padding{ksize / 2, ksize / 2};
  return layer;
}

void AddConv(NamedParameters& out, const std::string& name, const ConvLayer& layer) {
  out.emplace_back(name + ".weight", layer.weight);
  out.emplace_back(name + ".bias", layer.bias);
}

Variable DropBatch(const Variable& x) { return Reshape(x, {x.dim(1), x.dim(2), x.dim(3)}); }

}  // namespace

NetworkConfig NetworkConfig::Ours() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::OursRobust() {
  NetworkConfig c;
  c.attention_layers = {1, 2, 3};
  return c;
}

NetworkConfig NetworkConfig::Mono() {
  NetworkConfig c;
  c.attention_layers.clear();
  return c;
}

void NetworkConfig::Validate() const {
  if (stages() < 3) throw ConfigurationError("network needs at least 3 encoder stages");
  for (int c : channels) {
    if (c < 1) throw ConfigurationError("channel counts must be positive");
  }
  if (feature_stride != 4) throw ConfigurationError("feature stride must be 4");
  for (int s : attention_layers) {
    if (s < 0 || s >= stages()) {
      throw ConfigurationError("attention layer " + std::to_string(s) + " out of range");
    }
    if (code_kind == DepthCodeKind::kCosine && channels[s] % 2 != 0) {
      throw ConfigurationError("cosine codes need even channel counts at attention layers");
    }
  }
  if (hypotheses < 2 || volume_bins < 2) throw ConfigurationError("need >= 2 hypotheses");
  if (!(depth_min > 0.0) || !(depth_min < depth_max)) {
    throw ConfigurationError("depth range must satisfy 0 < min < max");
  }
  if (input_channels != 1 && input_channels != 3) {
    throw ConfigurationError("input must have 1 or 3 channels");
  }
  const int divisor = std::max(1 << (stages() - 1), 2 * feature_stride);
  if (height <= 0 || width <= 0 || height % divisor != 0 || width % divisor != 0) {
    throw ConfigurationError("image size must be divisible by " + std::to_string(divisor));
  }
}

Variable ConvLayer::operator()(const Variable& x) const {
  return Conv2d(x, weight, bias, stride, padding);
}

DepthNetwork::DepthNetwork(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.Validate();
  Rng rng(seed);
  attention_hypotheses_ =
      SampleDepthHypotheses(config_.hypotheses, config_.depth_min, config_.depth_max);
  volume_hypotheses_ =
      SampleDepthHypotheses(config_.volume_bins, config_.depth_min, config_.depth_max);

  const auto& ch = config_.channels;
  const int levels = config_.stages();
  auto build_encoder = [&](Encoder& enc, int depth) {
    for (int s = 0; s < depth; ++s) {
      const int c_in = s == 0 ? config_.input_channels : ch[s - 1];
      Stage st;
      st.a = MakeConv(c_in, ch[s], 3, s == 0 ? 1 : 2, rng);
      st.b = MakeConv(ch[s], ch[s], 3, 1, rng);
      enc.stages.push_back(st);
    }
  };
  build_encoder(depth_encoder_, levels);
  if (config_.multi_view()) {
    const int deepest = *config_.attention_layers.rbegin();
    build_encoder(feature_encoder_, deepest + 1);
    for (int s : config_.attention_layers) {
      AttentionParams p = InitAttentionParams(ch[s], config_.code_kind, attention_hypotheses_, rng);
      p.mask_enabled = config_.mask_enabled;
      p.view_mean = config_.view_mean;
      attention_.emplace(s, std::move(p));
    }
  }
  for (int s = levels - 2; s >= kVolumeStage; --s) {
    decoder_.emplace_back(MakeConv(ch[s + 1] + ch[s], ch[s], 3, 1, rng),
                          MakeConv(ch[s], ch[s], 3, 1, rng));
  }
  const int cv = ch[kVolumeStage];
  volume_head_.push_back(MakeConv(cv, cv, 3, 1, rng));
  volume_head_.push_back(MakeConv(cv, cv, 3, 2, rng));
  volume_head_.push_back(MakeConv(cv, cv, 3, 1, rng));
  volume_head_.push_back(MakeConv(cv, cv, 3, 1, rng));  // after x2 upsample
  volume_head_.push_back(MakeConv(cv, cv, 3, 1, rng));
  volume_head_.push_back(MakeConv(cv, config_.volume_bins, 3, 1, rng));
  for (int s = kVolumeStage - 1; s >= 0; --s) {
    refine_.push_back(MakeConv(ch[s + 1] + ch[s], ch[s], 3, 1, rng));
  }
  residual_head_ = MakeZeroConv(ch[0], 1, 3);
  if (config_.confidence_head) confidence_head_ = MakeZeroConv(ch[0], 1, 3);
}

Variable DepthNetwork::RunStage(const Stage& stage, const Variable& x) const {
  Variable h = Relu(stage.a(x));
  return Relu(Add(h, stage.b(h)));
}

std::vector<Variable> DepthNetwork::FeatureForward(const Variable& image) const {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != config_.input_channels ||
      image.dim(2) != config_.height || image.dim(3) != config_.width) {
    throw ArgumentError("image " + ShapeString(image.shape()) + " does not match config");
  }
  const Encoder& enc = feature_encoder_.stages.empty() ? depth_encoder_ : feature_encoder_;
  std::vector<Variable> maps;
  Variable x = image;
  for (const Stage& st : enc.stages) {
    x = RunStage(st, x);
    maps.push_back(x);
  }
  return maps;
}

DepthPrediction DepthNetwork::Forward(const Variable& image,
                                      const std::vector<Variable>& ref_images,
                                      const CameraIntrinsics& intrinsics,
                                      const std::vector<RelativePose>& poses,
                                      ForwardTrace* trace) const {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != config_.input_channels ||
      image.dim(2) != config_.height || image.dim(3) != config_.width) {
    throw ArgumentError("image " + ShapeString(image.shape()) + " does not match config");
  }
  const bool mvs = config_.multi_view();
  std::vector<Variable> src_features;
  std::vector<std::vector<Variable>> ref_features;
  if (mvs) {
    if (ref_images.empty()) throw ArgumentError("multi-view configuration needs reference views");
    if (ref_images.size() != poses.size()) {
      throw ArgumentError("reference view count " + std::to_string(ref_images.size()) +
                          " does not match pose count " + std::to_string(poses.size()));
    }
    src_features = FeatureForward(image);
    for (const auto& ref : ref_images) ref_features.push_back(FeatureForward(ref));
  }

  const ImageSize size{config_.height, config_.width};
  std::vector<Variable> skips;
  Variable x = image;
  for (int s = 0; s < config_.stages(); ++s) {
    x = RunStage(depth_encoder_.stages[s], x);
    if (mvs && config_.attention_layers.count(s)) {
      const int stride = 1 << s;
      EpipolarSampleGrid grid =
          BuildEpipolarGrid(intrinsics, poses, attention_hypotheses_, size, stride);
      std::vector<Variable> ref_maps;
      for (const auto& feats : ref_features) ref_maps.push_back(DropBatch(feats[s]));
      Variable sampled = SampleReferenceFeatures(ref_maps, grid);
      AttentionTrace attn_trace;
      Variable attended = EpipolarAttention(ToPixels(x), ToPixels(src_features[s]), sampled,
                                            grid.valid_flags(), attention_.at(s),
                                            trace ? &attn_trace : nullptr);
      x = FromPixels(attended, x.dim(2), x.dim(3));
      if (trace) {
        ++trace->grid_constructions;
        trace->attention_stages.push_back(s);
        trace->attention[s] = attn_trace;
        trace->grids[s] = std::move(grid);
      }
    }
    skips.push_back(x);
  }

  Variable u = skips.back();
  int level = config_.stages() - 2;
  for (const auto& [first, second] : decoder_) {
    u = Relu(first(ConcatChannels(UpsampleNearest(u, 2), skips[level])));
    u = Relu(second(u));
    --level;
  }
  const Variable features_quarter = u;

  Variable v1 = Relu(volume_head_[0](features_quarter));
  Variable v2 = Relu(volume_head_[1](v1));
  Variable v3 = Relu(volume_head_[2](v2));
  Variable d1 = Add(Relu(volume_head_[3](UpsampleNearest(v3, 2))), v1);
  Variable d2 = Relu(volume_head_[4](d1));
  Variable logits = volume_head_[5](d2);

  const int hq = logits.dim(2), wq = logits.dim(3);
  DepthPrediction pred;
  Variable prob = SoftmaxLastDim(ToPixels(logits));
  pred.probability = Reshape(prob, {hq, wq, config_.volume_bins});
  Variable depth_q = SoftArgmaxDepth(pred.probability, volume_hypotheses_);
  pred.depth_quarter = Reshape(depth_q, {1, 1, hq, wq});

  Variable r = features_quarter;
  level = kVolumeStage - 1;
  for (const auto& conv : refine_) {
    r = Relu(conv(ConcatChannels(UpsampleNearest(r, 2), skips[level])));
    --level;
  }
  pred.depth_full = ResidualUpsample(pred.depth_quarter, residual_head_(r));
  if (config_.confidence_head) pred.confidence = Exp(confidence_head_(r));
  return pred;
}

NamedParameters DepthNetwork::Parameters() const {
  NamedParameters out;
  for (std::size_t s = 0; s < depth_encoder_.stages.size(); ++s) {
    AddConv(out, "F.enc" + std::to_string(s) + ".a", depth_encoder_.stages[s].a);
    AddConv(out, "F.enc" + std::to_string(s) + ".b", depth_encoder_.stages[s].b);
  }
  for (std::size_t s = 0; s < feature_encoder_.stages.size(); ++s) {
    AddConv(out, "G.enc" + std::to_string(s) + ".a", feature_encoder_.stages[s].a);
    AddConv(out, "G.enc" + std::to_string(s) + ".b", feature_encoder_.stages[s].b);
  }
  for (const auto& [stage, params] : attention_) {
    auto& p = const_cast<AttentionParams&>(params);
    p.ForEachParameter([&](const std::string& name, Variable& v) {
      out.emplace_back("attn" + std::to_string(stage) + "." + name, v);
    });
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    AddConv(out, "F.dec" + std::to_string(i) + ".a", decoder_[i].first);
    AddConv(out, "F.dec" + std::to_string(i) + ".b", decoder_[i].second);
  }
  for (std::size_t i = 0; i < volume_head_.size(); ++i) {
    AddConv(out, "F.volume" + std::to_string(i), volume_head_[i]);
  }
  for (std::size_t i = 0; i < refine_.size(); ++i) {
    AddConv(out, "F.refine" + std::to_string(i), refine_[i]);
  }
  AddConv(out, "F.residual", residual_head_);
  if (config_.confidence_head) AddConv(out, "F.confidence", confidence_head_);
  return out;
}

std::size_t DepthNetwork::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& [name, v] : Parameters()) n += v.numel();
  return n;
}

Variable SoftArgmaxDepth(const Variable& probability, const DepthHypothesisSet& hypotheses) {
  if (!probability || probability.rank() < 1) throw ArgumentError("soft-argmax: empty volume");
  const int k = probability.dim(-1);
  if (static_cast<std::size_t>(k) != hypotheses.size()) {
    throw ArgumentError("soft-argmax: volume has " + std::to_string(k) + " bins but " +
                        std::to_string(hypotheses.size()) + " hypotheses");
  }
  Shape shape(probability.shape().begin(), probability.shape().end() - 1);
  if (shape.empty()) shape = {1};
  const std::size_t rows = probability.numel() / k;
  std::vector<double> values = hypotheses.values;
  std::vector<double> out(rows, 0.0);
  const auto p = probability.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += p[r * k + j] * values[j];
    out[r] = acc;
  }
  macs::Add(rows * k);
  return MakeResult(std::move(shape), std::move(out), {probability},
                    [probability, values = std::move(values), rows, k](const TensorNode& o) {
                      auto g = GradOf(probability);
                      if (g.empty()) return;
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (int j = 0; j < k; ++j) g[r * k + j] += o.grad[r] * values[j];
                      }
                    });
}

Variable ResidualUpsample(const Variable& depth_quarter, const Variable& residual) {
  if (depth_quarter.rank() != 4 || residual.rank() != 4 || depth_quarter.dim(1) != 1 ||
      residual.dim(1) != 1 || residual.dim(2) != 4 * depth_quarter.dim(2) ||
      residual.dim(3) != 4 * depth_quarter.dim(3) || residual.dim(0) != depth_quarter.dim(0)) {
    throw ArgumentError("residual upsample: " + ShapeString(depth_quarter.shape()) + " vs " +
                        ShapeString(residual.shape()));
  }
  return Add(UpsampleNearest(depth_quarter, 4), residual);
}

}  // namespace epimvs
