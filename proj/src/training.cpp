#include "epimvs/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

using nlohmann::json;

constexpr char kCheckpointTag[] = "# epimvs-checkpoint v1";

void RequireMapShapes(const Variable& pred, const Variable& gt, std::span<const std::uint8_t> mask,
                      const char* op) {
  if (!pred || !gt) throw ArgumentError(std::string(op) + ": null operand");
  if (pred.shape() != gt.shape()) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + ShapeString(pred.shape()) +
                        " vs " + ShapeString(gt.shape()));
  }
  if (mask.size() != pred.numel()) throw ArgumentError(std::string(op) + ": mask size mismatch");
}

template <typename T>
void Take(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void RejectUnknown(const json& obj, std::initializer_list<const char*> known, const char* where) {
  if (!obj.is_object()) throw ConfigurationError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigurationError(std::string("unknown key '") + key + "' in " + where);
    }
  }
}

struct StepOutput {
  Variable loss;
  DepthPrediction prediction;
};

StepOutput ForwardLoss(const DepthNetwork& network, const TrainingSample& sample, bool confidence) {
  StepOutput out;
  out.prediction = network.Forward(sample.image, sample.references, sample.intrinsics, sample.poses);
  if (confidence) {
    if (!out.prediction.confidence) {
      throw ConfigurationError("confidence loss needs a network with a confidence head");
    }
    out.loss = ConfidenceLoss(out.prediction.depth_full, sample.gt, out.prediction.confidence,
                              sample.mask);
  } else {
    out.loss = L1Loss(out.prediction.depth_full, sample.gt, sample.mask);
  }
  return out;
}

double MaskedAbsRel(std::span<const double> pred, std::span<const double> gt,
                    std::span<const std::uint8_t> mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask[i]) continue;
    sum += std::abs(pred[i] - gt[i]) / gt[i];
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

Variable L1Loss(const Variable& pred, const Variable& gt, std::span<const std::uint8_t> mask) {
  RequireMapShapes(pred, gt, mask, "l1_loss");
  return MaskedMean(Abs(Sub(pred, gt)), mask);
}

Variable ConfidenceLoss(const Variable& pred, const Variable& gt, const Variable& sigma,
                        std::span<const std::uint8_t> mask) {
  RequireMapShapes(pred, gt, mask, "confidence_loss");
  if (!sigma || sigma.shape() != pred.shape()) {
    throw ArgumentError("confidence_loss: sigma shape mismatch");
  }
  const auto s = sigma.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] > 0.0 && std::isfinite(s[i]))) {
      throw ComputationError("confidence_loss: sigma must be positive, got " +
                             std::to_string(s[i]) + " at pixel " + std::to_string(i));
    }
  }
  return MaskedMean(Add(Div(Abs(Sub(pred, gt)), sigma), Log(sigma)), mask);
}

Adam::Adam(NamedParameters parameters, AdamOptions options)
    : parameters_(std::move(parameters)), options_(options) {
  if (!(options_.learning_rate >= 0.0) || !(options_.beta1 >= 0.0 && options_.beta1 < 1.0) ||
      !(options_.beta2 >= 0.0 && options_.beta2 < 1.0) || !(options_.epsilon > 0.0)) {
    throw ArgumentError("adam: invalid hyperparameters");
  }
  for (const auto& [name, p] : parameters_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::ZeroGrad() {
  for (auto& [name, p] : parameters_) p.ZeroGrad();
}

void Adam::Step() {
  for (const auto& [name, p] : parameters_) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw ComputationError("adam: non-finite gradient in " + name);
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < parameters_.size(); ++k) {
    Variable& p = parameters_[k].second;
    const auto grad = p.grad();
    auto data = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / c1, v_hat = v[i] / c2;
      data[i] -= options_.learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon);
    }
  }
}

double ClipGradNorm(const NamedParameters& parameters, double max_norm) {
  if (!(max_norm > 0.0)) throw ArgumentError("clip norm must be positive");
  double sq = 0.0;
  for (const auto& [name, p] : parameters) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& [name, p] : parameters) {
      Variable handle = p;
      if (!handle.has_grad()) continue;
      for (double& g : handle.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

Variable ImageToInput(const Image& image) {
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<double> data(image.data.size());
  for (int c = 0; c < image.channels; ++c) {
    const auto begin = image.data.begin() + c * plane;
    const double mean = std::accumulate(begin, begin + plane, 0.0) / plane;
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (begin[i] - mean) * (begin[i] - mean);
    const double stddev = std::sqrt(var / plane);
    const double inv = stddev > 1e-6 ? 1.0 / stddev : 1.0;
    for (std::size_t i = 0; i < plane; ++i) data[c * plane + i] = (begin[i] - mean) * inv;
  }
  return Variable({1, image.channels, image.height, image.width}, std::move(data));
}

Dataset MakeDataset(const SyntheticScene& scene, int scene_index,
                    const std::vector<PerturbationRecord>* perturbations) {
  Dataset out;
  for (int v = 0; v < scene.views(); ++v) {
    TrainingSample s;
    s.scene = scene_index;
    s.view = v;
    s.intrinsics = scene.intrinsics;
    s.image = ImageToInput(scene.images[v]);
    for (int r : scene.references[v]) {
      RelativePose pose = RelativeBetween(scene.poses[v], scene.poses[r]);
      if (perturbations) {
        for (const auto& rec : *perturbations) {
          if (rec.source == v && rec.reference == r) pose = rec.perturbed;
        }
      }
      s.references.push_back(ImageToInput(scene.images[r]));
      s.poses.push_back(pose);
    }
    const DepthMap& d = scene.depths[v];
    s.gt = Variable({1, 1, d.height, d.width}, d.depth);
    s.mask = d.ValidMask();
    out.push_back(std::move(s));
  }
  return out;
}

void TrainingConfig::Validate() const {
  network.Validate();
  if (epochs < 0) throw ConfigurationError("epochs must be non-negative");
  if (steps_per_epoch < 0) throw ConfigurationError("steps_per_epoch must be non-negative");
  if (!(learning_rate >= 0.0)) throw ConfigurationError("learning rate must be non-negative");
  if (!(decay_factor > 0.0)) throw ConfigurationError("decay factor must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigurationError("clip norm must be non-negative");
  if (checkpoint_every < 1) throw ConfigurationError("checkpoint_every must be >= 1");
  if (confidence_loss && !network.confidence_head) {
    throw ConfigurationError("confidence loss needs network.confidence_head");
  }
}

double TrainingConfig::LearningRateAt(int epoch) const {
  double lr = learning_rate;
  for (int e : decay_epochs) {
    if (epoch >= e) lr *= decay_factor;
  }
  return lr;
}

TrainingConfig ParseTrainingConfig(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigurationError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainingConfig c;
  try {
    RejectUnknown(root, {"network", "schedule"}, "config");
    if (root.contains("network")) {
      const json& n = root.at("network");
      RejectUnknown(n,
                    {"preset", "channels", "attention_layers", "hypotheses", "volume_bins",
                     "depth_min", "depth_max", "height", "width", "input_channels",
                     "feature_stride", "code_kind", "mask_enabled", "view_mean",
                     "confidence_head"},
                    "network");
      if (n.contains("preset")) {
        const auto preset = n.at("preset").get<std::string>();
        if (preset == "ours") {
          c.network = NetworkConfig::Ours();
        } else if (preset == "ours-robust") {
          c.network = NetworkConfig::OursRobust();
        } else if (preset == "mono") {
          c.network = NetworkConfig::Mono();
        } else {
          throw ConfigurationError("unknown network preset '" + preset + "'");
        }
      }
      auto& nc = c.network;
      Take(n, "channels", nc.channels);
      if (n.contains("attention_layers")) {
        nc.attention_layers.clear();
        for (int s : n.at("attention_layers").get<std::vector<int>>()) nc.attention_layers.insert(s);
      }
      Take(n, "hypotheses", nc.hypotheses);
      Take(n, "volume_bins", nc.volume_bins);
      Take(n, "depth_min", nc.depth_min);
      Take(n, "depth_max", nc.depth_max);
      Take(n, "height", nc.height);
      Take(n, "width", nc.width);
      Take(n, "input_channels", nc.input_channels);
      Take(n, "feature_stride", nc.feature_stride);
      if (n.contains("code_kind")) {
        try {
          nc.code_kind = ParseDepthCodeKind(n.at("code_kind").get<std::string>());
        } catch (const ArgumentError& e) {
          throw ConfigurationError(e.what());
        }
      }
      Take(n, "mask_enabled", nc.mask_enabled);
      Take(n, "view_mean", nc.view_mean);
      Take(n, "confidence_head", nc.confidence_head);
    }
    if (root.contains("schedule")) {
      const json& s = root.at("schedule");
      RejectUnknown(s,
                    {"epochs", "steps_per_epoch", "learning_rate", "decay_epochs", "decay_factor",
                     "clip_norm", "confidence_loss", "seed", "checkpoint_every"},
                    "schedule");
      Take(s, "epochs", c.epochs);
      Take(s, "steps_per_epoch", c.steps_per_epoch);
      Take(s, "learning_rate", c.learning_rate);
      Take(s, "decay_epochs", c.decay_epochs);
      Take(s, "decay_factor", c.decay_factor);
      Take(s, "clip_norm", c.clip_norm);
      Take(s, "confidence_loss", c.confidence_loss);
      Take(s, "seed", c.seed);
      Take(s, "checkpoint_every", c.checkpoint_every);
    }
  } catch (const json::exception& e) {
    throw ConfigurationError(std::string("bad config value: ") + e.what());
  }
  c.Validate();
  return c;
}

TrainingConfig LoadTrainingConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseTrainingConfig(ss.str());
}

std::string TrainingConfigToJson(const TrainingConfig& c) {
  const auto& n = c.network;
  json root;
  root["network"] = {
      {"channels", n.channels},
      {"attention_layers", std::vector<int>(n.attention_layers.begin(), n.attention_layers.end())},
      {"hypotheses", n.hypotheses},
      {"volume_bins", n.volume_bins},
      {"depth_min", n.depth_min},
      {"depth_max", n.depth_max},
      {"height", n.height},
      {"width", n.width},
      {"input_channels", n.input_channels},
      {"feature_stride", n.feature_stride},
      {"code_kind", std::string(ToString(n.code_kind))},
      {"mask_enabled", n.mask_enabled},
      {"view_mean", n.view_mean},
      {"confidence_head", n.confidence_head},
  };
  root["schedule"] = {
      {"epochs", c.epochs},
      {"steps_per_epoch", c.steps_per_epoch},
      {"learning_rate", c.learning_rate},
      {"decay_epochs", c.decay_epochs},
      {"decay_factor", c.decay_factor},
      {"clip_norm", c.clip_norm},
      {"confidence_loss", c.confidence_loss},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every},
  };
  return root.dump(2) + "\n";
}

void SaveTrainingConfig(const std::filesystem::path& path, const TrainingConfig& config) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << TrainingConfigToJson(config);
  if (!out) throw FormatError("failed writing " + path.string());
}

Variable SampleLoss(const DepthNetwork& network, const TrainingSample& sample, bool confidence) {
  return ForwardLoss(network, sample, confidence).loss;
}

TrainResult Train(DepthNetwork& network, const Dataset& data, const TrainingConfig& config,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  config.Validate();
  if (data.empty()) throw ArgumentError("training dataset is empty");
  const NamedParameters params = network.Parameters();
  Adam optimizer(params, AdamOptions{config.learning_rate});

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    SaveTrainingConfig(out_dir / "config.json", config);
    SaveCheckpoint(out_dir, network);
    csv.open(out_dir / "metrics.csv");
    if (!csv) throw FormatError("cannot write " + (out_dir / "metrics.csv").string());
    csv << "epoch,steps,learning_rate,mean_loss,abs_rel\n" << std::setprecision(10);
  }

  Rng order_rng(config.seed);
  std::vector<int> order(data.size());
  std::size_t cursor = order.size();
  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.LearningRateAt(epoch);
    optimizer.set_learning_rate(lr);
    const int steps = config.steps_per_epoch > 0 ? config.steps_per_epoch
                                                 : static_cast<int>(data.size());
    double loss_sum = 0.0, abs_rel_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const TrainingSample& sample = data[order[cursor++]];
      Tape tape;
      optimizer.ZeroGrad();
      StepOutput out = ForwardLoss(network, sample, config.confidence_loss);
      const double loss = out.loss.item();
      if (!std::isfinite(loss)) {
        throw ComputationError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(result.steps) +
                               "; the last written checkpoint is kept");
      }
      tape.Backward(out.loss);
      if (config.clip_norm > 0.0) ClipGradNorm(params, config.clip_norm);
      optimizer.Step();
      ++result.steps;
      loss_sum += loss;
      abs_rel_sum += MaskedAbsRel(out.prediction.depth_full.data(), sample.gt.data(), sample.mask);
      if (hooks.on_step) hooks.on_step(result.steps, loss);
    }
    EpochLog entry{epoch, steps, lr, loss_sum / steps, abs_rel_sum / steps};
    result.log.push_back(entry);
    if (csv.is_open()) {
      csv << entry.epoch << ',' << entry.steps << ',' << entry.learning_rate << ','
          << entry.mean_loss << ',' << entry.abs_rel << '\n';
      csv.flush();
      if ((epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs) {
        SaveCheckpoint(out_dir, network);
      }
    }
  }
  return result;
}

DepthMap Predict(const DepthNetwork& network, const TrainingSample& sample) {
  const DepthPrediction pred =
      network.Forward(sample.image, sample.references, sample.intrinsics, sample.poses);
  DepthMap out(pred.depth_full.dim(2), pred.depth_full.dim(3));
  const auto d = pred.depth_full.data();
  out.depth.assign(d.begin(), d.end());
  if (pred.confidence) {
    const auto c = pred.confidence.data();
    out.confidence.assign(c.begin(), c.end());
  }
  return out;
}

MetricsReport EvaluateDataset(const DepthNetwork& network, const Dataset& data,
                              bool scale_aligned, const MetricsOptions& options) {
  if (data.empty()) throw ArgumentError("evaluation dataset is empty");
  std::vector<double> pred, gt;
  std::vector<std::uint8_t> mask;
  for (const auto& sample : data) {
    const DepthMap p = Predict(network, sample);
    pred.insert(pred.end(), p.depth.begin(), p.depth.end());
    const auto g = sample.gt.data();
    gt.insert(gt.end(), g.begin(), g.end());
    mask.insert(mask.end(), sample.mask.begin(), sample.mask.end());
  }
  return scale_aligned ? EvaluateScaleAligned(pred, gt, mask, options)
                       : Evaluate(pred, gt, mask, options);
}

void SaveCheckpoint(const std::filesystem::path& dir, const DepthNetwork& network) {
  std::filesystem::create_directories(dir);
  const auto bin_tmp = dir / "checkpoint.bin.tmp";
  const auto txt_tmp = dir / "checkpoint.txt.tmp";
  {
    std::ofstream bin(bin_tmp, std::ios::binary);
    std::ofstream txt(txt_tmp);
    if (!bin || !txt) throw FormatError("cannot write checkpoint in " + dir.string());
    txt << kCheckpointTag << '\n';
    std::size_t offset = 0;
    for (const auto& [name, p] : network.Parameters()) {
      txt << "param " << name << ' ' << offset << ' ' << p.rank();
      for (int d : p.shape()) txt << ' ' << d;
      txt << '\n';
      detail::WriteDoubles(bin, p.data());
      offset += p.numel();
    }
    if (!bin || !txt) throw FormatError("failed writing checkpoint in " + dir.string());
  }
  // Rename so an interrupted write never replaces the previous checkpoint.
  std::filesystem::rename(bin_tmp, dir / "checkpoint.bin");
  std::filesystem::rename(txt_tmp, dir / "checkpoint.txt");
}

void LoadCheckpoint(const std::filesystem::path& dir, DepthNetwork& network) {
  const auto txt_path = dir / "checkpoint.txt";
  const auto bin_path = dir / "checkpoint.bin";
  std::ifstream txt(txt_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!txt || !bin) throw FormatError("no checkpoint in " + dir.string());
  std::string line;
  if (!std::getline(txt, line) || line != kCheckpointTag) {
    throw FormatError(txt_path.string() + ": missing format tag");
  }
  NamedParameters params = network.Parameters();
  std::size_t index = 0, expected_offset = 0;
  while (std::getline(txt, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key, name;
    std::size_t offset = 0;
    int rank = 0;
    ls >> key >> name >> offset >> rank;
    Shape shape(std::max(rank, 0));
    for (int& d : shape) ls >> d;
    if (!ls || key != "param") throw FormatError(txt_path.string() + ": malformed line '" + line + "'");
    if (index >= params.size() || params[index].first != name ||
        params[index].second.shape() != shape || offset != expected_offset) {
      throw FormatError(txt_path.string() + ": parameter '" + name +
                        "' does not match the network configuration");
    }
    detail::ReadDoubles(bin, params[index].second.mutable_data(), bin_path);
    expected_offset += params[index].second.numel();
    ++index;
  }
  if (index != params.size()) {
    throw FormatError(txt_path.string() + ": checkpoint lists " + std::to_string(index) +
                      " parameters, network has " + std::to_string(params.size()));
  }
}

}  // namespace epimvs
