// Command-line front end: scene generation, training, evaluation, pose
// perturbation, fusion and a few inspection helpers.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, missing
// input). Errors are reported on one line of stderr.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epimvs/errors.hpp"
#include "epimvs/fusion.hpp"
#include "epimvs/training.hpp"

using namespace epimvs;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string OneLine(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

Dataset LoadScenes(const std::vector<std::string>& dirs,
                   const std::vector<std::string>& perturbation_files = {}) {
  if (!perturbation_files.empty() && perturbation_files.size() != dirs.size()) {
    throw UsageError("give one --perturbations file per --scene");
  }
  Dataset all;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const SyntheticScene scene = LoadScene(dirs[i]);
    Dataset d;
    if (perturbation_files.empty()) {
      d = MakeDataset(scene, static_cast<int>(i));
    } else {
      const auto records = ReadPerturbations(perturbation_files[i]);
      d = MakeDataset(scene, static_cast<int>(i), &records);
    }
    all.insert(all.end(), d.begin(), d.end());
  }
  return all;
}

// A training output directory holds config.json next to the checkpoint.
DepthNetwork LoadNetwork(const fs::path& dir) {
  const TrainingConfig config = LoadTrainingConfig(dir / "config.json");
  DepthNetwork network(config.network, config.seed);
  LoadCheckpoint(dir, network);
  return network;
}

void WritePng16(const fs::path& path, const std::vector<std::uint16_t>& pixels, int height,
                int width) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "wb"),
                                                       &std::fclose);
  if (!file) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(width) * 2);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      // PNG stores 16-bit samples big-endian.
      const std::uint16_t v = pixels[static_cast<std::size_t>(y) * width + x];
      row[2 * x] = static_cast<png_byte>(v >> 8);
      row[2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void PrintTable(const MetricsReport& report) {
  const auto cols = report.Columns();
  const auto vals = report.Values();
  for (const auto& c : cols) std::printf("%12s", c.c_str());
  std::printf("\n");
  for (double v : vals) std::printf("%12.5f", v);
  std::printf("\n");
}

void WriteCsv(const fs::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  const auto cols = report.Columns();
  const auto vals = report.Values();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  out.precision(17);
  for (std::size_t i = 0; i < vals.size(); ++i) out << (i ? "," : "") << vals[i];
  out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth estimation from posed views with epipolar attention."};
  app.require_subcommand(1);

  // gen-scene
  SceneOptions scene_opts;
  std::string out_path;
  auto* gen = app.add_subcommand("gen-scene", "Render a synthetic scene directory");
  gen->add_option("--seed", scene_opts.seed, "Scene seed");
  gen->add_option("--views", scene_opts.views, "Number of ring cameras");
  gen->add_option("--references", scene_opts.references, "Reference views per view");
  gen->add_option("--height", scene_opts.height);
  gen->add_option("--width", scene_opts.width);
  gen->add_option("--spacing-deg", scene_opts.view_spacing_deg, "Angle between ring cameras");
  gen->add_option("--spheres", scene_opts.spheres);
  gen->add_option("--out", out_path, "Output directory")->required();

  // train
  std::string config_path;
  std::uint64_t train_seed = 0;
  bool seed_given = false;
  std::vector<std::string> scenes, perturbation_files;
  auto* train = app.add_subcommand("train", "Train a network on scene directories");
  train->add_option("--config", config_path, "Training config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option_function<std::uint64_t>(
      "--seed",
      [&](std::uint64_t s) {
        train_seed = s;
        seed_given = true;
      },
      "Overrides the config seed");
  train->add_option("--scene", scenes, "Scene directory (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--perturbations", perturbation_files,
                    "Perturbed poses per scene, from `perturb`")
      ->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "Output directory")->required();

  // eval
  std::string model_dir, csv_path, predictions_dir;
  bool scale_aligned = false;
  auto* eval = app.add_subcommand("eval", "Score a trained network on scene directories");
  eval->add_option("--model", model_dir, "Training output directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--scene", scenes, "Scene directory (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--csv", csv_path, "Write the table as CSV");
  eval->add_option("--predictions", predictions_dir,
                   "Write predicted depth maps (single scene only)");
  eval->add_flag("--scale-aligned", scale_aligned, "Median-align each prediction first");

  // perturb
  std::string scene_dir;
  PerturbOptions perturb_opts;
  std::uint64_t perturb_seed = 1;
  auto* perturb = app.add_subcommand("perturb", "Precompute PnP-perturbed reference poses");
  perturb->add_option("--scene", scene_dir)->required()->check(CLI::ExistingDirectory);
  perturb->add_option("--noise-px", perturb_opts.noise_max_px, "Maximum pixel jitter per axis");
  perturb->add_option("--seed", perturb_seed);
  perturb->add_option("--out", out_path, "Perturbation file")->required();

  // fuse
  std::string depth_dir;
  FusionOptions fusion_opts;
  double tau = -1.0;
  auto* fuse = app.add_subcommand("fuse", "Fuse depth maps into a PLY point cloud");
  fuse->add_option("--scene", scene_dir, "Scene directory (poses, intrinsics, depth)")
      ->required()
      ->check(CLI::ExistingDirectory);
  fuse->add_option("--depths", depth_dir, "Directory of depth_###.bin overriding the scene's")
      ->check(CLI::ExistingDirectory);
  fuse->add_option("--min-views", fusion_opts.min_views);
  fuse->add_option("--consistency-px", fusion_opts.consistency_px);
  fuse->add_option("--relative-depth", fusion_opts.relative_depth);
  fuse->add_option("--tau", tau, "Drop pixels with predicted sigma above this");
  fuse->add_option("--out", out_path, "Output PLY file")->required();

  // attn-dump
  int view = 0, stage = -1;
  auto* dump = app.add_subcommand("attn-dump", "Write attention weights of one view as CSV");
  dump->add_option("--model", model_dir)->required()->check(CLI::ExistingDirectory);
  dump->add_option("--scene", scene_dir)->required()->check(CLI::ExistingDirectory);
  dump->add_option("--view", view);
  dump->add_option("--stage", stage, "Attention stage (default: the first)");
  dump->add_option("--out", out_path, "Output CSV")->required();

  // depth-png
  std::string depth_path;
  double scale = 1000.0;
  auto* png = app.add_subcommand("depth-png", "Convert a depth file to a 16-bit PNG preview");
  png->add_option("--in", depth_path)->required()->check(CLI::ExistingFile);
  png->add_option("--scale", scale, "PNG units per scene unit (default: millimetres)");
  png->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "epimvs: usage: " << OneLine(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) {
      const SyntheticScene scene = GenerateScene(scene_opts);
      WriteScene(out_path, scene);
      std::printf("wrote %d views to %s\n", scene.views(), out_path.c_str());
    } else if (*train) {
      TrainingConfig config = LoadTrainingConfig(config_path);
      if (seed_given) config.seed = train_seed;
      const Dataset data = LoadScenes(scenes, perturbation_files);
      DepthNetwork network(config.network, config.seed);
      const TrainResult result = Train(network, data, config, out_path);
      const EpochLog& last = result.log.back();
      std::printf("trained %lld steps, final loss %.6f, train AbsRel %.5f\n",
                  static_cast<long long>(result.steps), last.mean_loss, last.abs_rel);
    } else if (*eval) {
      const DepthNetwork network = LoadNetwork(model_dir);
      const Dataset data = LoadScenes(scenes);
      const MetricsReport report = EvaluateDataset(network, data, scale_aligned);
      PrintTable(report);
      if (!csv_path.empty()) WriteCsv(csv_path, report);
      if (!predictions_dir.empty()) {
        if (scenes.size() != 1) throw UsageError("--predictions needs exactly one --scene");
        fs::create_directories(predictions_dir);
        for (const auto& s : data) {
          WriteDepth(fs::path(predictions_dir) / DepthFileName(s.view), Predict(network, s));
        }
      }
    } else if (*perturb) {
      const SyntheticScene scene = LoadScene(scene_dir);
      const auto records = PerturbScene(scene, perturb_opts, perturb_seed);
      WritePerturbations(out_path, records);
      int accepted = 0;
      for (const auto& r : records) accepted += r.accepted;
      std::printf("perturbed %d of %zu pose pairs\n", accepted, records.size());
    } else if (*fuse) {
      const SyntheticScene scene = LoadScene(scene_dir);
      std::vector<DepthMap> depths = scene.depths;
      if (!depth_dir.empty()) {
        for (int v = 0; v < scene.views(); ++v) {
          depths[v] = ReadDepth(fs::path(depth_dir) / DepthFileName(v));
        }
      }
      if (tau >= 0.0) {
        for (auto& d : depths) d = FilterByConfidence(d, tau);
      }
      const FusedPointCloud cloud = Fuse(depths, scene.poses, scene.intrinsics, fusion_opts);
      WritePly(out_path, cloud);
      std::printf("fused %zu points\n", cloud.size());
    } else if (*dump) {
      const DepthNetwork network = LoadNetwork(model_dir);
      const SyntheticScene scene = LoadScene(scene_dir);
      if (view < 0 || view >= scene.views()) throw UsageError("--view out of range");
      const Dataset data = MakeDataset(scene);
      const TrainingSample& s = data[view];
      ForwardTrace trace;
      network.Forward(s.image, s.references, s.intrinsics, s.poses, &trace);
      if (trace.attention.empty()) throw UsageError("the network has no attention layers");
      if (stage < 0) stage = trace.attention.begin()->first;
      const auto it = trace.attention.find(stage);
      if (it == trace.attention.end()) throw UsageError("no attention at stage " + std::to_string(stage));
      const Variable& w = it->second.weights;
      const int pixels = w.dim(0), views = w.dim(1), hyps = w.dim(2);
      std::ofstream out(out_path);
      if (!out) throw FormatError("cannot write " + out_path);
      out << "pixel,view,hypothesis,weight\n";
      out.precision(17);
      const auto data_w = w.data();
      for (int p = 0; p < pixels; ++p) {
        for (int i = 0; i < views; ++i) {
          for (int k = 0; k < hyps; ++k) {
            out << p << ',' << scene.references[view][i] << ',' << k << ','
                << data_w[(static_cast<std::size_t>(p) * views + i) * hyps + k]
                << '\n';
          }
        }
      }
      std::printf("wrote %d x %d x %d weights (stage %d)\n", pixels, views, hyps, stage);
    } else if (*png) {
      const DepthMap d = ReadDepth(depth_path);
      std::vector<std::uint16_t> px(d.size());
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double v = std::round(d.depth[i] * scale);
        px[i] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
      }
      WritePng16(out_path, px, d.height, d.width);
    }
  } catch (const UsageError& e) {
    std::cerr << "epimvs: usage: " << OneLine(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "epimvs: error: " << OneLine(e.what()) << "\n";
    return 1;
  }
  return 0;
}
