#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "epimvs/geometry.hpp"

namespace epimvs {

/// Dense [C,H,W] float64 image.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c = 1, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// Per-pixel depth; 0 marks a pixel without ground truth. An optional
/// confidence channel (sigma) travels with predictions.
struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<double> depth;
  std::vector<double> confidence;

  DepthMap() = default;
  DepthMap(int h, int w, double fill = 0.0)
      : height(h), width(w), depth(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return depth.size(); }
  double at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width + x]; }
  double& at(int y, int x) { return depth[static_cast<std::size_t>(y) * width + x]; }
  std::vector<std::uint8_t> ValidMask() const;
};

enum class PrimitiveKind { kPlane, kSphere };

/// Textured plane (normal . x = offset) or sphere. The texture is solid
/// value noise evaluated at the world-space hit point.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kPlane;
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  std::uint64_t texture_seed = 0;
  double texture_scale = 0.2;  // world units per noise cell

  static Primitive Plane(const Vec3& normal, double offset, std::uint64_t seed, double scale);
  static Primitive Sphere(const Vec3& center, double radius, std::uint64_t seed, double scale);
};

struct RayHit {
  double t = 0.0;  // ray parameter; equals depth for a direction with unit z
  int primitive = -1;
};

// Nearest intersection with t > 1e-9.
std::optional<RayHit> IntersectRay(const std::vector<Primitive>& primitives, const Vec3& origin,
                                   const Vec3& direction);

// Octave value noise in [0, 1].
double SolidTexture(const Vec3& point, std::uint64_t seed, double scale);

struct SceneOptions {
  std::uint64_t seed = 7;
  int views = 3;
  int height = 48;
  int width = 64;
  int channels = 1;
  double depth_min = 1.0;
  double depth_max = 5.0;
  int references = 2;
  double view_spacing_deg = 5.0;  // angle between neighbouring ring cameras
  int spheres = 3;
  double texture_scale = 1.0;  // multiplies the sampled noise cell sizes
  int max_attempts = 25;
  double min_overlap = 0.5;
  double min_valid_fraction = 0.9;

  void Validate() const;
};

/// Scene content plus the per-view renderings and analytic depth.
struct SyntheticScene {
  SceneOptions options;
  CameraIntrinsics intrinsics;
  std::vector<Primitive> primitives;
  std::vector<RelativePose> poses;  // world -> camera
  std::vector<Image> images;
  std::vector<DepthMap> depths;
  std::vector<std::vector<int>> references;  // reference view indices per view

  int views() const { return static_cast<int>(poses.size()); }
};

// fx = fy = 60 * width / 64, principal point at the image centre.
CameraIntrinsics DefaultIntrinsics(int height, int width);

// The `count` views nearest to `view` along the ring, nearest first, ties
// broken towards the lower index.
std::vector<int> RingReferences(int views, int view, int count);

// Camera-centred pinhole rays through each pixel; depth is the camera z of
// the first hit, 0 where the ray misses or leaves [depth_min, depth_max].
DepthMap RenderDepth(const std::vector<Primitive>& primitives, const RelativePose& world_to_camera,
                     const CameraIntrinsics& intrinsics, int height, int width,
                     double depth_min, double depth_max);

Image RenderImage(const std::vector<Primitive>& primitives, const RelativePose& world_to_camera,
                  const CameraIntrinsics& intrinsics, int height, int width, int channels);

// Fraction of source pixels whose ground-truth point lands inside the
// reference image in front of its camera.
double OverlapFraction(const DepthMap& source_depth, const RelativePose& source_to_reference,
                       const CameraIntrinsics& intrinsics);

// Deterministic in options.seed; throws GenerationError when no attempt
// satisfies the overlap and coverage requirements.
SyntheticScene GenerateScene(const SceneOptions& options);

// Scene directory: intrinsics.txt, poses.txt, scene.txt, view_###.img,
// depth_###.bin.
void WriteScene(const std::filesystem::path& dir, const SyntheticScene& scene);
SyntheticScene LoadScene(const std::filesystem::path& dir);

std::string ViewFileName(int view);
std::string DepthFileName(int view);

// "epimvs-image v1 <h> <w> <c>\n" followed by h*w*c little-endian float64.
void WriteImage(const std::filesystem::path& path, const Image& image);
Image ReadImage(const std::filesystem::path& path);

// 16-byte header: magic "EPDEPTH\0" (or "EPDEPTHC" with a confidence plane),
// uint32 height, uint32 width, all little-endian; then the depth plane and
// optionally the confidence plane as float64.
void WriteDepth(const std::filesystem::path& path, const DepthMap& depth);
DepthMap ReadDepth(const std::filesystem::path& path);

}  // namespace epimvs
