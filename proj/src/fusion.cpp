#include "epimvs/fusion.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "epimvs/errors.hpp"

namespace epimvs {

DepthMap FilterByConfidence(const DepthMap& depth, double tau) {
  if (depth.confidence.size() != depth.depth.size()) {
    throw ArgumentError("confidence filtering needs a confidence plane");
  }
  if (std::isnan(tau)) throw ArgumentError("tau must be a number");
  DepthMap out = depth;
  for (std::size_t i = 0; i < out.depth.size(); ++i) {
    if (out.confidence[i] > tau) out.depth[i] = 0.0;
  }
  return out;
}

FusedPointCloud Fuse(const std::vector<DepthMap>& depths,
                     const std::vector<RelativePose>& world_to_camera,
                     const CameraIntrinsics& intrinsics, const FusionOptions& options) {
  if (depths.empty()) throw ArgumentError("fusion needs at least one view");
  if (depths.size() != world_to_camera.size()) {
    throw ArgumentError("fusion: depth and pose counts differ");
  }
  if (options.min_views < 1) throw ArgumentError("fusion: min_views must be >= 1");
  const int views = static_cast<int>(depths.size());
  std::vector<RelativePose> camera_to_world;
  for (const auto& pose : world_to_camera) camera_to_world.push_back(pose.Inverse());

  FusedPointCloud cloud;
  for (int s = 0; s < views; ++s) {
    const DepthMap& src = depths[s];
    for (int y = 0; y < src.height; ++y) {
      for (int x = 0; x < src.width; ++x) {
        const double d = src.at(y, x);
        if (!(d > 0.0) || !std::isfinite(d)) continue;
        const Vec3 world = camera_to_world[s].Apply(Unproject(Vec2(x, y), d, intrinsics));
        Vec3 sum = world;
        int support = 1;
        for (int j = 0; j < views; ++j) {
          if (j == s) continue;
          const DepthMap& other = depths[j];
          const Vec3 pj = world_to_camera[j].Apply(world);
          if (!(pj.z() > 0.0)) continue;
          const Vec3 h = intrinsics.matrix() * pj;
          const Vec2 at(h.x() / h.z(), h.y() / h.z());
          // Round trip through view j from a pixel position with depth dj.
          auto agrees = [&](const Vec2& q, double dj, Vec3& world_j) {
            if (!(dj > 0.0) || !std::isfinite(dj)) return false;
            world_j = camera_to_world[j].Apply(Unproject(q, dj, intrinsics));
            const Vec3 back = world_to_camera[s].Apply(world_j);
            if (!(back.z() > 0.0)) return false;
            const Vec3 hb = intrinsics.matrix() * back;
            const Vec2 pixel_back(hb.x() / hb.z(), hb.y() / hb.z());
            return (pixel_back - Vec2(x, y)).norm() < options.consistency_px &&
                   std::abs(back.z() - d) / d < options.relative_depth;
          };
          Vec3 world_j;
          // Inverse depth is bilinear in the pixel coordinates across a
          // plane, so interpolating it is exact on flat patches. The nearest
          // pixel is the fallback at silhouettes, where interpolation mixes
          // surfaces.
          bool ok = false;
          const double fx = std::floor(at.x()), fy = std::floor(at.y());
          if (fx >= 0 && fy >= 0 && fx + 1 < other.width && fy + 1 < other.height) {
            const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
            const double ax = at.x() - fx, ay = at.y() - fy;
            const double d00 = other.at(y0, x0), d01 = other.at(y0, x0 + 1);
            const double d10 = other.at(y0 + 1, x0), d11 = other.at(y0 + 1, x0 + 1);
            if (d00 > 0.0 && d01 > 0.0 && d10 > 0.0 && d11 > 0.0) {
              const double inv = (1 - ay) * ((1 - ax) / d00 + ax / d01) +
                                 ay * ((1 - ax) / d10 + ax / d11);
              ok = agrees(at, 1.0 / inv, world_j);
            }
          }
          if (!ok) {
            const long qx = std::lround(at.x()), qy = std::lround(at.y());
            if (qx < 0 || qy < 0 || qx >= other.width || qy >= other.height) continue;
            ok = agrees(Vec2(static_cast<double>(qx), static_cast<double>(qy)),
                        other.at(static_cast<int>(qy), static_cast<int>(qx)), world_j);
          }
          if (!ok) continue;
          sum += world_j;
          ++support;
        }
        if (support < options.min_views) continue;
        cloud.points.push_back(sum / support);
        cloud.support.push_back(support);
        cloud.source_view.push_back(s);
        cloud.source_pixel.push_back(y * src.width + x);
      }
    }
  }
  return cloud;
}

void WritePly(const std::filesystem::path& path, const FusedPointCloud& cloud) {
  if (cloud.support.size() != cloud.points.size()) {
    throw ArgumentError("point cloud support count mismatch");
  }
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (f == nullptr) throw FormatError("cannot write " + path.string());
  std::fprintf(f,
               "ply\nformat ascii 1.0\ncomment epimvs fused point cloud\n"
               "element vertex %zu\nproperty double x\nproperty double y\nproperty double z\n"
               "property int support\nend_header\n",
               cloud.points.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vec3& p = cloud.points[i];
    std::fprintf(f, "%.17g %.17g %.17g %d\n", p.x(), p.y(), p.z(), cloud.support[i]);
  }
  const bool failed = std::ferror(f) != 0;
  if (std::fclose(f) != 0 || failed) throw FormatError("failed writing " + path.string());
}

FusedPointCloud ReadPly(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::size_t count = 0;
  bool have_count = false;
  if (!std::getline(in, line) || line != "ply") throw FormatError(path.string() + ": not a PLY file");
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string key, element;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw FormatError(path.string() + ": only ascii PLY is supported");
    } else if (key == "element") {
      ls >> element >> count;
      if (element == "vertex") have_count = true;
    }
  }
  if (!have_count) throw FormatError(path.string() + ": no vertex element");
  FusedPointCloud cloud;
  for (std::size_t i = 0; i < count; ++i) {
    Vec3 p;
    int support = 0;
    if (!(in >> p.x() >> p.y() >> p.z() >> support)) {
      throw FormatError(path.string() + ": truncated vertex list");
    }
    cloud.points.push_back(p);
    cloud.support.push_back(support);
  }
  return cloud;
}

}  // namespace epimvs
