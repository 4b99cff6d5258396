#include "epimvs/scenekit.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Geometry>

#include "epimvs/errors.hpp"
#include "epimvs/random.hpp"
#include "binary_io.hpp"

namespace epimvs {
namespace {

using detail::ReadDoubles;
using detail::ReadLE;
using detail::WriteDoubles;
using detail::WriteLE;

constexpr char kImageTag[] = "epimvs-image v1";
constexpr char kSceneTag[] = "# epimvs-scene v1";
constexpr char kDepthMagic[8] = {'E', 'P', 'D', 'E', 'P', 'T', 'H', '\0'};
constexpr char kDepthConfMagic[8] = {'E', 'P', 'D', 'E', 'P', 'T', 'H', 'C'};

std::uint64_t SplitMix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double LatticeValue(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t seed) {
  std::uint64_t h = SplitMix(seed);
  h = SplitMix(h ^ static_cast<std::uint64_t>(x));
  h = SplitMix(h ^ static_cast<std::uint64_t>(y));
  h = SplitMix(h ^ static_cast<std::uint64_t>(z));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double ValueNoise(const Vec3& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
             iz = static_cast<std::int64_t>(fz);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double u = smooth(p.x() - fx), v = smooth(p.y() - fy), w = smooth(p.z() - fz);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    for (int dy = 0; dy < 2; ++dy) {
      for (int dx = 0; dx < 2; ++dx) {
        const double weight = (dx ? u : 1.0 - u) * (dy ? v : 1.0 - v) * (dz ? w : 1.0 - w);
        acc += weight * LatticeValue(ix + dx, iy + dy, iz + dz, seed);
      }
    }
  }
  return acc;
}

Vec3 SurfaceNormal(const Primitive& prim, const Vec3& point) {
  if (prim.kind == PrimitiveKind::kPlane) return prim.normal;
  return (point - prim.center) / prim.radius;
}

RelativePose LookAt(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = Vec3::UnitY().cross(z).normalized();
  const Vec3 y = z.cross(x);
  RelativePose pose;
  pose.rotation.row(0) = x.transpose();
  pose.rotation.row(1) = y.transpose();
  pose.rotation.row(2) = z.transpose();
  pose.translation = -pose.rotation * eye;
  return pose;
}

std::ifstream OpenIn(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

std::ofstream OpenOut(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

SyntheticScene TryGenerate(const SceneOptions& o, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double span = o.depth_max - o.depth_min;

  SyntheticScene scene;
  scene.options = o;
  scene.intrinsics = DefaultIntrinsics(o.height, o.width);

  const double target_depth = o.depth_min + uniform(0.45, 0.55) * span;
  const Vec3 target(uniform(-0.1, 0.1), uniform(-0.1, 0.1), target_depth);

  // Back wall facing the ring, a floor below it and a few spheres in front.
  const Vec3 wall_normal = Vec3(uniform(-0.15, 0.15), uniform(-0.1, 0.1), 1.0).normalized();
  const double wall_distance = o.depth_min + uniform(0.72, 0.8) * span;
  scene.primitives.push_back(
      Primitive::Plane(wall_normal, wall_distance, rng(), o.texture_scale * uniform(0.12, 0.22)));
  scene.primitives.push_back(
      Primitive::Plane(Vec3::UnitY(), uniform(0.9, 1.2), rng(), o.texture_scale * uniform(0.12, 0.22)));
  const double tan_x = 0.5 * o.width / scene.intrinsics.fx();
  const double tan_y = 0.5 * o.height / scene.intrinsics.fy();
  for (int s = 0; s < o.spheres; ++s) {
    const double z = o.depth_min + uniform(0.25, 0.6) * span;
    const double radius = uniform(0.2, 0.45);
    const Vec3 center(uniform(-0.7, 0.7) * z * tan_x, uniform(-0.6, 0.5) * z * tan_y, z);
    scene.primitives.push_back(Primitive::Sphere(center, radius, rng(), o.texture_scale * uniform(0.08, 0.16)));
  }

  const double step = o.view_spacing_deg * std::numbers::pi / 180.0;
  const double radius = target.z();
  for (int v = 0; v < o.views; ++v) {
    const double phi = (v - 0.5 * (o.views - 1)) * step;
    const Vec3 eye = target + radius * Vec3(std::sin(phi), 0.0, -std::cos(phi)) +
                     Vec3(0.0, uniform(-0.05, 0.05), 0.0);
    scene.poses.push_back(LookAt(eye, target));
  }

  for (int v = 0; v < o.views; ++v) {
    scene.depths.push_back(RenderDepth(scene.primitives, scene.poses[v], scene.intrinsics,
                                       o.height, o.width, o.depth_min, o.depth_max));
    scene.images.push_back(RenderImage(scene.primitives, scene.poses[v], scene.intrinsics,
                                       o.height, o.width, o.channels));
    scene.references.push_back(RingReferences(o.views, v, o.references));
  }
  return scene;
}

bool Acceptable(const SyntheticScene& scene) {
  const auto& o = scene.options;
  for (int v = 0; v < scene.views(); ++v) {
    const auto& depth = scene.depths[v].depth;
    const auto valid = std::count_if(depth.begin(), depth.end(), [](double d) { return d > 0; });
    if (static_cast<double>(valid) < o.min_valid_fraction * depth.size()) return false;
    for (int r : scene.references[v]) {
      const RelativePose rel = RelativeBetween(scene.poses[v], scene.poses[r]);
      if (OverlapFraction(scene.depths[v], rel, scene.intrinsics) < o.min_overlap) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<std::uint8_t> DepthMap::ValidMask() const {
  std::vector<std::uint8_t> mask(depth.size());
  for (std::size_t i = 0; i < depth.size(); ++i) mask[i] = depth[i] > 0.0 ? 1 : 0;
  return mask;
}

Primitive Primitive::Plane(const Vec3& normal, double offset, std::uint64_t seed, double scale) {
  Primitive p;
  p.kind = PrimitiveKind::kPlane;
  const double norm = normal.norm();
  if (!(norm > 0.0)) throw ArgumentError("plane normal must be nonzero");
  p.normal = normal / norm;
  p.offset = offset / norm;
  p.texture_seed = seed;
  p.texture_scale = scale;
  return p;
}

Primitive Primitive::Sphere(const Vec3& center, double radius, std::uint64_t seed, double scale) {
  if (!(radius > 0.0)) throw ArgumentError("sphere radius must be positive");
  Primitive p;
  p.kind = PrimitiveKind::kSphere;
  p.center = center;
  p.radius = radius;
  p.texture_seed = seed;
  p.texture_scale = scale;
  return p;
}

std::optional<RayHit> IntersectRay(const std::vector<Primitive>& primitives, const Vec3& origin,
                                   const Vec3& direction) {
  constexpr double kMinT = 1e-9;
  std::optional<RayHit> best;
  auto offer = [&](double t, int index) {
    if (t > kMinT && (!best || t < best->t)) best = RayHit{t, index};
  };
  for (int i = 0; i < static_cast<int>(primitives.size()); ++i) {
    const Primitive& p = primitives[i];
    if (p.kind == PrimitiveKind::kPlane) {
      const double denom = p.normal.dot(direction);
      if (std::abs(denom) < 1e-15) continue;
      offer((p.offset - p.normal.dot(origin)) / denom, i);
    } else {
      const Vec3 oc = origin - p.center;
      const double a = direction.squaredNorm();
      const double half_b = oc.dot(direction);
      const double c = oc.squaredNorm() - p.radius * p.radius;
      const double disc = half_b * half_b - a * c;
      if (disc < 0.0) continue;
      const double root = std::sqrt(disc);
      // Numerically stable pair of roots.
      const double q = -(half_b + std::copysign(root, half_b));
      if (q == 0.0) continue;
      offer(q / a, i);
      offer(c / q, i);
    }
  }
  return best;
}

double SolidTexture(const Vec3& point, std::uint64_t seed, double scale) {
  double acc = 0.0, amplitude = 1.0, total = 0.0, frequency = 1.0 / scale;
  for (int octave = 0; octave < 3; ++octave) {
    acc += amplitude * ValueNoise(point * frequency, seed + octave);
    total += amplitude;
    amplitude *= 0.5;
    frequency *= 2.0;
  }
  return acc / total;
}

void SceneOptions::Validate() const {
  if (views < 2) throw ArgumentError("scene needs at least 2 views");
  if (height <= 0 || width <= 0 || channels <= 0) throw ArgumentError("bad image size");
  if (!(depth_min > 0.0) || !(depth_max > depth_min) || !std::isfinite(depth_max)) {
    throw ArgumentError("depth range must satisfy 0 < min < max < inf");
  }
  if (references < 1 || references >= views) {
    throw ArgumentError("references must lie in [1, views-1]");
  }
  if (spheres < 0 || max_attempts < 1) throw ArgumentError("bad scene options");
}

CameraIntrinsics DefaultIntrinsics(int height, int width) {
  const double f = 60.0 * width / 64.0;
  return CameraIntrinsics::FromFocal(f, f, 0.5 * (width - 1), 0.5 * (height - 1));
}

std::vector<int> RingReferences(int views, int view, int count) {
  if (view < 0 || view >= views || count < 0 || count >= views) {
    throw ArgumentError("ring references out of range");
  }
  std::vector<int> others;
  for (int v = 0; v < views; ++v) {
    if (v != view) others.push_back(v);
  }
  std::stable_sort(others.begin(), others.end(), [view](int a, int b) {
    return std::abs(a - view) < std::abs(b - view);
  });
  others.resize(count);
  return others;
}

DepthMap RenderDepth(const std::vector<Primitive>& primitives, const RelativePose& world_to_camera,
                     const CameraIntrinsics& intrinsics, int height, int width,
                     double depth_min, double depth_max) {
  DepthMap out(height, width);
  const Mat3 rt = world_to_camera.rotation.transpose();
  const Vec3 eye = -rt * world_to_camera.translation;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Vec3 ray_cam = intrinsics.inverse() * Vec3(x, y, 1.0);
      const auto hit = IntersectRay(primitives, eye, rt * ray_cam);
      if (!hit) continue;
      // The camera-frame ray has unit z, so t is the depth along the axis.
      const double depth = hit->t * ray_cam.z();
      if (depth >= depth_min && depth <= depth_max) out.at(y, x) = depth;
    }
  }
  return out;
}

Image RenderImage(const std::vector<Primitive>& primitives, const RelativePose& world_to_camera,
                  const CameraIntrinsics& intrinsics, int height, int width, int channels) {
  Image out(height, width, channels);
  const Mat3 rt = world_to_camera.rotation.transpose();
  const Vec3 eye = -rt * world_to_camera.translation;
  const Vec3 light = Vec3(0.3, -0.6, -0.75).normalized();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Vec3 dir = rt * (intrinsics.inverse() * Vec3(x, y, 1.0));
      const auto hit = IntersectRay(primitives, eye, dir);
      if (!hit) continue;
      const Primitive& prim = primitives[hit->primitive];
      const Vec3 point = eye + hit->t * dir;
      const double shade = 0.7 + 0.3 * std::abs(SurfaceNormal(prim, point).dot(light));
      for (int c = 0; c < channels; ++c) {
        const double tex = SolidTexture(point, prim.texture_seed + 7919 * c, prim.texture_scale);
        out.at(c, y, x) = 0.1 + 0.8 * tex * shade;
      }
    }
  }
  return out;
}

double OverlapFraction(const DepthMap& source_depth, const RelativePose& source_to_reference,
                       const CameraIntrinsics& intrinsics) {
  if (source_depth.size() == 0) return 0.0;
  std::size_t inside = 0;
  for (int y = 0; y < source_depth.height; ++y) {
    for (int x = 0; x < source_depth.width; ++x) {
      const double d = source_depth.at(y, x);
      if (!(d > 0.0)) continue;
      const auto proj =
          ProjectToReference(Unproject(Vec2(x, y), d, intrinsics), source_to_reference, intrinsics);
      if (proj.finite && proj.depth_in_ref > 0.0 &&
          SampleInside(proj, source_depth.height, source_depth.width)) {
        ++inside;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(source_depth.size());
}

SyntheticScene GenerateScene(const SceneOptions& options) {
  options.Validate();
  for (int attempt = 0; attempt < options.max_attempts; ++attempt) {
    Rng rng(SplitMix(options.seed) + 0x632be59bd9b4e019ULL * attempt);
    SyntheticScene scene = TryGenerate(options, rng);
    if (Acceptable(scene)) return scene;
  }
  throw GenerationError("no scene satisfied overlap/coverage after " +
                        std::to_string(options.max_attempts) + " attempts (seed " +
                        std::to_string(options.seed) + ")");
}

std::string ViewFileName(int view) {
  std::ostringstream os;
  os << "view_" << std::setw(3) << std::setfill('0') << view << ".img";
  return os.str();
}

std::string DepthFileName(int view) {
  std::ostringstream os;
  os << "depth_" << std::setw(3) << std::setfill('0') << view << ".bin";
  return os.str();
}

void WriteScene(const std::filesystem::path& dir, const SyntheticScene& scene) {
  std::filesystem::create_directories(dir);
  WriteIntrinsics(dir / "intrinsics.txt", scene.intrinsics);
  WritePoses(dir / "poses.txt", scene.poses);
  const auto& o = scene.options;
  auto out = OpenOut(dir / "scene.txt");
  out << std::setprecision(17);
  out << kSceneTag << '\n';
  out << "seed " << o.seed << '\n';
  out << "size " << o.height << ' ' << o.width << ' ' << o.channels << '\n';
  out << "depth_range " << o.depth_min << ' ' << o.depth_max << '\n';
  out << "view_spacing_deg " << o.view_spacing_deg << '\n';
  out << "views " << scene.views() << '\n';
  for (int v = 0; v < scene.views(); ++v) {
    out << "references " << v;
    for (int r : scene.references[v]) out << ' ' << r;
    out << '\n';
  }
  for (const auto& p : scene.primitives) {
    if (p.kind == PrimitiveKind::kPlane) {
      out << "plane " << p.normal.x() << ' ' << p.normal.y() << ' ' << p.normal.z() << ' '
          << p.offset;
    } else {
      out << "sphere " << p.center.x() << ' ' << p.center.y() << ' ' << p.center.z() << ' '
          << p.radius;
    }
    out << ' ' << p.texture_seed << ' ' << p.texture_scale << '\n';
  }
  if (!out) throw FormatError("failed writing scene.txt");
  for (int v = 0; v < scene.views(); ++v) {
    WriteImage(dir / ViewFileName(v), scene.images[v]);
    WriteDepth(dir / DepthFileName(v), scene.depths[v]);
  }
}

SyntheticScene LoadScene(const std::filesystem::path& dir) {
  SyntheticScene scene;
  auto& o = scene.options;
  const auto meta_path = dir / "scene.txt";
  auto in = OpenIn(meta_path);
  std::string line;
  if (!std::getline(in, line) || line != kSceneTag) {
    throw FormatError(meta_path.string() + ": missing format tag");
  }
  int views = -1;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "seed") {
      ls >> o.seed;
    } else if (key == "size") {
      ls >> o.height >> o.width >> o.channels;
    } else if (key == "depth_range") {
      ls >> o.depth_min >> o.depth_max;
    } else if (key == "view_spacing_deg") {
      ls >> o.view_spacing_deg;
    } else if (key == "views") {
      ls >> views;
    } else if (key == "references") {
      int v = 0;
      ls >> v;
      if (v != static_cast<int>(scene.references.size())) {
        throw FormatError(meta_path.string() + ": references out of order");
      }
      std::vector<int> refs;
      for (int r; ls >> r;) refs.push_back(r);
      ls.clear();
      scene.references.push_back(std::move(refs));
    } else if (key == "plane" || key == "sphere") {
      double a, b, c, d, scale;
      std::uint64_t seed;
      ls >> a >> b >> c >> d >> seed >> scale;
      scene.primitives.push_back(key == "plane" ? Primitive::Plane(Vec3(a, b, c), d, seed, scale)
                                                : Primitive::Sphere(Vec3(a, b, c), d, seed, scale));
    } else {
      throw FormatError(meta_path.string() + ": unknown key '" + key + "'");
    }
    if (ls.fail()) throw FormatError(meta_path.string() + ": malformed line '" + line + "'");
  }
  scene.intrinsics = ReadIntrinsics(dir / "intrinsics.txt");
  scene.poses = ReadPoses(dir / "poses.txt");
  if (views < 0) views = static_cast<int>(scene.poses.size());
  if (static_cast<int>(scene.poses.size()) != views) {
    throw FormatError(dir.string() + ": pose count does not match view count");
  }
  o.views = views;
  if (scene.references.empty()) {
    for (int v = 0; v < views; ++v) scene.references.push_back(RingReferences(views, v, 1));
  }
  if (static_cast<int>(scene.references.size()) != views) {
    throw FormatError(meta_path.string() + ": reference list count does not match views");
  }
  o.references = static_cast<int>(scene.references.front().size());
  for (const auto& refs : scene.references) {
    for (int r : refs) {
      if (r < 0 || r >= views) throw FormatError(meta_path.string() + ": reference out of range");
    }
  }
  for (int v = 0; v < views; ++v) {
    scene.images.push_back(ReadImage(dir / ViewFileName(v)));
    if (std::filesystem::exists(dir / DepthFileName(v))) {
      scene.depths.push_back(ReadDepth(dir / DepthFileName(v)));
    } else {
      scene.depths.emplace_back(o.height, o.width);
    }
  }
  if (!scene.images.empty()) {
    o.height = scene.images.front().height;
    o.width = scene.images.front().width;
    o.channels = scene.images.front().channels;
  }
  return scene;
}

void WriteImage(const std::filesystem::path& path, const Image& image) {
  if (image.data.size() != static_cast<std::size_t>(image.height) * image.width * image.channels) {
    throw ArgumentError("image data does not match its size");
  }
  auto out = OpenOut(path, std::ios::binary);
  out << kImageTag << ' ' << image.height << ' ' << image.width << ' ' << image.channels << '\n';
  WriteDoubles(out, image.data);
  if (!out) throw FormatError("failed writing " + path.string());
}

Image ReadImage(const std::filesystem::path& path) {
  auto in = OpenIn(path, std::ios::binary);
  std::string line;
  std::getline(in, line);
  std::istringstream ls(line);
  std::string name, version;
  int h = 0, w = 0, c = 0;
  ls >> name >> version >> h >> w >> c;
  if (!ls || name + " " + version != kImageTag || h <= 0 || w <= 0 || c <= 0) {
    throw FormatError(path.string() + ": bad image header");
  }
  Image image(h, w, c);
  ReadDoubles(in, image.data, path);
  return image;
}

void WriteDepth(const std::filesystem::path& path, const DepthMap& depth) {
  if (depth.depth.size() != static_cast<std::size_t>(depth.height) * depth.width) {
    throw ArgumentError("depth data does not match its size");
  }
  const bool has_conf = !depth.confidence.empty();
  if (has_conf && depth.confidence.size() != depth.depth.size()) {
    throw ArgumentError("confidence plane does not match depth size");
  }
  auto out = OpenOut(path, std::ios::binary);
  out.write(has_conf ? kDepthConfMagic : kDepthMagic, 8);
  WriteLE(out, static_cast<std::uint32_t>(depth.height));
  WriteLE(out, static_cast<std::uint32_t>(depth.width));
  WriteDoubles(out, depth.depth);
  if (has_conf) WriteDoubles(out, depth.confidence);
  if (!out) throw FormatError("failed writing " + path.string());
}

DepthMap ReadDepth(const std::filesystem::path& path) {
  auto in = OpenIn(path, std::ios::binary);
  std::array<char, 8> magic{};
  in.read(magic.data(), 8);
  const bool plain = std::memcmp(magic.data(), kDepthMagic, 8) == 0;
  const bool with_conf = std::memcmp(magic.data(), kDepthConfMagic, 8) == 0;
  if (!in || (!plain && !with_conf)) throw FormatError(path.string() + ": bad depth magic");
  const auto h = ReadLE<std::uint32_t>(in);
  const auto w = ReadLE<std::uint32_t>(in);
  if (!in || h == 0 || w == 0 || h > (1u << 15) || w > (1u << 15)) {
    throw FormatError(path.string() + ": bad depth header");
  }
  DepthMap depth(static_cast<int>(h), static_cast<int>(w));
  ReadDoubles(in, depth.depth, path);
  if (with_conf) {
    depth.confidence.resize(depth.depth.size());
    ReadDoubles(in, depth.confidence, path);
  }
  return depth;
}

}  // namespace epimvs
