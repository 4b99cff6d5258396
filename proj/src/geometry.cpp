#include "epimvs/geometry.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

constexpr double kHomogeneousEps = 1e-12;
constexpr double kRotationTol = 1e-9;
constexpr char kIntrinsicsTag[] = "# epimvs-intrinsics v1";
constexpr char kPosesTag[] = "# epimvs-poses v1";

std::ofstream OpenForWrite(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << std::setprecision(17);
  return out;
}

std::ifstream OpenForRead(const std::filesystem::path& path, const char* tag) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != tag) {
    throw FormatError(path.string() + ": expected tag line '" + tag + "'");
  }
  return in;
}

}  // namespace

CameraIntrinsics::CameraIntrinsics()
    : matrix_(Mat3::Identity()), inverse_(Mat3::Identity()) {}

CameraIntrinsics::CameraIntrinsics(const Mat3& matrix) : matrix_(matrix) {
  const double det = matrix.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-300 || !matrix.allFinite()) {
    throw ConfigurationError("intrinsics matrix is not invertible");
  }
  inverse_ = matrix.inverse();
}

CameraIntrinsics CameraIntrinsics::FromFocal(double fx, double fy, double cx,
                                             double cy, double skew) {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw ConfigurationError("focal lengths must be positive");
  }
  Mat3 k;
  k << fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return CameraIntrinsics(k);
}

CameraIntrinsics CameraIntrinsics::Downscaled(int stride) const {
  if (stride < 1) throw ArgumentError("stride must be positive");
  Mat3 scale = Mat3::Identity();
  scale(0, 0) = 1.0 / stride;
  scale(1, 1) = 1.0 / stride;
  return CameraIntrinsics(scale * matrix_);
}

RelativePose RelativePose::Inverse() const {
  RelativePose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RelativePose operator*(const RelativePose& a, const RelativePose& b) {
  RelativePose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

void RelativePose::Validate() const {
  if (!rotation.allFinite() || !translation.allFinite()) {
    throw ConfigurationError("pose contains non-finite values");
  }
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity())
                           .cwiseAbs()
                           .maxCoeff();
  if (ortho > kRotationTol || std::abs(rotation.determinant() - 1.0) > kRotationTol) {
    throw ConfigurationError("pose rotation is not a proper rotation");
  }
}

RelativePose RelativeBetween(const RelativePose& world_to_from,
                             const RelativePose& world_to_to) {
  return world_to_to * world_to_from.Inverse();
}

Vec3 Unproject(const Vec2& pixel, double depth, const CameraIntrinsics& intrinsics) {
  if (!(depth > 0.0)) throw ArgumentError("unproject: depth must be positive");
  return depth * (intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0));
}

Projection ProjectToReference(const Vec3& point_src, const RelativePose& pose,
                              const CameraIntrinsics& intrinsics) {
  const Vec3 p_ref = pose.Apply(point_src);
  const Vec3 hom = intrinsics.matrix() * p_ref;
  Projection out;
  out.depth_in_ref = p_ref.z();
  if (std::abs(hom.z()) < kHomogeneousEps) {
    out.finite = false;
    out.pixel = Vec2(std::nan(""), std::nan(""));
    return out;
  }
  out.pixel = Vec2(hom.x() / hom.z(), hom.y() / hom.z());
  out.finite = out.pixel.allFinite();
  return out;
}

DepthHypothesisSet SampleDepthHypotheses(int k, double d_min, double d_max,
                                         bool endpoint_inclusive) {
  if (k < 2) throw ArgumentError("need at least two depth hypotheses");
  if (!(d_min > 0.0) || !(d_min < d_max) || !std::isfinite(d_max)) {
    throw ArgumentError("depth range must satisfy 0 < d_min < d_max");
  }
  DepthHypothesisSet set;
  set.d_min = d_min;
  set.d_max = d_max;
  set.values.resize(k);
  const double denom = endpoint_inclusive ? k - 1 : k;
  for (int i = 0; i < k; ++i) {
    const double u = i / denom;
    set.values[i] = 1.0 / ((1.0 - u) / d_min + u / d_max);
  }
  if (endpoint_inclusive) {
    set.values.front() = d_min;
    set.values.back() = d_max;
  }
  return set;
}

EpipolarSampleGrid::EpipolarSampleGrid(int rows, int cols, int views, int hypotheses)
    : rows_(rows), cols_(cols), views_(views), hypotheses_(hypotheses) {
  const std::size_t n = static_cast<std::size_t>(rows) * cols * views * hypotheses;
  pixels_.assign(n, Vec2::Zero());
  depths_.assign(n, 0.0);
  valid_.assign(n, 0);
}

double EpipolarSampleGrid::InvalidFraction() const {
  if (valid_.empty()) return 0.0;
  std::size_t invalid = 0;
  for (unsigned char v : valid_) invalid += v ? 0 : 1;
  return static_cast<double>(invalid) / valid_.size();
}

bool SampleInside(const Projection& projection, int height, int width) {
  if (!projection.finite) return false;
  const double x = projection.pixel.x();
  const double y = projection.pixel.y();
  return x >= 0.0 && x < width && y >= 0.0 && y < height &&
         projection.depth_in_ref >= 0.0;
}

EpipolarSampleGrid BuildEpipolarGrid(const CameraIntrinsics& intrinsics,
                                     const std::vector<RelativePose>& poses,
                                     const DepthHypothesisSet& hypotheses,
                                     ImageSize image_size, int stride) {
  if (poses.empty()) throw ArgumentError("epipolar grid needs at least one reference pose");
  if (stride < 1 || image_size.height % stride != 0 || image_size.width % stride != 0) {
    throw ArgumentError("stride must divide the image size");
  }
  if (hypotheses.size() == 0) throw ArgumentError("empty hypothesis set");

  const int rows = image_size.height / stride;
  const int cols = image_size.width / stride;
  const int views = static_cast<int>(poses.size());
  const int k_count = static_cast<int>(hypotheses.size());
  const CameraIntrinsics lattice = intrinsics.Downscaled(stride);

  EpipolarSampleGrid grid(rows, cols, views, k_count);
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      const int p = y * cols + x;
      const Vec3 ray = lattice.inverse() * Vec3(x, y, 1.0);
      for (int i = 0; i < views; ++i) {
        for (int k = 0; k < k_count; ++k) {
          const Vec3 point = hypotheses[k] * ray;
          const Projection proj = ProjectToReference(point, poses[i], lattice);
          grid.Set(grid.Index(p, i, k), proj.pixel, proj.depth_in_ref,
                   SampleInside(proj, rows, cols));
        }
      }
    }
  }
  return grid;
}

void WriteIntrinsics(const std::filesystem::path& path,
                     const CameraIntrinsics& intrinsics) {
  auto out = OpenForWrite(path);
  out << kIntrinsicsTag << "\nintrinsics";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out << ' ' << intrinsics.matrix()(r, c);
  }
  out << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

CameraIntrinsics ReadIntrinsics(const std::filesystem::path& path) {
  auto in = OpenForRead(path, kIntrinsicsTag);
  std::string key;
  Mat3 k;
  if (!(in >> key) || key != "intrinsics") {
    throw FormatError(path.string() + ": missing 'intrinsics' record");
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (!(in >> k(r, c))) throw FormatError(path.string() + ": expected 9 reals");
    }
  }
  return CameraIntrinsics(k);
}

void WritePoses(const std::filesystem::path& path,
                const std::vector<RelativePose>& poses) {
  auto out = OpenForWrite(path);
  out << kPosesTag << '\n';
  for (const auto& pose : poses) {
    out << "pose";
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << ' ' << pose.rotation(r, c);
    }
    for (int r = 0; r < 3; ++r) out << ' ' << pose.translation(r);
    out << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<RelativePose> ReadPoses(const std::filesystem::path& path) {
  auto in = OpenForRead(path, kPosesTag);
  std::vector<RelativePose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key != "pose") throw FormatError(path.string() + ": unexpected record '" + key + "'");
    RelativePose pose;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        if (!(fields >> pose.rotation(r, c))) throw FormatError(path.string() + ": short pose");
      }
    }
    for (int r = 0; r < 3; ++r) {
      if (!(fields >> pose.translation(r))) throw FormatError(path.string() + ": short pose");
    }
    poses.push_back(pose);
  }
  return poses;
}

}  // namespace epimvs
