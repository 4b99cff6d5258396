#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace epimvs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics shared by every view of a capture. The inverse is
/// computed once at construction; a singular matrix is rejected.
class CameraIntrinsics {
 public:
  CameraIntrinsics();  // identity
  explicit CameraIntrinsics(const Mat3& matrix);

  static CameraIntrinsics FromFocal(double fx, double fy, double cx, double cy,
                                    double skew = 0.0);

  const Mat3& matrix() const { return matrix_; }
  const Mat3& inverse() const { return inverse_; }

  double fx() const { return matrix_(0, 0); }
  double fy() const { return matrix_(1, 1); }
  double cx() const { return matrix_(0, 2); }
  double cy() const { return matrix_(1, 2); }

  // Intrinsics of a feature map subsampled by `stride` with top-left aligned
  // pixels: lattice pixel u corresponds to image pixel stride * u.
  CameraIntrinsics Downscaled(int stride) const;

 private:
  Mat3 matrix_;
  Mat3 inverse_;
};

/// Rigid transform x' = R x + t.
struct RelativePose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RelativePose Identity() { return {}; }

  Vec3 Apply(const Vec3& point) const { return rotation * point + translation; }
  RelativePose Inverse() const;

  // (a * b) applies b first, then a.
  friend RelativePose operator*(const RelativePose& a, const RelativePose& b);

  // Throws ConfigurationError unless R is orthonormal with det +1 (1e-9).
  void Validate() const;
};

// Relative pose mapping camera `from` coordinates into camera `to`, given
// world-to-camera extrinsics of both.
RelativePose RelativeBetween(const RelativePose& world_to_from,
                             const RelativePose& world_to_to);

Vec3 Unproject(const Vec2& pixel, double depth, const CameraIntrinsics& intrinsics);

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth_in_ref = 0.0;
  // False when the homogeneous depth is within 1e-12 of zero; pixel is then
  // meaningless.
  bool finite = true;
};

Projection ProjectToReference(const Vec3& point_src, const RelativePose& pose,
                              const CameraIntrinsics& intrinsics);

/// Depth hypotheses evenly spaced in inverse depth.
struct DepthHypothesisSet {
  std::vector<double> values;
  double d_min = 0.0;
  double d_max = 0.0;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t k) const { return values[k]; }
};

// values[i] = 1 / ((1 - u_i) / d_min + u_i / d_max) with u_i = i / (k - 1).
// With endpoint_inclusive = false the denominator is k and d_max itself is
// never reached.
DepthHypothesisSet SampleDepthHypotheses(int k, double d_min, double d_max,
                                         bool endpoint_inclusive = true);

struct ImageSize {
  int height = 0;
  int width = 0;
};

/// Epipolar samples for every lattice pixel of a strided source grid, every
/// reference view and every hypothesis. Coordinates and bounds are in the
/// frame of the strided feature map.
class EpipolarSampleGrid {
 public:
  EpipolarSampleGrid() = default;
  EpipolarSampleGrid(int rows, int cols, int views, int hypotheses);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int views() const { return views_; }
  int hypotheses() const { return hypotheses_; }
  int pixels() const { return rows_ * cols_; }
  std::size_t size() const { return valid_.size(); }

  // Flat index of (source lattice pixel, view, hypothesis); pixel = y*cols+x.
  std::size_t Index(int pixel, int view, int k) const {
    return (static_cast<std::size_t>(pixel) * views_ + view) * hypotheses_ + k;
  }

  const Vec2& pixel(std::size_t i) const { return pixels_[i]; }
  double depth_in_ref(std::size_t i) const { return depths_[i]; }
  bool valid(std::size_t i) const { return valid_[i] != 0; }

  const std::vector<unsigned char>& valid_flags() const { return valid_; }
  double InvalidFraction() const;

  void Set(std::size_t i, const Vec2& pixel, double depth, bool valid) {
    pixels_[i] = pixel;
    depths_[i] = depth;
    valid_[i] = valid ? 1 : 0;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  int views_ = 0;
  int hypotheses_ = 0;
  std::vector<Vec2> pixels_;
  std::vector<double> depths_;
  std::vector<unsigned char> valid_;
};

// Inside test of a projected sample: 0 <= x < width, 0 <= y < height,
// depth_in_ref >= 0, on unrounded coordinates.
bool SampleInside(const Projection& projection, int height, int width);

// `image_size` is the full-resolution size; stride must divide both sides.
EpipolarSampleGrid BuildEpipolarGrid(const CameraIntrinsics& intrinsics,
                                     const std::vector<RelativePose>& poses,
                                     const DepthHypothesisSet& hypotheses,
                                     ImageSize image_size, int stride = 4);

// Text files: a version tag line, then `intrinsics` with 9 row-major reals,
// or one `pose` line per view with R (row-major) then t. 17 significant
// digits, so a write/read round trip is lossless.
void WriteIntrinsics(const std::filesystem::path& path,
                     const CameraIntrinsics& intrinsics);
CameraIntrinsics ReadIntrinsics(const std::filesystem::path& path);
void WritePoses(const std::filesystem::path& path,
                const std::vector<RelativePose>& poses);
std::vector<RelativePose> ReadPoses(const std::filesystem::path& path);

}  // namespace epimvs
