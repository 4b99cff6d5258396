#include "epimvs/robustness.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/Dense>

#include "epimvs/errors.hpp"

namespace epimvs {
namespace {

constexpr char kPerturbTag[] = "# epimvs-perturbations v1";

Mat3 Skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

Mat3 ExpSO3(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

// Pixel residuals and their 2x6 Jacobian blocks for the current pose.
double Linearize(std::span<const Vec3> points, std::span<const Vec2> pixels, const Mat3& k,
                 const RelativePose& pose, Eigen::VectorXd& residual, Eigen::MatrixXd& jacobian) {
  const int n = static_cast<int>(points.size());
  residual.resize(2 * n);
  jacobian.resize(2 * n, 6);
  for (int i = 0; i < n; ++i) {
    const Vec3 rx = pose.rotation * points[i];
    const Vec3 h = k * (rx + pose.translation);
    if (!(std::abs(h.z()) > 1e-12)) throw SolverError("pnp: point projects to infinity");
    const double u = h.x() / h.z(), v = h.y() / h.z();
    residual(2 * i) = u - pixels[i].x();
    residual(2 * i + 1) = v - pixels[i].y();
    Eigen::Matrix<double, 2, 3> dproj;
    dproj.row(0) = (k.row(0) - u * k.row(2)) / h.z();
    dproj.row(1) = (k.row(1) - v * k.row(2)) / h.z();
    jacobian.block<2, 3>(2 * i, 0) = dproj * (-Skew(rx));
    jacobian.block<2, 3>(2 * i, 3) = dproj;
  }
  return residual.squaredNorm();
}

RelativePose LinearPose(std::span<const Vec3> points, std::span<const Vec2> pixels,
                        const CameraIntrinsics& intrinsics) {
  const int n = static_cast<int>(points.size());
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : points) centroid += p;
  centroid /= n;
  double spread = 0.0;
  for (const auto& p : points) spread += (p - centroid).norm();
  spread /= n;
  if (!(spread > 0.0)) throw SolverError("pnp: all points coincide");

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector4d x = ((points[i] - centroid) / spread).homogeneous();
    const Vec3 ray = intrinsics.inverse() * pixels[i].homogeneous();
    const double xn = ray.x() / ray.z(), yn = ray.y() / ray.z();
    a.block<1, 4>(2 * i, 0) = x.transpose();
    a.block<1, 4>(2 * i, 8) = -xn * x.transpose();
    a.block<1, 4>(2 * i + 1, 4) = x.transpose();
    a.block<1, 4>(2 * i + 1, 8) = -yn * x.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv(10) > 1e-9 * sv(0))) throw SolverError("pnp: degenerate point configuration");
  const Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> proj;
  proj << p.segment<4>(0).transpose(), p.segment<4>(4).transpose(), p.segment<4>(8).transpose();

  // Undo the point normalization: P [(X - c)/s; 1] = (P3/s) X + (p4 - P3 c / s).
  Mat3 m = proj.leftCols<3>() / spread;
  Vec3 b = proj.col(3) - m * centroid;
  // The null vector's sign is arbitrary and both signs reproject identically.
  // Pick the one that puts the points in front of the camera; the sign of
  // det(m) is unreliable once noise pulls m away from a scaled rotation.
  int in_front = 0;
  for (const auto& x : points) in_front += (m.row(2).dot(x) + b.z()) > 0.0;
  if (2 * in_front < n) {
    m = -m;
    b = -b;
  }
  Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double scale = msvd.singularValues().mean();
  if (!(scale > 0.0)) throw SolverError("pnp: degenerate linear solution");
  RelativePose pose;
  pose.rotation = NearestRotation(m);
  pose.translation = b / scale;
  return pose;
}

void WritePose(std::ostream& os, const RelativePose& pose) {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << ' ' << pose.rotation(r, c);
  }
  for (int r = 0; r < 3; ++r) os << ' ' << pose.translation(r);
}

RelativePose ReadPose(std::istream& is) {
  RelativePose pose;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) is >> pose.rotation(r, c);
  }
  for (int r = 0; r < 3; ++r) is >> pose.translation(r);
  return pose;
}

}  // namespace

Mat3 NearestRotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

RelativePose SolvePnp(std::span<const Vec3> points, std::span<const Vec2> pixels,
                      const CameraIntrinsics& intrinsics, const PnpOptions& options) {
  if (points.size() != pixels.size()) throw ArgumentError("pnp: points and pixels differ in count");
  if (points.size() < 6) throw ArgumentError("pnp: need at least 6 correspondences");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite() || !pixels[i].allFinite()) {
      throw ArgumentError("pnp: non-finite correspondence");
    }
  }
  RelativePose pose = LinearPose(points, pixels, intrinsics);

  Eigen::VectorXd residual;
  Eigen::MatrixXd jacobian;
  for (int it = 0; it < options.max_iterations; ++it) {
    Linearize(points, pixels, intrinsics.matrix(), pose, residual, jacobian);
    const Eigen::Matrix<double, 6, 6> normal = jacobian.transpose() * jacobian;
    const Eigen::Matrix<double, 6, 1> step =
        normal.ldlt().solve(-jacobian.transpose() * residual);
    if (!step.allFinite()) throw SolverError("pnp: refinement produced a non-finite step");
    pose.rotation = ExpSO3(step.head<3>()) * pose.rotation;
    pose.translation += step.tail<3>();
    if (step.norm() < options.step_tolerance) break;
  }
  pose.rotation = NearestRotation(pose.rotation);
  // Pixels cannot tell a pose from its mirror with every point behind the
  // camera, so refinement may land there.
  for (const auto& x : points) {
    if (!(pose.Apply(x).z() > 0.0)) throw SolverError("pnp: solution puts points behind the camera");
  }
  return pose;
}

double RotationAngle(const Mat3& a, const Mat3& b) {
  const Mat3 m = a * b.transpose();
  const Vec3 axis(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  // atan2 stays accurate near 0 and pi where acos of the trace loses digits.
  return std::atan2(0.5 * axis.norm(), 0.5 * (m.trace() - 1.0));
}

double TranslationDistance(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

double MeanReprojectionOffset(const RelativePose& a, const RelativePose& b,
                              const DepthMap& source_depth, const CameraIntrinsics& intrinsics,
                              int stride) {
  if (stride < 1) throw ArgumentError("lattice stride must be positive");
  double total = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < source_depth.height; y += stride) {
    for (int x = 0; x < source_depth.width; x += stride) {
      const double d = source_depth.at(y, x);
      if (!(d > 0.0)) continue;
      const Vec3 p = Unproject(Vec2(x, y), d, intrinsics);
      const auto pa = ProjectToReference(p, a, intrinsics);
      const auto pb = ProjectToReference(p, b, intrinsics);
      if (!pa.finite || !pb.finite) continue;
      total += (pa.pixel - pb.pixel).norm();
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("source depth has no labelled lattice pixels");
  return total / static_cast<double>(count);
}

PerturbationRecord PerturbPose(const RelativePose& gt_pose, const DepthMap& source_depth,
                               const CameraIntrinsics& intrinsics, const PerturbOptions& options,
                               Rng& rng) {
  if (options.points < 6) throw ArgumentError("perturbation needs at least 6 points");
  if (!(options.noise_max_px >= 0.0)) throw ArgumentError("noise must be non-negative");
  std::vector<int> labelled;
  for (int i = 0; i < static_cast<int>(source_depth.size()); ++i) {
    if (source_depth.depth[i] > 0.0) labelled.push_back(i);
  }
  if (static_cast<int>(labelled.size()) < options.points) {
    throw ArgumentError("source depth has too few labelled pixels");
  }

  PerturbationRecord rec;
  rec.original = gt_pose;
  rec.perturbed = gt_pose;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(labelled.size()) - 1);
  std::uniform_real_distribution<double> noise(-options.noise_max_px, options.noise_max_px);
  for (int attempt = 0; attempt < options.max_retries; ++attempt) {
    std::vector<Vec3> points;
    std::vector<Vec2> pixels;
    for (int j = 0; j < options.points; ++j) {
      const int idx = labelled[pick(rng)];
      const int y = idx / source_depth.width, x = idx % source_depth.width;
      const Vec3 p = Unproject(Vec2(x, y), source_depth.depth[idx], intrinsics);
      const auto proj = ProjectToReference(p, gt_pose, intrinsics);
      points.push_back(p);
      pixels.push_back(proj.pixel + Vec2(noise(rng), noise(rng)));
    }
    RelativePose solved;
    try {
      solved = SolvePnp(points, pixels, intrinsics);
    } catch (const SolverError&) {
      continue;
    }
    const double offset = MeanReprojectionOffset(gt_pose, solved, source_depth, intrinsics,
                                                 options.lattice_stride);
    rec.mean_offset_px = offset;
    if (offset < options.max_mean_offset_px) {
      rec.perturbed = solved;
      rec.accepted = true;
      rec.delta_rotation = RotationAngle(solved.rotation, gt_pose.rotation);
      rec.delta_translation = TranslationDistance(solved.translation, gt_pose.translation);
    }
    return rec;
  }
  return rec;
}

std::vector<PerturbationRecord> PerturbScene(const SyntheticScene& scene,
                                             const PerturbOptions& options, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PerturbationRecord> out;
  for (int v = 0; v < scene.views(); ++v) {
    for (int r : scene.references[v]) {
      const RelativePose gt = RelativeBetween(scene.poses[v], scene.poses[r]);
      PerturbationRecord rec = PerturbPose(gt, scene.depths[v], scene.intrinsics, options, rng);
      rec.source = v;
      rec.reference = r;
      out.push_back(rec);
    }
  }
  return out;
}

void WritePerturbations(const std::filesystem::path& path,
                        const std::vector<PerturbationRecord>& records) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << std::setprecision(17) << kPerturbTag << '\n';
  for (const auto& r : records) {
    out << "record " << r.source << ' ' << r.reference << ' ' << (r.accepted ? 1 : 0) << ' '
        << r.delta_rotation << ' ' << r.delta_translation << ' ' << r.mean_offset_px;
    WritePose(out, r.original);
    WritePose(out, r.perturbed);
    out << '\n';
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

std::vector<PerturbationRecord> ReadPerturbations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kPerturbTag) {
    throw FormatError(path.string() + ": missing format tag");
  }
  std::vector<PerturbationRecord> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    int accepted = 0;
    PerturbationRecord r;
    ls >> key >> r.source >> r.reference >> accepted >> r.delta_rotation >> r.delta_translation >>
        r.mean_offset_px;
    r.accepted = accepted != 0;
    r.original = ReadPose(ls);
    r.perturbed = ReadPose(ls);
    if (!ls || key != "record") throw FormatError(path.string() + ": malformed line '" + line + "'");
    out.push_back(r);
  }
  return out;
}

}  // namespace epimvs
