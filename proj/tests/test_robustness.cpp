#include <cmath>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "epimvs/errors.hpp"
#include "epimvs/robustness.hpp"
#include "oracles.hpp"

using namespace epimvs;
namespace fs = std::filesystem;

namespace {

const CameraIntrinsics kIntrinsics = CameraIntrinsics::FromFocal(60.0, 60.0, 32.0, 24.0);

// Random points in front of the camera (in its own frame), expressed in the
// object frame through the inverse pose.
std::vector<Vec3> PointsInView(const RelativePose& pose, int n, Rng& rng) {
  std::uniform_real_distribution<double> x(-1.0, 1.0), z(2.0, 5.0);
  std::vector<Vec3> out;
  for (int i = 0; i < n; ++i) {
    const Vec3 cam(x(rng) * 1.5, x(rng), z(rng));
    out.push_back(pose.rotation.transpose() * (cam - pose.translation));
  }
  return out;
}

std::vector<Vec2> Project(const RelativePose& pose, const std::vector<Vec3>& points) {
  std::vector<Vec2> out;
  for (const auto& p : points) {
    const Vec3 c = kIntrinsics.matrix() * (pose.rotation * p + pose.translation);
    out.emplace_back(c.x() / c.z(), c.y() / c.z());
  }
  return out;
}

double AngleOf(const Mat3& r) {
  return std::acos(std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0));
}

}  // namespace

TEST_CASE("noise-free PnP recovers the generating pose") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const RelativePose pose = oracle::RandomPose(rng, 0.5, 0.5);
    const auto points = PointsInView(pose, 6 + trial % 10, rng);
    const RelativePose solved = SolvePnp(points, Project(pose, points), kIntrinsics);
    CHECK(RotationAngle(solved.rotation, pose.rotation) < 1e-9);
    CHECK(TranslationDistance(solved.translation, pose.translation) < 1e-9);
  }
}

TEST_CASE("degenerate PnP inputs") {
  Rng rng(2);
  const RelativePose pose = oracle::RandomPose(rng, 0.2, 0.2);
  auto points = PointsInView(pose, 5, rng);
  CHECK_THROWS_AS(SolvePnp(points, Project(pose, points), kIntrinsics), ArgumentError);

  // Collinear points leave the linear system rank-deficient.
  std::vector<Vec3> line;
  for (int i = 0; i < 8; ++i) line.emplace_back(0.1 * i, 0.05 * i, 3.0 + 0.2 * i);
  CHECK_THROWS_AS(SolvePnp(line, Project(RelativePose{}, line), kIntrinsics), SolverError);

  points = PointsInView(pose, 8, rng);
  const auto pixels = Project(pose, points);
  CHECK_THROWS_AS(SolvePnp(points, std::span(pixels).first(7), kIntrinsics), ArgumentError);
}

TEST_CASE("rotation helpers") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const RelativePose a = oracle::RandomPose(rng, 3.0, 0.0);
    const RelativePose b = oracle::RandomPose(rng, 3.0, 0.0);
    CHECK(std::abs(RotationAngle(a.rotation, b.rotation) -
                   AngleOf(a.rotation.transpose() * b.rotation)) < 1e-7);
    CHECK(RotationAngle(a.rotation, a.rotation) < 1e-7);

    Mat3 noisy = a.rotation;
    noisy(0, 1) += 0.01;
    const Mat3 r = NearestRotation(noisy);
    CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-12);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-12);
    CHECK((NearestRotation(a.rotation) - a.rotation).norm() < 1e-12);
  }
  // A reflection maps to a proper rotation.
  const Mat3 flip = Vec3(1.0, 1.0, -1.0).asDiagonal();
  CHECK(NearestRotation(flip).determinant() > 0.0);
  CHECK(TranslationDistance(Vec3(1, 2, 3), Vec3(1, 2, 5)) == 2.0);
}

TEST_CASE("zero pixel noise leaves the pose unchanged") {
  SceneOptions so;
  so.height = 24;
  so.width = 32;
  so.seed = 4;
  const SyntheticScene scene = GenerateScene(so);
  const RelativePose gt = RelativeBetween(scene.poses[0], scene.poses[1]);
  PerturbOptions opts;
  opts.noise_max_px = 0.0;
  Rng rng(5);
  const PerturbationRecord rec = PerturbPose(gt, scene.depths[0], scene.intrinsics, opts, rng);
  CHECK(rec.accepted);
  CHECK(rec.delta_rotation < 1e-6);
  CHECK(rec.delta_translation < 1e-6);
  CHECK(rec.mean_offset_px < 1e-6);
  CHECK(MeanReprojectionOffset(gt, gt, scene.depths[0], scene.intrinsics) == 0.0);
}

TEST_CASE("perturbed scene poses respect the offset bound and are reproducible") {
  SceneOptions so;
  so.height = 24;
  so.width = 32;
  so.seed = 6;
  so.views = 4;
  const SyntheticScene scene = GenerateScene(so);
  const PerturbOptions opts;
  const auto records = PerturbScene(scene, opts, 7);
  std::size_t pairs = 0;
  for (const auto& refs : scene.references) pairs += refs.size();
  REQUIRE(records.size() == pairs);
  int accepted = 0;
  for (const auto& r : records) {
    const RelativePose gt = RelativeBetween(scene.poses[r.source], scene.poses[r.reference]);
    CHECK(TranslationDistance(r.original.translation, gt.translation) < 1e-12);
    if (!r.accepted) continue;
    ++accepted;
    CHECK(r.mean_offset_px < opts.max_mean_offset_px);
    CHECK(std::abs(r.mean_offset_px - MeanReprojectionOffset(r.original, r.perturbed,
                                                             scene.depths[r.source],
                                                             scene.intrinsics)) < 1e-9);
    CHECK(std::abs(r.delta_rotation - RotationAngle(r.original.rotation, r.perturbed.rotation)) <
          1e-12);
    CHECK(r.delta_rotation > 0.0);
  }
  CHECK(accepted > 0);

  const auto again = PerturbScene(scene, opts, 7);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(again[i].perturbed.rotation == records[i].perturbed.rotation);
    CHECK(again[i].perturbed.translation == records[i].perturbed.translation);
  }
}

TEST_CASE("perturbation files round-trip") {
  Rng rng(8);
  std::vector<PerturbationRecord> records(3);
  for (int i = 0; i < 3; ++i) {
    auto& r = records[i];
    r.source = i;
    r.reference = (i + 1) % 3;
    r.original = oracle::RandomPose(rng, 0.3, 1.0);
    r.perturbed = oracle::RandomPose(rng, 0.3, 1.0);
    r.delta_rotation = 0.01 * i;
    r.delta_translation = 0.1 / 3.0;
    r.mean_offset_px = 3.25;
    r.accepted = i != 1;
  }
  const fs::path path = fs::temp_directory_path() / "epimvs_test_perturbations.txt";
  WritePerturbations(path, records);
  const auto back = ReadPerturbations(path);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].source == records[i].source);
    CHECK(back[i].reference == records[i].reference);
    CHECK(back[i].accepted == records[i].accepted);
    CHECK(back[i].delta_translation == records[i].delta_translation);
    CHECK(back[i].perturbed.rotation == records[i].perturbed.rotation);
    CHECK(back[i].original.translation == records[i].original.translation);
  }
  {
    std::ofstream out(path);
    out << "# epimvs-perturbations v1\nrecord 0 1 yes\n";
  }
  CHECK_THROWS_AS(ReadPerturbations(path), FormatError);
  {
    std::ofstream out(path);
    out << "something else\n";
  }
  CHECK_THROWS_AS(ReadPerturbations(path), FormatError);
  fs::remove(path);
  CHECK_THROWS_AS(ReadPerturbations(path), FormatError);
}

TEST_CASE("rotation distance is symmetric and recovers the rotation angle") {
  Rng rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const RelativePose a = oracle::RandomPose(rng, 3.0, 0.0);
    const RelativePose b = oracle::RandomPose(rng, 3.0, 0.0);
    CHECK(std::abs(RotationAngle(a.rotation, b.rotation) - RotationAngle(b.rotation, a.rotation)) <=
          1e-12);
    CHECK(RotationAngle(a.rotation, a.rotation) <= 1e-9);

    // Angles right up to both ends of (0, pi) as well as the bulk.
    const double theta = i < 10 ? 1e-7 * (i + 1) : i < 20 ? M_PI - 1e-7 * (i - 9) : M_PI * u(rng);
    const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
    const Mat3 rot = Eigen::AngleAxisd(theta, axis).toRotationMatrix();
    CHECK(std::abs(RotationAngle(a.rotation, a.rotation * rot) - theta) <= 1e-9);
  }
}

TEST_CASE("identity-pose correspondences give the identity") {
  Rng rng(10);
  const RelativePose identity;
  const auto points = PointsInView(identity, 10, rng);
  const RelativePose solved = SolvePnp(points, Project(identity, points), kIntrinsics);
  CHECK((solved.rotation - Mat3::Identity()).norm() < 1e-6);
  CHECK(solved.translation.norm() < 1e-6);
}

TEST_CASE("a thousand perturbation draws obey the acceptance rule") {
  SceneOptions so;
  so.seed = 11;
  const SyntheticScene scene = GenerateScene(so);
  const RelativePose gt = RelativeBetween(scene.poses[0], scene.poses[1]);
  const PerturbOptions opts;
  Rng rng(12);
  std::vector<double> rotations;
  for (int i = 0; i < 1000; ++i) {
    const PerturbationRecord r = PerturbPose(gt, scene.depths[0], scene.intrinsics, opts, rng);
    CHECK(r.delta_rotation >= 0.0);
    CHECK(r.delta_rotation <= M_PI);
    if (r.accepted) {
      CHECK(r.mean_offset_px < 10.0);
      rotations.push_back(r.delta_rotation);
    } else {
      CHECK(r.perturbed.rotation == gt.rotation);
      CHECK(r.perturbed.translation == gt.translation);
      CHECK(r.delta_rotation == 0.0);
    }
  }
  REQUIRE(rotations.size() >= 100);

  // The rotation-error histogram has a single peak: no bin sits clearly
  // below the tallest bins on both of its sides.
  const int bins = 8;
  const double top = *std::max_element(rotations.begin(), rotations.end());
  std::vector<double> count(bins, 0.0);
  for (double r : rotations) count[std::min(bins - 1, static_cast<int>(r / top * bins))] += 1.0;
  for (int i = 1; i + 1 < bins; ++i) {
    const double left = *std::max_element(count.begin(), count.begin() + i);
    const double right = *std::max_element(count.begin() + i + 1, count.end());
    const double dip = std::min(left, right) - count[i];
    CAPTURE(i);
    CHECK(dip <= 3.0 * std::sqrt(std::max(1.0, std::min(left, right))));
  }
}
