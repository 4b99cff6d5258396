#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "epimvs/geometry.hpp"
#include "epimvs/random.hpp"
#include "epimvs/scenekit.hpp"

namespace epimvs {

struct PnpOptions {
  int max_iterations = 50;
  double step_tolerance = 1e-10;
};

// Pose mapping `points` (3D, object frame) onto `pixels`: linear DLT start,
// then Gauss-Newton on pixel reprojection error with a left-multiplied
// rotation update. Fewer than 6 points is an ArgumentError; a rank-deficient
// linear system, a diverging refinement or a solution with points behind the
// camera is a SolverError.
RelativePose SolvePnp(std::span<const Vec3> points, std::span<const Vec2> pixels,
                      const CameraIntrinsics& intrinsics, const PnpOptions& options = {});

// Closest rotation in Frobenius norm.
Mat3 NearestRotation(const Mat3& m);

// Geodesic angle between two rotations, in [0, pi].
double RotationAngle(const Mat3& a, const Mat3& b);
double TranslationDistance(const Vec3& a, const Vec3& b);

struct PerturbationRecord {
  int source = -1;
  int reference = -1;
  RelativePose original;
  RelativePose perturbed;
  double delta_rotation = 0.0;
  double delta_translation = 0.0;
  double mean_offset_px = 0.0;
  bool accepted = false;
};

struct PerturbOptions {
  double noise_max_px = 10.0;
  int points = 10;
  double max_mean_offset_px = 10.0;
  int lattice_stride = 4;
  int max_retries = 20;
};

// Mean pixel distance between the projections of the source's ground-truth
// points under `a` and `b`, over the strided lattice of labelled pixels.
double MeanReprojectionOffset(const RelativePose& a, const RelativePose& b,
                              const DepthMap& source_depth, const CameraIntrinsics& intrinsics,
                              int stride = 4);

// Projects sampled ground-truth points of the source with `gt_pose`, jitters
// the pixels uniformly per axis and re-solves the pose. Rejected or failed
// draws return the original pose with accepted = false.
PerturbationRecord PerturbPose(const RelativePose& gt_pose, const DepthMap& source_depth,
                               const CameraIntrinsics& intrinsics, const PerturbOptions& options,
                               Rng& rng);

// One record per (source, reference) pair of the scene, in view order.
std::vector<PerturbationRecord> PerturbScene(const SyntheticScene& scene,
                                             const PerturbOptions& options, std::uint64_t seed);

// Text file: "# epimvs-perturbations v1", then one line per record:
// record <source> <reference> <accepted> <dR> <dt> <offset> <R t original> <R t perturbed>
void WritePerturbations(const std::filesystem::path& path,
                        const std::vector<PerturbationRecord>& records);
std::vector<PerturbationRecord> ReadPerturbations(const std::filesystem::path& path);

}  // namespace epimvs
