#pragma once

#include <filesystem>
#include <vector>

#include "epimvs/geometry.hpp"
#include "epimvs/scenekit.hpp"

namespace epimvs {

struct FusedPointCloud {
  std::vector<Vec3> points;  // world frame
  std::vector<int> support;  // views agreeing on each point, source included
  std::vector<int> source_view;   // view whose pixel produced the point
  std::vector<int> source_pixel;  // y * width + x in that view

  std::size_t size() const { return points.size(); }
};

struct FusionOptions {
  double consistency_px = 1.0;
  double relative_depth = 0.01;
  int min_views = 2;
};

// Clears depth where sigma > tau. The map must carry a confidence plane.
DepthMap FilterByConfidence(const DepthMap& depth, double tau);

// Each labelled source pixel is checked against every other view by a
// forward-backward test: project into the view, read its depth there
// (bilinear in inverse depth when all four neighbours are labelled, else the
// nearest pixel), lift that back and project into the source. The view agrees
// when the round trip lands within consistency_px and within relative_depth
// of the source depth. Points with at least min_views agreeing views
// (counting the source) are kept, averaged over the agreeing views.
FusedPointCloud Fuse(const std::vector<DepthMap>& depths,
                     const std::vector<RelativePose>& world_to_camera,
                     const CameraIntrinsics& intrinsics, const FusionOptions& options = {});

// ASCII PLY: vertex element with double x, y, z and int support, written
// with 17 significant digits. The source view and pixel are not stored, so
// ReadPly leaves them empty.
void WritePly(const std::filesystem::path& path, const FusedPointCloud& cloud);
FusedPointCloud ReadPly(const std::filesystem::path& path);

}  // namespace epimvs
