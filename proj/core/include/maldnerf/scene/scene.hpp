#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maldnerf/util/image.hpp"

namespace maldnerf::scene {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b);
Vec3 operator-(Vec3 a, Vec3 b);
Vec3 operator*(double s, Vec3 a);
double dot(Vec3 a, Vec3 b);
Vec3 cross(Vec3 a, Vec3 b);
double norm(Vec3 a);
Vec3 normalize(Vec3 a);

struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  std::array<double, 16> c2w{};  // row-major camera-to-world

  void validate() const;  // orthonormal rotation, positive focal, res >= 16
  Vec3 center() const;
  // px, py are continuous pixel coordinates (pixel centers at +0.5).
  void ray(double px, double py, Vec3& origin, Vec3& dir) const;
  // Projects a world point; returns false when behind the camera.
  bool project(Vec3 p, double& px, double& py, double& depth) const;
};

struct PosedImage {
  int id = 0;
  ImageF pixels;                   // H x W x 3 in [0,1]
  Mask mask;                       // true = inpainting region
  CameraModel camera;
  std::optional<ImageF> gt_removed;  // H x W x 3
  std::optional<ImageF> gt_depth;    // H x W x 1, distance along the pixel ray
};

struct SceneSpec {
  uint64_t seed = 7;
  int train_views = 20;
  int test_views = 8;
  int res = 64;
  int objects = 2;
  double dilate_frac = 0.02;   // mask dilation radius = ceil(frac * max(H, W))
  double orbit_radius = 2.2;   // 0 collapses the orbit and must be rejected
  int long_edge = 1008;        // import-time downscale target
};

struct SceneDataset {
  SceneSpec descriptor;
  std::vector<PosedImage> images;
  std::vector<uint8_t> is_test;  // parallel to images
  int64_t revision = 0;

  const PosedImage& by_id(int id) const;
  PosedImage& by_id(int id);
  std::vector<int> train_ids() const;
  std::vector<int> test_ids() const;
};

// Ray-traced procedural scene: textured ground plane, textured enclosing
// sphere, and `objects` removable primitives. Train views show the objects
// and carry silhouette masks dilated by ceil(dilate_frac * max(H, W)); test
// views are rendered with the objects physically removed. gt_removed and
// gt_depth (object-free geometry) are stored for every view. Deterministic
// in spec.seed.
SceneDataset synthesize_scene(const SceneSpec& spec);

// Replaces the pixels of one image. The mask must equal the stored mask and
// new_pixels must be bit-identical to the old pixels outside it. Bumps the
// dataset revision.
void update_image(SceneDataset& ds, int id, const ImageF& new_pixels, const Mask& mask);

void save_dataset(const SceneDataset& ds, const std::string& dir);
SceneDataset load_dataset(const std::string& dir);

// Scene distance bounds used by the renderer and the radiance field.
double scene_t_near();
double scene_t_far();

}  // namespace maldnerf::scene
