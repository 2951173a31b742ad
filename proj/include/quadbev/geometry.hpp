#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "quadbev/kernels.hpp"
#include "quadbev/tape.hpp"
#include "quadbev/tensor.hpp"

namespace qbev::geom {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

// Row-major 4x4 rigid transform.
struct Mat4 {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Mat4 identity() { return Mat4{}; }
  double at(int r, int c) const { return m[static_cast<size_t>(r) * 4 + c]; }
  double& at(int r, int c) { return m[static_cast<size_t>(r) * 4 + c]; }

  Vec3 apply(const Vec3& p) const {
    return {at(0, 0) * p.x + at(0, 1) * p.y + at(0, 2) * p.z + at(0, 3),
            at(1, 0) * p.x + at(1, 1) * p.y + at(1, 2) * p.z + at(1, 3),
            at(2, 0) * p.x + at(2, 1) * p.y + at(2, 2) * p.z + at(2, 3)};
  }
  Vec3 rotate(const Vec3& p) const {
    return {at(0, 0) * p.x + at(0, 1) * p.y + at(0, 2) * p.z,
            at(1, 0) * p.x + at(1, 1) * p.y + at(1, 2) * p.z,
            at(2, 0) * p.x + at(2, 1) * p.y + at(2, 2) * p.z};
  }

  Mat4 operator*(const Mat4& o) const {
    Mat4 r;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += at(i, k) * o.at(k, j);
        r.at(i, j) = s;
      }
    return r;
  }

  // Inverse assuming the upper-left 3x3 is a rotation.
  Mat4 inverse_rigid() const {
    Mat4 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
    const Vec3 t{at(0, 3), at(1, 3), at(2, 3)};
    r.at(0, 3) = -(r.at(0, 0) * t.x + r.at(0, 1) * t.y + r.at(0, 2) * t.z);
    r.at(1, 3) = -(r.at(1, 0) * t.x + r.at(1, 1) * t.y + r.at(1, 2) * t.z);
    r.at(2, 3) = -(r.at(2, 0) * t.x + r.at(2, 1) * t.y + r.at(2, 2) * t.z);
    r.at(3, 0) = r.at(3, 1) = r.at(3, 2) = 0;
    r.at(3, 3) = 1;
    return r;
  }

  // max |R^T R - I| of the rotation block
  double rotation_defect() const {
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += at(k, i) * at(k, j);
        worst = std::max(worst, std::fabs(s - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }
};

Mat4 rot_z(double yaw);
Mat4 rot_y(double pitch);
Mat4 rot_x(double roll);
Mat4 translate(double x, double y, double z);

// Pinhole camera with zero skew, plus its rigid mount in the ego frame.
// Camera frame follows the usual optical convention: x right, y down,
// z forward.
struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  Mat4 cam_to_ego;
  int width = 0, height = 0;

  void validate() const;
  // Ray direction in camera frame with unit z (so distance along the ray
  // parameter is z-depth).
  Vec3 ray_cam(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
};

// Ego yaw/pitch mounted camera: yaw 0 looks along +x (forward).
CameraModel make_camera(double fx, double fy, int width, int height, double yaw_rad,
                        double pitch_down_rad, Vec3 position);

struct BevGridSpec {
  double x_min = -16, x_max = 16;
  double y_min = -16, y_max = 16;
  double cell_size = 0.5;
  double z_min = -2, z_max = 4;
  int n_z = 8;
  double d_min = 1, d_max = 30;
  int n_depth_bins = 16;

  void validate() const;
  int w_bev() const { return static_cast<int>(std::llround((x_max - x_min) / cell_size)); }
  int h_bev() const { return static_cast<int>(std::llround((y_max - y_min) / cell_size)); }
  double depth_of_bin(int d) const {
    return d_min + (d + 0.5) * (d_max - d_min) / n_depth_bins;
  }
  int bin_of_depth(double z) const {  // -1 when out of range
    if (!(z >= d_min && z < d_max)) return -1;
    int b = static_cast<int>(std::floor((z - d_min) / (d_max - d_min) * n_depth_bins));
    return b >= n_depth_bins ? n_depth_bins - 1 : b;
  }
  // Half-open cells: a point exactly on a boundary lands in the higher cell.
  int cell_x(double x) const { return static_cast<int>(std::floor((x - x_min) / cell_size)); }
  int cell_y(double y) const { return static_cast<int>(std::floor((y - y_min) / cell_size)); }
  bool in_xy(double x, double y) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max;
  }
  bool in_z(double z) const { return z >= z_min && z < z_max; }
  double center_x(int j) const { return x_min + (j + 0.5) * cell_size; }
  double center_y(int i) const { return y_min + (i + 0.5) * cell_size; }
  double z_layer_lo(int k) const { return z_min + k * (z_max - z_min) / n_z; }
  double z_layer_center(int k) const { return z_min + (k + 0.5) * (z_max - z_min) / n_z; }
  // flat index into (h_bev, w_bev)
  long cell_index(int i, int j) const { return static_cast<long>(i) * w_bev() + j; }
};

struct EgoPose {
  Mat4 ego_to_global;
  double timestamp = 0;
  void validate() const;
};

// (D, H_feat, W_feat, 3) camera-frame points of every (depth bin, feature
// pixel) pair.
struct Frustum {
  Tensor points_cam;  // (D, Hf, Wf, 3)
  int d = 0, hf = 0, wf = 0;
  int stride = 1;
};

Frustum build_frustum(const CameraModel& cam, const BevGridSpec& grid, int feature_stride);

// Precomputed (bin, pixel) -> BEV cell mapping for one camera.
using SplatPlan = kern::SplatIntervals;
std::shared_ptr<SplatPlan> build_splat_plan(const Frustum& fr, const CameraModel& cam,
                                            const BevGridSpec& grid);

// Raw (non-autodiff) lift-splat; depth_probs columns must sum to 1.
Tensor lift_and_splat(const Tensor& features, const Tensor& depth_probs, const Frustum& fr,
                      const CameraModel& cam, const BevGridSpec& grid);
// Autodiff version over a cached plan.
ad::Var lift_and_splat(ad::Var features, ad::Var depth_probs,
                       std::shared_ptr<const SplatPlan> plan, const BevGridSpec& grid);

// Bilinear taps that resample a past BEV raster into the current ego frame.
std::shared_ptr<kern::WarpTaps> build_warp_taps(const EgoPose& past_pose,
                                                const EgoPose& current_pose,
                                                const BevGridSpec& grid);

Tensor warp_bev(const Tensor& past_bev, const EgoPose& past_pose, const EgoPose& current_pose,
                const BevGridSpec& grid);
ad::Var warp_bev(ad::Var past_bev, std::shared_ptr<const kern::WarpTaps> taps);

// Channel concat: current first, then history newest to oldest; missing
// history slots become zero rasters.
Tensor temporal_concat(const Tensor& current, const std::vector<const Tensor*>& history,
                       int t_hist);
ad::Var temporal_concat(ad::Var current, const std::vector<ad::Var>& history, int t_hist);

}  // namespace qbev::geom
