#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "quadbev/geometry.hpp"
#include "quadbev/rng.hpp"

namespace qbev::synth {

struct Box3D {
  double x = 0, y = 0, z = 0;  // center, meters
  double w = 1, l = 1, h = 1;  // width (lateral), length (along heading), height
  double yaw = 0;              // [-pi, pi)
  int category = 0;

  // BEV footprint corners, counterclockwise
  std::array<std::array<double, 2>, 4> bev_corners() const;
  bool contains(const geom::Vec3& p) const;
  bool contains_bev(double px, double py) const;
  // axis-aligned BEV bounds of the rotated footprint
  void bev_aabb(double& x0, double& y0, double& x1, double& y1) const;
};

struct LanePolyline {
  std::vector<std::array<double, 2>> points;
  int category = 0;
  int instance_id = 0;
};

struct OrientedRect {
  double cx = 0, cy = 0, hx = 1, hy = 1, yaw = 0;
  bool contains(double px, double py) const;
};

struct HalfPlane {
  double nx = 1, ny = 0, c = 0;  // inside iff nx*x + ny*y > c
  bool contains(double px, double py) const { return nx * px + ny * py > c; }
};

struct MapLayer {
  std::vector<OrientedRect> rects;
  std::vector<HalfPlane> halfplanes;
  bool contains(double px, double py) const;
};

inline constexpr int kMapDrivable = 0;
inline constexpr int kMapWalkway = 1;
inline constexpr int kMapDivider = 2;
inline constexpr int kNumMapLayers = 3;

struct World {
  std::vector<Box3D> boxes;
  std::vector<LanePolyline> lanes;
  std::array<MapLayer, kNumMapLayers> map_layers;
  double ground_elevation = 0;
};

struct GenSpec {
  int n_boxes = 3;
  int n_lanes = 3;
  int n_categories = 3;
  double lane_spacing = 3.5;
  double lane_length_min = 24, lane_length_max = 30;
  double road_extra = 1.75;      // drivable margin beyond outer lanes
  double walkway_width = 2.0;
  double divider_halfwidth = 0.3;
  double box_halfx = 11, box_halfy = 9;   // placement area
  double box_min_dist = 3.0;              // keep clear of the ego origin
  double box_margin = 0.6;                // AABB separation between boxes
  int max_retries = 200;
};

// Deterministic in (seed, spec). Boxes have pairwise-disjoint BEV
// footprints; the drivable layer contains every lane; throws
// ErrCode::generation when placement fails within the retry budget.
World generate_world(uint64_t seed, const GenSpec& spec);

// Rigid change of frame (used to express the static world in each frame's
// ego coordinates).
World transform_world(const World& w, const geom::Mat4& xform);

// Wrap into [-pi, pi).
double wrap_angle(double a);

// Perpendicular of a tangent with a canonical sign (n.y > 0, falling back to
// n.x > 0 for near-vertical normals). Lane offsets are stored along this
// direction so a decoder can reconstruct positions from a cluster axis
// whose orientation is arbitrary.
inline void canonical_perp(double tx, double ty, double& nx, double& ny) {
  nx = -ty;
  ny = tx;
  if (ny < 0 || (ny == 0 && nx < 0)) {
    nx = -nx;
    ny = -ny;
  }
}

// Boxes whose BEV center lies inside the grid; shared by GT rasterization
// and metric evaluation so both see the same instance set.
std::vector<Box3D> boxes_in_grid(const World& w, const geom::BevGridSpec& grid);

void quantize_world_f32(World& w);

}  // namespace qbev::synth
