#include <algorithm>
#include <cmath>
#include <limits>

#include "quadbev/error.hpp"
#include "quadbev/sample.hpp"

namespace qbev::synth {

namespace {

constexpr double kNearClip = 0.05;
constexpr double kLaneHalfWidth = 0.15;  // painted marking half width, meters

// Ray/box intersection in the box frame (slab test). Returns t of the entry
// point and the face axis (0=x,1=y,2=z) or a negative t when missed.
struct BoxHit {
  double t = -1;
  int axis = 2;
};

BoxHit intersect_box(const geom::Vec3& o, const geom::Vec3& d, const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  // into box frame
  const double ox = c * (o.x - b.x) + s * (o.y - b.y);
  const double oy = -s * (o.x - b.x) + c * (o.y - b.y);
  const double oz = o.z - b.z;
  const double dx = c * d.x + s * d.y;
  const double dy = -s * d.x + c * d.y;
  const double dz = d.z;
  const double half[3] = {b.l / 2, b.w / 2, b.h / 2};
  const double ov[3] = {ox, oy, oz};
  const double dv[3] = {dx, dy, dz};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis0 = 2;
  for (int a = 0; a < 3; ++a) {
    if (dv[a] == 0.0) {
      if (std::fabs(ov[a]) > half[a]) return {};
      continue;
    }
    double ta = (-half[a] - ov[a]) / dv[a];
    double tb = (half[a] - ov[a]) / dv[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis0 = a;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return {};
  }
  if (t0 < kNearClip) return {};
  return {t0, axis0};
}

Shade shade_ground(const World& w, double px, double py) {
  // painted lane markings win over map layers
  for (const auto& lane : w.lanes) {
    for (size_t i = 0; i + 1 < lane.points.size(); ++i) {
      const double ax = lane.points[i][0], ay = lane.points[i][1];
      const double bx = lane.points[i + 1][0], by = lane.points[i + 1][1];
      const double ex = bx - ax, ey = by - ay;
      const double len2 = ex * ex + ey * ey;
      if (len2 == 0) continue;
      double u = ((px - ax) * ex + (py - ay) * ey) / len2;
      u = std::clamp(u, 0.0, 1.0);
      const double qx = ax + u * ex, qy = ay + u * ey;
      if (std::hypot(px - qx, py - qy) <= kLaneHalfWidth) return lane_color(lane.category);
    }
  }
  if (w.map_layers[kMapDivider].contains(px, py)) return ground_color(kMapDivider);
  if (w.map_layers[kMapWalkway].contains(px, py)) return ground_color(kMapWalkway);
  if (w.map_layers[kMapDrivable].contains(px, py)) return ground_color(kMapDrivable);
  return ground_color(3);
}

}  // namespace

Shade box_color(int category) {
  switch (category % 3) {
    case 0: return {0.85, 0.2, 0.2};
    case 1: return {0.2, 0.85, 0.25};
    default: return {0.25, 0.3, 0.9};
  }
}

Shade ground_color(int cat) {
  switch (cat) {
    case kMapDrivable: return {0.35, 0.35, 0.38};
    case kMapWalkway: return {0.55, 0.5, 0.42};
    case kMapDivider: return {0.82, 0.76, 0.3};
    default: return {0.22, 0.3, 0.22};
  }
}

Shade lane_color(int category) {
  return category % 2 == 0 ? Shade{0.95, 0.95, 0.95} : Shade{0.95, 0.8, 0.35};
}

Shade sky_color() { return {0.55, 0.72, 0.95}; }

Sample render_sample(const World& world, const std::vector<geom::CameraModel>& cameras,
                     const geom::EgoPose& ego_pose, const geom::BevGridSpec& grid) {
  check_contract(!cameras.empty(), "render_sample: need at least one camera");
  ego_pose.validate();
  grid.validate();
  for (size_t i = 1; i < cameras.size(); ++i)
    check_contract(cameras[i].width == cameras[0].width &&
                       cameras[i].height == cameras[0].height,
                   "render_sample: cameras must share image size");

  Sample sample;
  sample.cameras = cameras;
  sample.ego_pose = ego_pose;
  sample.world_ref = transform_world(world, ego_pose.ego_to_global.inverse_rigid());
  quantize_world_f32(sample.world_ref);
  const World& w = sample.world_ref;  // render in ego frame

  for (const auto& cam : cameras) {
    cam.validate();
    Tensor img({3, cam.height, cam.width});
    Tensor depth({cam.height, cam.width});
    const geom::Vec3 origin = cam.cam_to_ego.apply({0, 0, 0});

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int v = 0; v < cam.height; ++v) {
      for (int u = 0; u < cam.width; ++u) {
        const geom::Vec3 dir = cam.cam_to_ego.rotate(cam.ray_cam(u, v));
        double best_t = std::numeric_limits<double>::infinity();
        Shade shade = sky_color();
        for (const auto& b : w.boxes) {
          const BoxHit hit = intersect_box(origin, dir, b);
          if (hit.t > 0 && hit.t < best_t) {
            best_t = hit.t;
            const Shade base = box_color(b.category);
            const double f = hit.axis == 2 ? 1.0 : (hit.axis == 0 ? 0.75 : 0.55);
            shade = {base.r * f, base.g * f, base.b * f};
          }
        }
        if (dir.z < 0) {
          const double tg = (w.ground_elevation - origin.z) / dir.z;
          if (tg >= kNearClip && tg < best_t) {
            best_t = tg;
            shade = shade_ground(w, origin.x + tg * dir.x, origin.y + tg * dir.y);
          }
        }
        const bool hit_any = std::isfinite(best_t);
        depth.at(v, u) = hit_any ? best_t : 0.0;
        img.at(0, v, u) = shade.r;
        img.at(1, v, u) = shade.g;
        img.at(2, v, u) = shade.b;
      }
    }
    img.quantize_f32();
    depth.quantize_f32();
    sample.images.push_back(std::move(img));
    sample.depth_gt.push_back(std::move(depth));
  }
  return sample;
}

}  // namespace qbev::synth
