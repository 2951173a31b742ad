#include "quadbev/world.hpp"

#include <algorithm>
#include <cmath>

#include "quadbev/error.hpp"

namespace qbev::synth {

double wrap_angle(double a) {
  while (a >= M_PI) a -= 2 * M_PI;
  while (a < -M_PI) a += 2 * M_PI;
  return a;
}

std::array<std::array<double, 2>, 4> Box3D::bev_corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = l / 2, hw = w / 2;
  // local x along heading (length), local y lateral (width)
  const double lx[4] = {hl, -hl, -hl, hl};
  const double ly[4] = {hw, hw, -hw, -hw};
  std::array<std::array<double, 2>, 4> out;
  for (int i = 0; i < 4; ++i)
    out[static_cast<size_t>(i)] = {x + c * lx[i] - s * ly[i], y + s * lx[i] + c * ly[i]};
  return out;
}

bool Box3D::contains_bev(double px, double py) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double dx = px - x, dy = py - y;
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::fabs(lx) <= l / 2 && std::fabs(ly) <= w / 2;
}

bool Box3D::contains(const geom::Vec3& p) const {
  return contains_bev(p.x, p.y) && std::fabs(p.z - z) <= h / 2;
}

void Box3D::bev_aabb(double& x0, double& y0, double& x1, double& y1) const {
  auto cs = bev_corners();
  x0 = x1 = cs[0][0];
  y0 = y1 = cs[0][1];
  for (int i = 1; i < 4; ++i) {
    x0 = std::min(x0, cs[static_cast<size_t>(i)][0]);
    x1 = std::max(x1, cs[static_cast<size_t>(i)][0]);
    y0 = std::min(y0, cs[static_cast<size_t>(i)][1]);
    y1 = std::max(y1, cs[static_cast<size_t>(i)][1]);
  }
}

bool OrientedRect::contains(double px, double py) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double dx = px - cx, dy = py - cy;
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::fabs(lx) <= hx && std::fabs(ly) <= hy;
}

bool MapLayer::contains(double px, double py) const {
  for (const auto& r : rects)
    if (r.contains(px, py)) return true;
  for (const auto& hp : halfplanes)
    if (hp.contains(px, py)) return true;
  return false;
}

namespace {

Box3D sample_box(Rng& rng, const GenSpec& spec) {
  Box3D b;
  b.category = static_cast<int>(rng.bounded(static_cast<uint64_t>(spec.n_categories)));
  switch (b.category % 3) {
    case 0:  // car-like
      b.w = rng.uniform(1.7, 2.0);
      b.l = rng.uniform(4.0, 4.8);
      b.h = rng.uniform(1.4, 1.7);
      break;
    case 1:  // pedestrian-like
      b.w = rng.uniform(0.5, 0.7);
      b.l = rng.uniform(0.5, 0.7);
      b.h = rng.uniform(1.6, 1.8);
      break;
    default:  // cyclist-like
      b.w = rng.uniform(0.5, 0.7);
      b.l = rng.uniform(1.6, 1.9);
      b.h = rng.uniform(1.5, 1.7);
      break;
  }
  b.x = rng.uniform(-spec.box_halfx, spec.box_halfx);
  b.y = rng.uniform(-spec.box_halfy, spec.box_halfy);
  b.z = b.h / 2;
  b.yaw = wrap_angle(rng.uniform(-M_PI, M_PI));
  return b;
}

bool aabb_clear(const Box3D& b, const std::vector<Box3D>& placed, double margin) {
  double x0, y0, x1, y1;
  b.bev_aabb(x0, y0, x1, y1);
  for (const auto& o : placed) {
    double ox0, oy0, ox1, oy1;
    o.bev_aabb(ox0, oy0, ox1, oy1);
    const bool sep = x1 + margin <= ox0 || ox1 + margin <= x0 || y1 + margin <= oy0 ||
                     oy1 + margin <= y0;
    if (!sep) return false;
  }
  return true;
}

}  // namespace

World generate_world(uint64_t seed, const GenSpec& spec) {
  check_contract(spec.n_lanes >= 1 && spec.n_boxes >= 0, "generate_world: empty spec ranges");
  check_contract(spec.lane_length_max >= spec.lane_length_min && spec.lane_length_min > 0,
                 "generate_world: empty lane length range");
  Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
  World w;

  // lanes: parallel offsets along +x, centered near y = y0
  const double y0 = rng.uniform(-1.0, 1.0);
  const double length = rng.uniform(spec.lane_length_min, spec.lane_length_max);
  const double half_span = (spec.n_lanes - 1) / 2.0;
  for (int k = 0; k < spec.n_lanes; ++k) {
    LanePolyline lane;
    lane.instance_id = k;
    lane.category = k % 2;
    const double ly = y0 + (k - half_span) * spec.lane_spacing;
    for (double lx = -length / 2; lx <= length / 2 + 1e-9; lx += 1.0)
      lane.points.push_back({lx, ly});
    w.lanes.push_back(std::move(lane));
  }

  const double road_half = half_span * spec.lane_spacing + spec.road_extra;
  w.map_layers[kMapDrivable].rects.push_back({0.0, y0, length / 2, road_half, 0.0});
  w.map_layers[kMapWalkway].rects.push_back(
      {0.0, y0 + road_half + spec.walkway_width / 2, length / 2, spec.walkway_width / 2, 0.0});
  w.map_layers[kMapWalkway].rects.push_back(
      {0.0, y0 - road_half - spec.walkway_width / 2, length / 2, spec.walkway_width / 2, 0.0});
  for (int k = 0; k + 1 < spec.n_lanes; ++k) {
    const double mid = y0 + (k + 0.5 - half_span) * spec.lane_spacing;
    w.map_layers[kMapDivider].rects.push_back(
        {0.0, mid, length / 2, spec.divider_halfwidth, 0.0});
  }

  for (int i = 0; i < spec.n_boxes; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
      Box3D b = sample_box(rng, spec);
      if (std::hypot(b.x, b.y) < spec.box_min_dist) continue;
      if (!aabb_clear(b, w.boxes, spec.box_margin)) continue;
      w.boxes.push_back(b);
      placed = true;
      break;
    }
    check(placed, ErrCode::generation,
          "box placement failed for seed " + std::to_string(seed) + " after " +
              std::to_string(spec.max_retries) + " retries");
  }
  return w;
}

World transform_world(const World& w, const geom::Mat4& xform) {
  World out = w;
  const double dyaw = std::atan2(xform.at(1, 0), xform.at(0, 0));
  for (auto& b : out.boxes) {
    const geom::Vec3 p = xform.apply({b.x, b.y, b.z});
    b.x = p.x;
    b.y = p.y;
    b.z = p.z;
    b.yaw = wrap_angle(b.yaw + dyaw);
  }
  for (auto& lane : out.lanes)
    for (auto& pt : lane.points) {
      const geom::Vec3 p = xform.apply({pt[0], pt[1], 0.0});
      pt = {p.x, p.y};
    }
  for (auto& layer : out.map_layers) {
    for (auto& r : layer.rects) {
      const geom::Vec3 p = xform.apply({r.cx, r.cy, 0.0});
      r.cx = p.x;
      r.cy = p.y;
      r.yaw = wrap_angle(r.yaw + dyaw);
    }
    for (auto& hp : layer.halfplanes) {
      // n.p > c  ->  (R n).(R p + t) > c + (R n).t
      const double nx2 = xform.at(0, 0) * hp.nx + xform.at(0, 1) * hp.ny;
      const double ny2 = xform.at(1, 0) * hp.nx + xform.at(1, 1) * hp.ny;
      hp.c += nx2 * xform.at(0, 3) + ny2 * xform.at(1, 3);
      hp.nx = nx2;
      hp.ny = ny2;
    }
  }
  return out;
}

std::vector<Box3D> boxes_in_grid(const World& w, const geom::BevGridSpec& grid) {
  std::vector<Box3D> out;
  for (const auto& b : w.boxes)
    if (grid.in_xy(b.x, b.y)) out.push_back(b);
  return out;
}

void quantize_world_f32(World& w) {
  auto q = [](double& v) { v = static_cast<double>(static_cast<float>(v)); };
  for (auto& b : w.boxes) {
    q(b.x);
    q(b.y);
    q(b.z);
    q(b.w);
    q(b.l);
    q(b.h);
    q(b.yaw);
  }
  for (auto& lane : w.lanes)
    for (auto& p : lane.points) {
      q(p[0]);
      q(p[1]);
    }
  for (auto& layer : w.map_layers) {
    for (auto& r : layer.rects) {
      q(r.cx);
      q(r.cy);
      q(r.hx);
      q(r.hy);
      q(r.yaw);
    }
    for (auto& hp : layer.halfplanes) {
      q(hp.nx);
      q(hp.ny);
      q(hp.c);
    }
  }
}

}  // namespace qbev::synth
