#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "quadbev/dataset.hpp"
#include "quadbev/sample.hpp"

using namespace qbev;
using namespace qbev::synth;
using geom::Vec3;

namespace {

// Separating-axis overlap test for two rotated BEV rectangles; independent
// of the generator's AABB reasoning.
bool rects_overlap_sat(const Box3D& a, const Box3D& b) {
  auto ca = a.bev_corners();
  auto cb = b.bev_corners();
  auto axes_of = [](const std::array<std::array<double, 2>, 4>& cs) {
    std::array<std::array<double, 2>, 2> axes;
    for (int e = 0; e < 2; ++e) {
      const double ex = cs[static_cast<size_t>(e + 1)][0] - cs[static_cast<size_t>(e)][0];
      const double ey = cs[static_cast<size_t>(e + 1)][1] - cs[static_cast<size_t>(e)][1];
      axes[static_cast<size_t>(e)] = {-ey, ex};
    }
    return axes;
  };
  std::vector<std::array<double, 2>> axes;
  for (const auto& ax : axes_of(ca)) axes.push_back(ax);
  for (const auto& ax : axes_of(cb)) axes.push_back(ax);
  for (const auto& ax : axes) {
    double amin = 1e18, amax = -1e18, bmin = 1e18, bmax = -1e18;
    for (const auto& p : ca) {
      const double d = p[0] * ax[0] + p[1] * ax[1];
      amin = std::min(amin, d);
      amax = std::max(amax, d);
    }
    for (const auto& p : cb) {
      const double d = p[0] * ax[0] + p[1] * ax[1];
      bmin = std::min(bmin, d);
      bmax = std::max(bmax, d);
    }
    if (amax < bmin || bmax < amin) return false;  // separating axis found
  }
  return true;
}

}  // namespace

TEST_CASE("generate_world: deterministic in seed") {
  GenSpec spec;
  World a = generate_world(0, spec);
  World b = generate_world(0, spec);
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].x == b.boxes[i].x);
    CHECK(a.boxes[i].yaw == b.boxes[i].yaw);
  }
  World c = generate_world(1, spec);
  bool differs = a.boxes.size() != c.boxes.size();
  for (size_t i = 0; !differs && i < a.boxes.size(); ++i)
    differs = a.boxes[i].x != c.boxes[i].x;
  CHECK(differs);
}

TEST_CASE("generate_world: boxes never overlap in BEV (SAT oracle)") {
  GenSpec spec;
  spec.n_boxes = 6;
  for (uint64_t seed = 0; seed < 12; ++seed) {
    World w = generate_world(seed, spec);
    REQUIRE(w.boxes.size() == 6);
    for (size_t i = 0; i < w.boxes.size(); ++i)
      for (size_t j = i + 1; j < w.boxes.size(); ++j)
        CHECK_FALSE(rects_overlap_sat(w.boxes[i], w.boxes[j]));
  }
}

TEST_CASE("generate_world: empty scene has only ground and free occupancy") {
  GenSpec spec;
  spec.n_boxes = 0;
  World w = generate_world(3, spec);
  CHECK(w.boxes.empty());
  geom::BevGridSpec grid = make_grid("desk");
  auto rig = make_rig("desk");
  geom::EgoPose pose;
  Sample s = render_sample(w, rig, pose, grid);
  GtRasters gt = rasterize_gt(s.world_ref, grid, rig, s.depth_gt, 8, 3);
  CHECK(gt.det_mask.sum() == 0.0);
  const int ground = occ_ground_index(3), free = occ_free_index(3);
  for (long i = 0; i < gt.occ_grid.numel(); ++i) {
    const int v = static_cast<int>(gt.occ_grid[i]);
    CHECK((v == ground || v == free));
  }
}

TEST_CASE("generate_world: drivable region contains every lane point") {
  GenSpec spec;
  for (uint64_t seed = 0; seed < 4; ++seed) {
    World w = generate_world(seed, spec);
    for (const auto& lane : w.lanes)
      for (const auto& p : lane.points)
        CHECK(w.map_layers[kMapDrivable].contains(p[0], p[1]));
  }
}

TEST_CASE("generate_world: impossible placement reports the seed") {
  GenSpec spec;
  spec.n_boxes = 500;  // cannot fit
  spec.box_halfx = 3;
  spec.box_halfy = 3;
  spec.max_retries = 20;
  CHECK_THROWS_WITH_AS(generate_world(77, spec),
                       doctest::Contains("seed 77"), QbError);
}

TEST_CASE("render: ground depth follows the analytic ray-plane formula") {
  World w;  // empty world, bare ground
  auto rig = make_rig("desk");
  geom::BevGridSpec grid = make_grid("desk");
  geom::EgoPose pose;
  Sample s = render_sample(w, rig, pose, grid);
  const auto& cam = rig[0];
  const Vec3 origin = cam.cam_to_ego.apply({0, 0, 0});
  for (int v = 0; v < cam.height; v += 7)
    for (int u = 0; u < cam.width; u += 11) {
      const Vec3 dir = cam.cam_to_ego.rotate(cam.ray_cam(u, v));
      const double measured = s.depth_gt[0].at(v, u);
      if (dir.z < -1e-9) {
        const double expect = origin.z / -dir.z;
        CHECK(measured == doctest::Approx(expect).epsilon(1e-6));
      } else {
        CHECK(measured == 0.0);  // sky
      }
    }
}

TEST_CASE("render: box behind the camera leaves no pixels") {
  World w;
  Box3D b;
  b.x = -6;  // behind the forward camera's frustum but inside the grid
  b.y = 0;
  b.z = 0.8;
  b.w = 2;
  b.l = 4;
  b.h = 1.6;
  w.boxes.push_back(b);
  std::vector<geom::CameraModel> rig{make_rig("desk")[0]};  // forward camera only
  geom::BevGridSpec grid = make_grid("desk");
  Sample s = render_sample(w, rig, geom::EgoPose{}, grid);
  // every finite depth must be a ground or sky pixel: no point above ground
  const auto& cam = rig[0];
  const Vec3 origin = cam.cam_to_ego.apply({0, 0, 0});
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      const double t = s.depth_gt[0].at(v, u);
      if (t <= 0) continue;
      const Vec3 dir = cam.cam_to_ego.rotate(cam.ray_cam(u, v));
      CHECK(origin.z + t * dir.z < 0.05);
    }
}

TEST_CASE("render: mirrored world and mirrored camera give mirrored images") {
  GenSpec spec;
  spec.n_boxes = 3;
  World w = generate_world(5, spec);
  // build the y-mirrored world with exactly negated coordinates
  World m = w;
  for (auto& b : m.boxes) {
    b.y = -b.y;
    b.yaw = -b.yaw;
  }
  for (auto& lane : m.lanes)
    for (auto& p : lane.points) p[1] = -p[1];
  for (auto& layer : m.map_layers)
    for (auto& r : layer.rects) {
      r.cy = -r.cy;
      r.yaw = -r.yaw;
    }

  const auto cam_l = geom::make_camera(64, 64, 128, 64, M_PI / 2, 0.18, {0.0, 0.4, 1.6});
  const auto cam_r = geom::make_camera(64, 64, 128, 64, -M_PI / 2, 0.18, {0.0, -0.4, 1.6});
  geom::BevGridSpec grid = make_grid("desk");
  Sample sl = render_sample(w, {cam_l}, geom::EgoPose{}, grid);
  Sample sr = render_sample(m, {cam_r}, geom::EgoPose{}, grid);
  for (int v = 0; v < 64; ++v)
    for (int u = 0; u < 128; ++u) {
      CHECK(sl.depth_gt[0].at(v, u) == sr.depth_gt[0].at(v, 127 - u));
      for (int ch = 0; ch < 3; ++ch)
        CHECK(sl.images[0].at(ch, v, u) == sr.images[0].at(ch, v, 127 - u));
    }
}

TEST_CASE("rasterize: centered box gives heatmap 1 and zero offsets") {
  World w;
  geom::BevGridSpec grid = make_grid("desk");
  Box3D b;
  b.x = grid.center_x(40);  // exactly a cell center
  b.y = grid.center_y(25);
  b.z = 0.8;
  b.w = 2;
  b.l = 4;
  b.h = 1.6;
  b.category = 1;
  w.boxes.push_back(b);
  GtRasters gt = rasterize_gt(w, grid, {}, {}, 8, 3);
  CHECK(gt.det_heatmap.at(1, 25, 40) == 1.0);
  CHECK(gt.det_mask.at(25, 40) == 1.0);
  CHECK(gt.det_reg.at(0, 25, 40) == 0.0);
  CHECK(gt.det_reg.at(1, 25, 40) == 0.0);
  // every occupied voxel of this category must lie inside the box
  for (int i = 0; i < grid.h_bev(); ++i)
    for (int j = 0; j < grid.w_bev(); ++j)
      for (int k = 0; k < grid.n_z; ++k)
        if (static_cast<int>(gt.occ_grid.at(i, j, k)) == 1) {
          CHECK(b.contains({grid.center_x(j), grid.center_y(i), grid.z_layer_center(k)}));
        }
}

TEST_CASE("rasterize: half-plane drivable mask is the exact indicator") {
  World w;
  w.map_layers[kMapDrivable].halfplanes.push_back({1, 0, 0});  // x > 0
  geom::BevGridSpec grid = make_grid("desk");
  GtRasters gt = rasterize_gt(w, grid, {}, {}, 8, 3);
  for (int i = 0; i < grid.h_bev(); ++i)
    for (int j = 0; j < grid.w_bev(); ++j)
      CHECK(gt.map_masks.at(kMapDrivable, i, j) == (grid.center_x(j) > 0 ? 1.0 : 0.0));
}

TEST_CASE("rasterize: straight lane marks one cell per crossed column") {
  World w;
  LanePolyline lane;
  lane.instance_id = 0;
  lane.category = 1;
  // endpoints chosen off cell boundaries so the half-cell rule has no ties
  for (double x = -10.1; x <= 10.1 + 1e-9; x += 1.0) lane.points.push_back({x, 0.0});
  w.lanes.push_back(lane);
  geom::BevGridSpec grid = make_grid("desk");
  GtRasters gt = rasterize_gt(w, grid, {}, {}, 8, 3);
  const int j0 = grid.cell_x(lane.points.front()[0]);
  const int j1 = grid.cell_x(lane.points.back()[0]);
  for (int j = 0; j < grid.w_bev(); ++j) {
    int marked = 0;
    for (int i = 0; i < grid.h_bev(); ++i)
      if (gt.lane_conf.at(i, j) == 1.0) {
        ++marked;
        CHECK(std::fabs(gt.lane_offset.at(i, j)) <= 0.5);
        CHECK(gt.lane_embed_id.at(i, j) == 0.0);
        CHECK(gt.lane_class.at(i, j) == 1.0);
        // decoded position: cell center + offset recovers y = 0
        const double y = grid.center_y(i) + gt.lane_offset.at(i, j) * grid.cell_size;
        CHECK(y == doctest::Approx(0.0).epsilon(1e-9));
      }
    if (j >= j0 && j <= j1)
      CHECK(marked == 1);
    else
      CHECK(marked == 0);
  }
}

TEST_CASE("rasterize: depth bins are one-hot or all-zero") {
  GenSpec spec;
  World w = generate_world(9, spec);
  auto rig = make_rig("desk");
  geom::BevGridSpec grid = make_grid("desk");
  Sample s = render_sample(w, rig, geom::EgoPose{}, grid);
  GtRasters gt = rasterize_gt(s.world_ref, grid, rig, s.depth_gt, 8, 3);
  REQUIRE(gt.depth_bins.size() == rig.size());
  for (const auto& bins : gt.depth_bins) {
    const int d = bins.dim(0);
    const long cols = bins.numel() / d;
    for (long p = 0; p < cols; ++p) {
      double sum = 0;
      for (int b = 0; b < d; ++b) {
        const double v = bins[b * cols + p];
        CHECK((v == 0.0 || v == 1.0));
        sum += v;
      }
      CHECK(sum <= 1.0);
    }
  }
}

TEST_CASE("projection consistency: box pixels land inside a dilated footprint") {
  GenSpec spec;
  spec.n_boxes = 4;
  World w = generate_world(11, spec);
  auto rig = make_rig("desk");
  geom::BevGridSpec grid = make_grid("desk");
  Sample s = render_sample(w, rig, geom::EgoPose{}, grid);
  for (size_t c = 0; c < rig.size(); ++c) {
    const auto& cam = rig[c];
    const Vec3 origin = cam.cam_to_ego.apply({0, 0, 0});
    for (int v = 0; v < cam.height; v += 2)
      for (int u = 0; u < cam.width; u += 2) {
        const double t = s.depth_gt[c].at(v, u);
        if (t <= 0) continue;
        const Vec3 dir = cam.cam_to_ego.rotate(cam.ray_cam(u, v));
        const Vec3 p{origin.x + t * dir.x, origin.y + t * dir.y, origin.z + t * dir.z};
        if (p.z <= 0.05) continue;  // ground hit
        bool inside_any = false;
        for (const auto& b : s.world_ref.boxes) {
          Box3D dil = b;
          dil.w += 2 * grid.cell_size;
          dil.l += 2 * grid.cell_size;
          if (dil.contains_bev(p.x, p.y)) inside_any = true;
        }
        CHECK(inside_any);
      }
  }
}

TEST_CASE("gt self-consistency: heatmap peaks carry mask and valid regression") {
  GenSpec spec;
  spec.n_boxes = 5;
  World w = generate_world(21, spec);
  geom::BevGridSpec grid = make_grid("desk");
  GtRasters gt = rasterize_gt(w, grid, {}, {}, 8, 3);
  int peaks = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < grid.h_bev(); ++i)
      for (int j = 0; j < grid.w_bev(); ++j)
        if (gt.det_heatmap.at(c, i, j) == 1.0) {
          ++peaks;
          CHECK(gt.det_mask.at(i, j) == 1.0);
          CHECK(std::isfinite(gt.det_reg.at(3, i, j)));
          const double sy = gt.det_reg.at(6, i, j), cy = gt.det_reg.at(7, i, j);
          CHECK(sy * sy + cy * cy == doctest::Approx(1.0).epsilon(1e-5));
        }
  CHECK(peaks == static_cast<int>(boxes_in_grid(w, grid).size()));
}
