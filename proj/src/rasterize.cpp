#include <algorithm>
#include <cmath>
#include <limits>

#include "quadbev/error.hpp"
#include "quadbev/sample.hpp"

namespace qbev::synth {

namespace {

struct NearestLane {
  double lat = std::numeric_limits<double>::infinity();  // signed, meters
  double lon = std::numeric_limits<double>::infinity();  // |tangential|, meters
  int lane = -1;
};

// Closest point of a polyline to p, with the lateral offset measured along
// the canonical perpendicular (sign-normalized so decoding can recover it
// from the cluster axis alone, without knowing the lane's own direction).
NearestLane nearest_on_lane(const LanePolyline& lane, double px, double py) {
  NearestLane best;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < lane.points.size(); ++i) {
    const double ax = lane.points[i][0], ay = lane.points[i][1];
    const double ex = lane.points[i + 1][0] - ax, ey = lane.points[i + 1][1] - ay;
    const double len = std::hypot(ex, ey);
    if (len == 0) continue;
    const double tx = ex / len, ty = ey / len;
    double u = ((px - ax) * tx + (py - ay) * ty);
    const double uc = std::clamp(u, 0.0, len);
    const double qx = ax + uc * tx, qy = ay + uc * ty;
    const double d = std::hypot(px - qx, py - qy);
    if (d < best_d) {
      best_d = d;
      double nx, ny;
      canonical_perp(tx, ty, nx, ny);
      best.lat = (qx - px) * nx + (qy - py) * ny;
      best.lon = std::fabs(u - uc);
    }
  }
  return best;
}

}  // namespace

GtRasters rasterize_gt(const World& world_ego, const geom::BevGridSpec& grid,
                       const std::vector<geom::CameraModel>& cameras,
                       const std::vector<Tensor>& depth_gt, int feature_stride,
                       int n_det_categories) {
  grid.validate();
  check_contract(cameras.size() == depth_gt.size(), "rasterize_gt: cameras/depth count mismatch");
  const int hb = grid.h_bev(), wb = grid.w_bev();
  const int c_occ = occ_total_categories(n_det_categories);
  const int ground_idx = occ_ground_index(n_det_categories);
  const int free_idx = occ_free_index(n_det_categories);

  GtRasters gt;
  gt.det_heatmap = Tensor({n_det_categories, hb, wb});
  gt.det_reg = Tensor({8, hb, wb});
  gt.det_mask = Tensor({hb, wb});
  gt.map_masks = Tensor({kNumMapLayers, hb, wb});
  gt.lane_conf = Tensor({hb, wb});
  gt.lane_offset = Tensor({hb, wb});
  gt.lane_embed_id = Tensor::full({hb, wb}, -1.0);
  gt.lane_class = Tensor::full({hb, wb}, -1.0);
  gt.occ_grid = Tensor::full({hb, wb, grid.n_z}, static_cast<double>(free_idx));

  // detection heatmap + regression at center cells
  for (const auto& b : boxes_in_grid(world_ego, grid)) {
    check_contract(b.category >= 0 && b.category < n_det_categories,
                   "rasterize_gt: box category out of range");
    const int ci = grid.cell_y(b.y), cj = grid.cell_x(b.x);
    const double sigma = std::max(1.0, std::min(b.w, b.l) / (3.0 * grid.cell_size));
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    for (int i = std::max(0, ci - radius); i <= std::min(hb - 1, ci + radius); ++i)
      for (int j = std::max(0, cj - radius); j <= std::min(wb - 1, cj + radius); ++j) {
        const double g = std::exp(-((i - ci) * double(i - ci) + (j - cj) * double(j - cj)) /
                                  (2 * sigma * sigma));
        gt.det_heatmap.at(b.category, i, j) = std::max(gt.det_heatmap.at(b.category, i, j), g);
      }
    gt.det_heatmap.at(b.category, ci, cj) = 1.0;
    gt.det_mask.at(ci, cj) = 1.0;
    gt.det_reg.at(0, ci, cj) = b.x - grid.center_x(cj);
    gt.det_reg.at(1, ci, cj) = b.y - grid.center_y(ci);
    gt.det_reg.at(2, ci, cj) = b.z;
    gt.det_reg.at(3, ci, cj) = std::log(b.w);
    gt.det_reg.at(4, ci, cj) = std::log(b.l);
    gt.det_reg.at(5, ci, cj) = std::log(b.h);
    gt.det_reg.at(6, ci, cj) = std::sin(b.yaw);
    gt.det_reg.at(7, ci, cj) = std::cos(b.yaw);
  }

  // map masks from analytic regions
  for (int layer = 0; layer < kNumMapLayers; ++layer)
    for (int i = 0; i < hb; ++i)
      for (int j = 0; j < wb; ++j)
        gt.map_masks.at(layer, i, j) =
            world_ego.map_layers[static_cast<size_t>(layer)].contains(grid.center_x(j),
                                                                      grid.center_y(i))
                ? 1.0
                : 0.0;

  // lane rasters: a cell is marked when the signed lateral offset to the
  // closest lane lies in [-0.5, 0.5) cells and the closest point is not past
  // the polyline end by more than half a cell
  for (int i = 0; i < hb; ++i)
    for (int j = 0; j < wb; ++j) {
      const double px = grid.center_x(j), py = grid.center_y(i);
      NearestLane pick;
      for (const auto& lane : world_ego.lanes) {
        const NearestLane nl = nearest_on_lane(lane, px, py);
        if (std::fabs(nl.lat) < std::fabs(pick.lat)) {
          pick = nl;
          pick.lane = lane.instance_id;
        }
      }
      if (pick.lane < 0) continue;
      const double off = pick.lat / grid.cell_size;
      if (off < -0.5 || off >= 0.5) continue;
      if (pick.lon > 0.5 * grid.cell_size) continue;
      const LanePolyline* lane = nullptr;
      for (const auto& l : world_ego.lanes)
        if (l.instance_id == pick.lane) lane = &l;
      gt.lane_conf.at(i, j) = 1.0;
      gt.lane_offset.at(i, j) = off;
      gt.lane_embed_id.at(i, j) = pick.lane;
      gt.lane_class.at(i, j) = lane ? lane->category : 0;
    }

  // occupancy: ground layer everywhere, then box interiors by voxel center
  for (int i = 0; i < hb; ++i)
    for (int j = 0; j < wb; ++j)
      for (int k = 0; k < grid.n_z; ++k)
        if (grid.z_layer_lo(k) <= world_ego.ground_elevation &&
            world_ego.ground_elevation < grid.z_layer_lo(k + 1))
          gt.occ_grid.at(i, j, k) = ground_idx;
  for (const auto& b : world_ego.boxes) {
    double x0, y0, x1, y1;
    b.bev_aabb(x0, y0, x1, y1);
    const int j0 = std::max(0, grid.cell_x(x0)), j1 = std::min(wb - 1, grid.cell_x(x1));
    const int i0 = std::max(0, grid.cell_y(y0)), i1 = std::min(hb - 1, grid.cell_y(y1));
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j)
        for (int k = 0; k < grid.n_z; ++k) {
          const geom::Vec3 vc{grid.center_x(j), grid.center_y(i), grid.z_layer_center(k)};
          if (b.contains(vc)) gt.occ_grid.at(i, j, k) = b.category;
        }
  }
  (void)c_occ;

  // per-camera depth bins: min positive depth within each stride block
  for (size_t c = 0; c < cameras.size(); ++c) {
    const auto& cam = cameras[c];
    check_contract(cam.width % feature_stride == 0 && cam.height % feature_stride == 0,
                   "rasterize_gt: image size not divisible by feature stride");
    const int hf = cam.height / feature_stride, wf = cam.width / feature_stride;
    Tensor bins({grid.n_depth_bins, hf, wf});
    const Tensor& depth = depth_gt[c];
    check_contract(depth.rank() == 2 && depth.dim(0) == cam.height && depth.dim(1) == cam.width,
                   "rasterize_gt: depth raster shape mismatch");
    for (int v = 0; v < hf; ++v)
      for (int u = 0; u < wf; ++u) {
        double dmin = std::numeric_limits<double>::infinity();
        for (int dv = 0; dv < feature_stride; ++dv)
          for (int du = 0; du < feature_stride; ++du) {
            const double z = depth.at(v * feature_stride + dv, u * feature_stride + du);
            if (z > 0 && z < dmin) dmin = z;
          }
        if (!std::isfinite(dmin)) continue;
        const int bin = grid.bin_of_depth(dmin);
        if (bin >= 0) bins.at(bin, v, u) = 1.0;
      }
    gt.depth_bins.push_back(std::move(bins));
  }

  gt.det_heatmap.quantize_f32();
  gt.det_reg.quantize_f32();
  gt.lane_offset.quantize_f32();
  return gt;
}

}  // namespace qbev::synth
