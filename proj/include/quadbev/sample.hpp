#pragma once

#include <vector>

#include "quadbev/geometry.hpp"
#include "quadbev/world.hpp"

namespace qbev::synth {

// One timestamped multiview frame with exact ground truth. world_ref is the
// frozen world snapshot expressed in this frame's ego coordinates.
struct Sample {
  std::vector<Tensor> images;    // per camera (3, H, W), values in [0,1]
  std::vector<Tensor> depth_gt;  // per camera (H, W) meters, 0 = sky
  std::vector<geom::CameraModel> cameras;
  geom::EgoPose ego_pose;
  World world_ref;
  int sequence_id = 0;
  int frame_index = 0;
};

struct GtRasters {
  Tensor det_heatmap;   // (C_det, H, W) in [0,1], peak exactly 1 at center cells
  Tensor det_reg;       // (8, H, W): dx, dy, z, log w, log l, log h, sin yaw, cos yaw
  Tensor det_mask;      // (H, W) center-cell indicator
  Tensor map_masks;     // (C_map, H, W) binary
  Tensor lane_conf;     // (H, W) binary
  Tensor lane_offset;   // (H, W) lateral offset in cells, [-0.5, 0.5)
  Tensor lane_embed_id; // (H, W) instance id at lane cells, -1 elsewhere
  Tensor lane_class;    // (H, W) category at lane cells, -1 elsewhere
  Tensor occ_grid;      // (H, W, n_z) category index; free has the last index
  std::vector<Tensor> depth_bins;  // per camera (D, Hf, Wf), one-hot or all-zero columns
};

inline int occ_total_categories(int n_det_categories) { return n_det_categories + 2; }
inline int occ_ground_index(int n_det_categories) { return n_det_categories; }
inline int occ_free_index(int n_det_categories) { return n_det_categories + 1; }

// Flat-shaded ray casting against boxes and the ground plane. world is in
// the global frame; the returned sample holds images, z-axis depth, and the
// world snapshot re-expressed in ego coordinates.
Sample render_sample(const World& world, const std::vector<geom::CameraModel>& cameras,
                     const geom::EgoPose& ego_pose, const geom::BevGridSpec& grid);

// Exact GT rasterization of an ego-frame world.
GtRasters rasterize_gt(const World& world_ego, const geom::BevGridSpec& grid,
                       const std::vector<geom::CameraModel>& cameras,
                       const std::vector<Tensor>& depth_gt, int feature_stride,
                       int n_det_categories);

// Colors used by the renderer (exposed for tests).
struct Shade {
  double r, g, b;
};
Shade box_color(int category);
Shade ground_color(int map_category_or_bare);  // 0..2 map layers, 3 = bare ground
Shade lane_color(int category);
Shade sky_color();

}  // namespace qbev::synth
