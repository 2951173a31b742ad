#include "quadbev/geometry.hpp"

#include <algorithm>
#include <numeric>

#include "quadbev/error.hpp"

namespace qbev::geom {

Mat4 rot_z(double yaw) {
  Mat4 r;
  const double c = std::cos(yaw), s = std::sin(yaw);
  r.at(0, 0) = c;
  r.at(0, 1) = -s;
  r.at(1, 0) = s;
  r.at(1, 1) = c;
  return r;
}

Mat4 rot_y(double pitch) {
  Mat4 r;
  const double c = std::cos(pitch), s = std::sin(pitch);
  r.at(0, 0) = c;
  r.at(0, 2) = s;
  r.at(2, 0) = -s;
  r.at(2, 2) = c;
  return r;
}

Mat4 rot_x(double roll) {
  Mat4 r;
  const double c = std::cos(roll), s = std::sin(roll);
  r.at(1, 1) = c;
  r.at(1, 2) = -s;
  r.at(2, 1) = s;
  r.at(2, 2) = c;
  return r;
}

Mat4 translate(double x, double y, double z) {
  Mat4 r;
  r.at(0, 3) = x;
  r.at(1, 3) = y;
  r.at(2, 3) = z;
  return r;
}

void CameraModel::validate() const {
  check_contract(fx > 0 && fy > 0, "camera: focal lengths must be positive");
  check_contract(width > 0 && height > 0, "camera: image size must be positive");
  check_contract(cam_to_ego.rotation_defect() < 1e-6, "camera: cam_to_ego not orthonormal");
}

CameraModel make_camera(double fx, double fy, int width, int height, double yaw_rad,
                        double pitch_down_rad, Vec3 position) {
  // Optical axes (x right, y down, z forward) mapped into ego axes
  // (x forward, y left, z up): z_cam->x_ego, x_cam->-y_ego, y_cam->-z_ego.
  Mat4 optical_to_ego;
  optical_to_ego.at(0, 0) = 0;
  optical_to_ego.at(0, 2) = 1;
  optical_to_ego.at(1, 0) = -1;
  optical_to_ego.at(1, 1) = 0;
  optical_to_ego.at(1, 2) = 0;
  optical_to_ego.at(2, 0) = 0;
  optical_to_ego.at(2, 1) = -1;
  optical_to_ego.at(2, 2) = 0;
  CameraModel cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = (width - 1) / 2.0;
  cam.cy = (height - 1) / 2.0;
  cam.width = width;
  cam.height = height;
  cam.cam_to_ego =
      translate(position.x, position.y, position.z) * rot_z(yaw_rad) * rot_y(pitch_down_rad) *
      optical_to_ego;
  return cam;
}

void BevGridSpec::validate() const {
  check_contract(cell_size > 0, "grid: cell_size must be positive");
  const double nx = (x_max - x_min) / cell_size;
  const double ny = (y_max - y_min) / cell_size;
  check_contract(std::fabs(nx - std::llround(nx)) < 1e-9 && nx > 0,
                 "grid: x range must be a positive multiple of cell_size");
  check_contract(std::fabs(ny - std::llround(ny)) < 1e-9 && ny > 0,
                 "grid: y range must be a positive multiple of cell_size");
  check_contract(d_min > 0, "grid: d_min must be positive");
  check_contract(d_max > d_min, "grid: depth range empty");
  check_contract(n_depth_bins >= 2, "grid: need at least 2 depth bins");
  check_contract(z_max > z_min && n_z > 0, "grid: bad z range");
}

void EgoPose::validate() const {
  check_contract(ego_to_global.rotation_defect() < 1e-6, "pose: rotation not orthonormal");
  check_contract(std::isfinite(timestamp), "pose: timestamp not finite");
}

Frustum build_frustum(const CameraModel& cam, const BevGridSpec& grid, int feature_stride) {
  cam.validate();
  grid.validate();
  check_contract(feature_stride > 0, "frustum: stride must be positive");
  check_contract(cam.width % feature_stride == 0 && cam.height % feature_stride == 0,
                 "frustum: image size not divisible by feature stride");
  Frustum fr;
  fr.stride = feature_stride;
  fr.d = grid.n_depth_bins;
  fr.hf = cam.height / feature_stride;
  fr.wf = cam.width / feature_stride;
  fr.points_cam = Tensor({fr.d, fr.hf, fr.wf, 3});
  const double half = (feature_stride - 1) / 2.0;
  for (int d = 0; d < fr.d; ++d) {
    const double depth = grid.depth_of_bin(d);
    for (int v = 0; v < fr.hf; ++v) {
      const double v_px = v * feature_stride + half;
      for (int u = 0; u < fr.wf; ++u) {
        const double u_px = u * feature_stride + half;
        const Vec3 ray = cam.ray_cam(u_px, v_px);
        fr.points_cam.at(d, v, u, 0) = depth * ray.x;
        fr.points_cam.at(d, v, u, 1) = depth * ray.y;
        fr.points_cam.at(d, v, u, 2) = depth;  // unit-z ray
      }
    }
  }
  return fr;
}

std::shared_ptr<SplatPlan> build_splat_plan(const Frustum& fr, const CameraModel& cam,
                                            const BevGridSpec& grid) {
  auto plan = std::make_shared<SplatPlan>();
  const int n_pix = fr.hf * fr.wf;
  plan->n_pix = n_pix;
  plan->n_bins = fr.d;
  plan->n_cells = grid.h_bev() * grid.w_bev();
  plan->cell_of.assign(static_cast<size_t>(fr.d) * n_pix, -1);

  std::vector<std::pair<int32_t, int32_t>> by_cell;  // (cell, flat point)
  for (int d = 0; d < fr.d; ++d) {
    for (int v = 0; v < fr.hf; ++v) {
      for (int u = 0; u < fr.wf; ++u) {
        const Vec3 pc{fr.points_cam.at(d, v, u, 0), fr.points_cam.at(d, v, u, 1),
                      fr.points_cam.at(d, v, u, 2)};
        const Vec3 pe = cam.cam_to_ego.apply(pc);
        if (!grid.in_xy(pe.x, pe.y) || !grid.in_z(pe.z)) continue;
        const long cell = grid.cell_index(grid.cell_y(pe.y), grid.cell_x(pe.x));
        const int32_t pt = static_cast<int32_t>(d) * n_pix + v * fr.wf + u;
        plan->cell_of[static_cast<size_t>(pt)] = static_cast<int32_t>(cell);
        by_cell.emplace_back(static_cast<int32_t>(cell), pt);
      }
    }
  }
  std::stable_sort(by_cell.begin(), by_cell.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 0; i < by_cell.size(); ++i) {
    if (i == 0 || by_cell[i].first != by_cell[i - 1].first) {
      plan->cell_ids.push_back(by_cell[i].first);
      plan->starts.push_back(static_cast<int32_t>(i));
      plan->counts.push_back(0);
    }
    ++plan->counts.back();
    plan->point_pixel.push_back(by_cell[i].second % n_pix);
    plan->point_bin.push_back(by_cell[i].second / n_pix);
  }
  return plan;
}

namespace {

void check_splat_inputs(const Tensor& features, const Tensor& depth_probs, int d, int hf,
                        int wf) {
  check_contract(features.rank() == 3 && features.dim(1) == hf && features.dim(2) == wf,
                 "lift_and_splat: features shape mismatch against frustum");
  check_contract(depth_probs.rank() == 3 && depth_probs.dim(0) == d &&
                     depth_probs.dim(1) == hf && depth_probs.dim(2) == wf,
                 "lift_and_splat: depth_probs shape mismatch against frustum");
  const long n_pix = static_cast<long>(hf) * wf;
  for (long p = 0; p < n_pix; ++p) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += depth_probs[i * n_pix + p];
    check_contract(std::fabs(s - 1.0) < 1e-5, "lift_and_splat: depth_probs column not normalized");
  }
}

}  // namespace

Tensor lift_and_splat(const Tensor& features, const Tensor& depth_probs, const Frustum& fr,
                      const CameraModel& cam, const BevGridSpec& grid) {
  check_splat_inputs(features, depth_probs, fr.d, fr.hf, fr.wf);
  auto plan = build_splat_plan(fr, cam, grid);
  Tensor out({features.dim(0), grid.h_bev(), grid.w_bev()});
  kern::splat_forward(features.data(), depth_probs.data(), out.data(), features.dim(0), *plan);
  return out;
}

ad::Var lift_and_splat(ad::Var features, ad::Var depth_probs,
                       std::shared_ptr<const SplatPlan> plan, const BevGridSpec& grid) {
  const Tensor& fv = features.val();
  const Tensor& dv = depth_probs.val();
  check_contract(fv.rank() == 3 && static_cast<long>(fv.dim(1)) * fv.dim(2) == plan->n_pix,
                 "lift_and_splat: features shape mismatch against frustum");
  check_contract(dv.rank() == 3 && dv.dim(0) == plan->n_bins &&
                     static_cast<long>(dv.dim(1)) * dv.dim(2) == plan->n_pix,
                 "lift_and_splat: depth_probs shape mismatch against frustum");
  const int c = fv.dim(0);
  Tensor out({c, grid.h_bev(), grid.w_bev()});
  kern::splat_forward(fv.data(), dv.data(), out.data(), c, *plan);
  int pf = features.id, pd = depth_probs.id;
  return features.tape->make(std::move(out), {pf, pd}, [pf, pd, plan, c](ad::Tape& t, int self) {
    const Tensor& g = t.grad(self);
    kern::splat_backward(g.data(), t.val(pf).data(), t.val(pd).data(), t.grad(pf).data(),
                         t.grad(pd).data(), c, *plan);
  });
}

std::shared_ptr<kern::WarpTaps> build_warp_taps(const EgoPose& past_pose,
                                                const EgoPose& current_pose,
                                                const BevGridSpec& grid) {
  past_pose.validate();
  current_pose.validate();
  auto taps = std::make_shared<kern::WarpTaps>();
  const int h = grid.h_bev(), w = grid.w_bev();
  taps->h = h;
  taps->w = w;
  const long cells = static_cast<long>(h) * w;
  taps->idx.assign(4 * cells, -1);
  taps->wgt.assign(4 * cells, 0.0);

  const Mat4 cur_to_past = past_pose.ego_to_global.inverse_rigid() * current_pose.ego_to_global;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const Vec3 q{grid.center_x(j), grid.center_y(i), 0.0};
      const Vec3 p = cur_to_past.apply(q);
      // continuous cell coordinates: integer values sit on cell centers
      const double gx = (p.x - grid.x_min) / grid.cell_size - 0.5;
      const double gy = (p.y - grid.y_min) / grid.cell_size - 0.5;
      const int x0 = static_cast<int>(std::floor(gx));
      const int y0 = static_cast<int>(std::floor(gy));
      const double fx = gx - x0, fy = gy - y0;
      const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const long cell = static_cast<long>(i) * w + j;
      for (int tap = 0; tap < 4; ++tap) {
        if (xs[tap] < 0 || xs[tap] >= w || ys[tap] < 0 || ys[tap] >= h) continue;
        taps->idx[static_cast<size_t>(tap) * cells + cell] =
            static_cast<int32_t>(static_cast<long>(ys[tap]) * w + xs[tap]);
        taps->wgt[static_cast<size_t>(tap) * cells + cell] = wgt[tap];
      }
    }
  }
  return taps;
}

Tensor warp_bev(const Tensor& past_bev, const EgoPose& past_pose, const EgoPose& current_pose,
                const BevGridSpec& grid) {
  check_contract(past_bev.rank() == 3 && past_bev.dim(1) == grid.h_bev() &&
                     past_bev.dim(2) == grid.w_bev(),
                 "warp_bev: raster shape mismatch");
  auto taps = build_warp_taps(past_pose, current_pose, grid);
  Tensor out(past_bev.shape());
  kern::warp_forward(past_bev.data(), out.data(), past_bev.dim(0), *taps);
  return out;
}

ad::Var warp_bev(ad::Var past_bev, std::shared_ptr<const kern::WarpTaps> taps) {
  const Tensor& xv = past_bev.val();
  check_contract(xv.rank() == 3 && xv.dim(1) == taps->h && xv.dim(2) == taps->w,
                 "warp_bev: raster shape mismatch");
  const int c = xv.dim(0);
  Tensor out(xv.shape());
  kern::warp_forward(xv.data(), out.data(), c, *taps);
  int px = past_bev.id;
  return past_bev.tape->make(std::move(out), {px}, [px, taps, c](ad::Tape& t, int self) {
    kern::warp_backward(t.grad(self).data(), t.grad(px).data(), c, *taps);
  });
}

Tensor temporal_concat(const Tensor& current, const std::vector<const Tensor*>& history,
                       int t_hist) {
  check_contract(current.rank() == 3, "temporal_concat: want (C,H,W)");
  check_contract(static_cast<int>(history.size()) <= t_hist,
                 "temporal_concat: more history than t_hist");
  const int c = current.dim(0), h = current.dim(1), w = current.dim(2);
  Tensor out({c * (1 + t_hist), h, w});
  std::copy(current.data(), current.data() + current.numel(), out.data());
  for (int s = 0; s < t_hist; ++s) {
    double* dst = out.data() + static_cast<long>(c) * h * w * (1 + s);
    if (s < static_cast<int>(history.size())) {
      const Tensor* hp = history[static_cast<size_t>(s)];
      check_contract(hp->rank() == 3 && hp->dim(0) == c && hp->dim(1) == h && hp->dim(2) == w,
                     "temporal_concat: history raster shape mismatch");
      std::copy(hp->data(), hp->data() + hp->numel(), dst);
    }
    // missing slots stay zero
  }
  return out;
}

ad::Var temporal_concat(ad::Var current, const std::vector<ad::Var>& history, int t_hist) {
  check_contract(static_cast<int>(history.size()) <= t_hist,
                 "temporal_concat: more history than t_hist");
  const Tensor& cv = current.val();
  std::vector<ad::Var> parts{current};
  for (int s = 0; s < t_hist; ++s) {
    if (s < static_cast<int>(history.size())) {
      parts.push_back(history[static_cast<size_t>(s)]);
    } else {
      parts.push_back(current.tape->leaf(Tensor(cv.shape())));
    }
  }
  return ad::concat_ch(parts);
}

}  // namespace qbev::geom
