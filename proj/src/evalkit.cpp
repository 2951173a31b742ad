#include "quadbev/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "quadbev/error.hpp"
#include "quadbev/kernels.hpp"

namespace qbev::evalkit {

namespace {

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double wrap_to_pi(double a) {
  a = std::fmod(std::fabs(a), 2 * M_PI);
  return a > M_PI ? 2 * M_PI - a : a;
}

}  // namespace

double aa_bev_iou(const synth::Box3D& a, const synth::Box3D& b) {
  const double ax0 = a.x - a.w / 2, ax1 = a.x + a.w / 2;
  const double ay0 = a.y - a.l / 2, ay1 = a.y + a.l / 2;
  const double bx0 = b.x - b.w / 2, bx1 = b.x + b.w / 2;
  const double by0 = b.y - b.l / 2, by1 = b.y + b.l / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  const double uni = a.w * a.l + b.w * b.l - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<ScoredBox> decode_detections(const Tensor& heat_logits, const Tensor& reg,
                                         const geom::BevGridSpec& grid, double score_thresh,
                                         int max_k, double nms_iou) {
  check_contract(heat_logits.rank() == 3 && reg.rank() == 3 && reg.dim(0) == 8,
                 "decode_detections: bad shapes");
  const int cats = heat_logits.dim(0), h = heat_logits.dim(1), w = heat_logits.dim(2);
  check_contract(h == grid.h_bev() && w == grid.w_bev(), "decode_detections: grid mismatch");
  if (max_k <= 0) return {};

  struct Peak {
    double score;
    int c, i, j;
  };
  std::vector<Peak> peaks;
  for (int c = 0; c < cats; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = heat_logits.at(c, i, j);
        bool is_max = true;
        for (int di = -1; di <= 1 && is_max; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            if (di == 0 && dj == 0) continue;
            const int ni = i + di, nj = j + dj;
            if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
            if (heat_logits.at(c, ni, nj) > v) {
              is_max = false;
              break;
            }
          }
        if (!is_max) continue;
        const double score = sigmoid(v);
        if (score < score_thresh) continue;
        peaks.push_back({score, c, i, j});
      }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.c != b.c) return a.c < b.c;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  if (static_cast<int>(peaks.size()) > max_k) peaks.resize(static_cast<size_t>(max_k));

  std::vector<ScoredBox> boxes;
  for (const Peak& p : peaks) {
    synth::Box3D b;
    b.x = grid.center_x(p.j) + reg.at(0, p.i, p.j);
    b.y = grid.center_y(p.i) + reg.at(1, p.i, p.j);
    b.z = reg.at(2, p.i, p.j);
    b.w = std::exp(reg.at(3, p.i, p.j));
    b.l = std::exp(reg.at(4, p.i, p.j));
    b.h = std::exp(reg.at(5, p.i, p.j));
    b.yaw = std::atan2(reg.at(6, p.i, p.j), reg.at(7, p.i, p.j));
    b.category = p.c;
    boxes.push_back({b, p.score});
  }

  // axis-aligned BEV NMS, score descending
  std::vector<ScoredBox> kept;
  for (const ScoredBox& cand : boxes) {
    bool suppressed = false;
    for (const ScoredBox& k : kept)
      if (k.box.category == cand.box.category && aa_bev_iou(k.box, cand.box) > nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

DetectionMetrics compute_map_nds(const std::vector<std::vector<ScoredBox>>& preds_per_sample,
                                 const std::vector<std::vector<synth::Box3D>>& gts_per_sample,
                                 int n_categories) {
  check_contract(preds_per_sample.size() == gts_per_sample.size(),
                 "compute_map_nds: sample count mismatch");
  const int n_samples = static_cast<int>(preds_per_sample.size());
  DetectionMetrics out;

  struct FlatPred {
    double score;
    int sample;
    synth::Box3D box;
  };

  std::vector<double> ap_values;
  std::map<double, std::vector<double>> ap_per_threshold;
  std::vector<double> match_dist, match_ase, match_aoe;  // at the 2 m threshold

  for (int cat = 0; cat < n_categories; ++cat) {
    std::vector<FlatPred> preds;
    for (int s = 0; s < n_samples; ++s)
      for (const auto& p : preds_per_sample[static_cast<size_t>(s)])
        if (p.box.category == cat) preds.push_back({p.score, s, p.box});
    std::sort(preds.begin(), preds.end(), [](const FlatPred& a, const FlatPred& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.sample != b.sample) return a.sample < b.sample;
      return a.box.x < b.box.x;
    });
    long n_gt = 0;
    for (int s = 0; s < n_samples; ++s)
      for (const auto& g : gts_per_sample[static_cast<size_t>(s)])
        if (g.category == cat) ++n_gt;

    for (double tau : detection_thresholds()) {
      if (n_gt == 0) {
        if (!preds.empty()) {
          ap_per_threshold[tau].push_back(0.0);
          ap_values.push_back(0.0);
        }
        continue;  // both empty: undefined, excluded from the mean
      }
      std::vector<std::vector<char>> used(static_cast<size_t>(n_samples));
      for (int s = 0; s < n_samples; ++s)
        used[static_cast<size_t>(s)].assign(gts_per_sample[static_cast<size_t>(s)].size(), 0);

      std::vector<char> is_tp(preds.size(), 0);
      for (size_t pi = 0; pi < preds.size(); ++pi) {
        const auto& p = preds[pi];
        const auto& gts = gts_per_sample[static_cast<size_t>(p.sample)];
        int best = -1;
        double best_d = tau;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
          if (gts[gi].category != cat || used[static_cast<size_t>(p.sample)][gi]) continue;
          const double d = std::hypot(p.box.x - gts[gi].x, p.box.y - gts[gi].y);
          if (d <= best_d) {
            best_d = d;
            best = static_cast<int>(gi);
          }
        }
        if (best >= 0) {
          used[static_cast<size_t>(p.sample)][static_cast<size_t>(best)] = 1;
          is_tp[pi] = 1;
          if (tau == 2.0) {
            const auto& g = gts[static_cast<size_t>(best)];
            match_dist.push_back(best_d);
            const double inter = std::min(p.box.w, g.w) * std::min(p.box.l, g.l) *
                                 std::min(p.box.h, g.h);
            const double uni =
                p.box.w * p.box.l * p.box.h + g.w * g.l * g.h - inter;
            match_ase.push_back(1.0 - (uni > 0 ? inter / uni : 0.0));
            match_aoe.push_back(wrap_to_pi(p.box.yaw - g.yaw));
          }
        }
      }
      // precision envelope over the 91-point recall grid r >= 0.1
      std::vector<double> recall, precision;
      long tp = 0, fp = 0;
      for (size_t pi = 0; pi < preds.size(); ++pi) {
        if (is_tp[pi])
          ++tp;
        else
          ++fp;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      }
      double ap = 0;
      int points = 0;
      for (int ri = 10; ri <= 100; ++ri) {
        const double r = ri / 100.0;
        double best_p = 0;
        for (size_t k = 0; k < recall.size(); ++k)
          if (recall[k] >= r - 1e-12) best_p = std::max(best_p, precision[k]);
        ap += best_p;
        ++points;
      }
      ap /= points;
      ap_per_threshold[tau].push_back(ap);
      ap_values.push_back(ap);
    }
  }

  if (!ap_values.empty())
    out.map = std::accumulate(ap_values.begin(), ap_values.end(), 0.0) /
              static_cast<double>(ap_values.size());
  for (const auto& [tau, aps] : ap_per_threshold)
    out.ap_by_threshold[tau] =
        std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
  if (out.ap_by_threshold.count(2.0)) out.map_at_2m = out.ap_by_threshold.at(2.0);

  auto mean_or_worst = [](const std::vector<double>& v) {
    return v.empty() ? 1.0
                     : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  out.mate = mean_or_worst(match_dist);
  out.mase = mean_or_worst(match_ase);
  out.maoe = mean_or_worst(match_aoe);
  const double tp_terms = (1.0 - std::min(1.0, out.mate)) + (1.0 - std::min(1.0, out.mase)) +
                          (1.0 - std::min(1.0, out.maoe));
  out.nds_desk = (5.0 * out.map + tp_terms) / 8.0;
  return out;
}

MapMetrics map_iou(const std::vector<Tensor>& logits, const std::vector<Tensor>& masks) {
  check_contract(logits.size() == masks.size() && !logits.empty(),
                 "map_iou: sample count mismatch");
  const int cats = logits[0].dim(0);
  std::vector<long> inter(static_cast<size_t>(cats), 0), uni(static_cast<size_t>(cats), 0);
  for (size_t s = 0; s < logits.size(); ++s) {
    const Tensor& lg = logits[s];
    const Tensor& mk = masks[s];
    check_contract(lg.same_shape(mk), "map_iou: shape mismatch");
    const long hw = lg.numel() / cats;
    for (int c = 0; c < cats; ++c)
      for (long i = 0; i < hw; ++i) {
        const bool p = lg[c * hw + i] >= 0.0;  // sigmoid >= 0.5
        const bool g = mk[c * hw + i] != 0.0;
        inter[static_cast<size_t>(c)] += p && g;
        uni[static_cast<size_t>(c)] += p || g;
      }
  }
  MapMetrics out;
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < cats; ++c) {
    if (uni[static_cast<size_t>(c)] == 0) {
      out.iou_per_cat.push_back(-1.0);
      continue;
    }
    const double iou = static_cast<double>(inter[static_cast<size_t>(c)]) /
                       static_cast<double>(uni[static_cast<size_t>(c)]);
    out.iou_per_cat.push_back(iou);
    sum += iou;
    ++counted;
  }
  out.miou = counted ? sum / counted : 0.0;
  return out;
}

std::vector<DecodedLane> decode_lanes(const Tensor& conf_logits, const Tensor& offset,
                                      const Tensor& embed, const Tensor& cls_logits,
                                      const geom::BevGridSpec& grid, double conf_thresh,
                                      double cluster_dist, int min_cells) {
  const int h = grid.h_bev(), w = grid.w_bev();
  const int e_dim = embed.dim(0);
  const int n_cls = cls_logits.dim(0);
  const long hw = static_cast<long>(h) * w;

  // greedy agglomeration over confident cells in row-major order
  struct Cluster {
    std::vector<int> cells;
    std::vector<double> mean;  // running embedding mean
    double score_sum = 0;
  };
  std::vector<Cluster> clusters;
  for (long cell = 0; cell < hw; ++cell) {
    const double score = sigmoid(conf_logits[cell]);
    if (score < conf_thresh) continue;
    std::vector<double> e(static_cast<size_t>(e_dim));
    for (int d = 0; d < e_dim; ++d) e[static_cast<size_t>(d)] = embed[d * hw + cell];
    int best = -1;
    double best_d = cluster_dist;
    for (size_t ci = 0; ci < clusters.size(); ++ci) {
      double d2 = 0;
      for (int d = 0; d < e_dim; ++d) {
        const double diff = e[static_cast<size_t>(d)] - clusters[ci].mean[static_cast<size_t>(d)];
        d2 += diff * diff;
      }
      const double dist = std::sqrt(d2);
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(ci);
      }
    }
    if (best < 0) {
      clusters.push_back({{static_cast<int>(cell)}, e, score});
    } else {
      Cluster& c = clusters[static_cast<size_t>(best)];
      const double n_old = static_cast<double>(c.cells.size());
      for (int d = 0; d < e_dim; ++d)
        c.mean[static_cast<size_t>(d)] =
            (c.mean[static_cast<size_t>(d)] * n_old + e[static_cast<size_t>(d)]) / (n_old + 1);
      c.cells.push_back(static_cast<int>(cell));
      c.score_sum += score;
    }
  }

  std::vector<DecodedLane> lanes;
  for (const Cluster& c : clusters) {
    if (static_cast<int>(c.cells.size()) < min_cells) continue;
    // principal axis of the cell centers
    double mx = 0, my = 0;
    for (int cell : c.cells) {
      mx += grid.center_x(cell % w);
      my += grid.center_y(cell / w);
    }
    mx /= static_cast<double>(c.cells.size());
    my /= static_cast<double>(c.cells.size());
    double sxx = 0, sxy = 0, syy = 0;
    for (int cell : c.cells) {
      const double dx = grid.center_x(cell % w) - mx;
      const double dy = grid.center_y(cell / w) - my;
      sxx += dx * dx;
      sxy += dx * dy;
      syy += dy * dy;
    }
    // leading eigenvector of the 2x2 covariance
    const double tr = sxx + syy, det = sxx * syy - sxy * sxy;
    const double lam = tr / 2 + std::sqrt(std::max(0.0, tr * tr / 4 - det));
    double tx, ty;
    if (std::fabs(sxy) > 1e-12) {
      tx = lam - syy;
      ty = sxy;
    } else {
      tx = sxx >= syy ? 1 : 0;
      ty = sxx >= syy ? 0 : 1;
    }
    const double tn = std::hypot(tx, ty);
    tx /= tn;
    ty /= tn;
    double nx, ny;
    synth::canonical_perp(tx, ty, nx, ny);

    struct Pt {
      double proj;
      std::array<double, 2> p;
    };
    std::vector<Pt> pts;
    for (int cell : c.cells) {
      const double cx = grid.center_x(cell % w);
      const double cy = grid.center_y(cell / w);
      const double off = offset[cell] * grid.cell_size;
      const std::array<double, 2> p{cx + off * nx, cy + off * ny};
      pts.push_back({(p[0] - mx) * tx + (p[1] - my) * ty, p});
    }
    std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) { return a.proj < b.proj; });

    DecodedLane lane;
    for (const Pt& p : pts) lane.points.push_back(p.p);
    lane.score = c.score_sum / static_cast<double>(c.cells.size());
    // majority class vote over the cluster cells
    std::vector<int> votes(static_cast<size_t>(n_cls), 0);
    for (int cell : c.cells) {
      int arg = 0;
      for (int k = 1; k < n_cls; ++k)
        if (cls_logits[k * hw + cell] > cls_logits[arg * hw + cell]) arg = k;
      ++votes[static_cast<size_t>(arg)];
    }
    lane.category = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

namespace {

double point_to_polyline_dist(double px, double py,
                              const std::vector<std::array<double, 2>>& poly) {
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < poly.size(); ++i) {
    const double ax = poly[i][0], ay = poly[i][1];
    const double ex = poly[i + 1][0] - ax, ey = poly[i + 1][1] - ay;
    const double len2 = ex * ex + ey * ey;
    double u = len2 > 0 ? ((px - ax) * ex + (py - ay) * ey) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    best = std::min(best, std::hypot(px - (ax + u * ex), py - (ay + u * ey)));
  }
  if (poly.size() == 1) best = std::hypot(px - poly[0][0], py - poly[0][1]);
  return best;
}

std::vector<std::array<double, 2>> resample_polyline(
    const std::vector<std::array<double, 2>>& poly, double step) {
  std::vector<std::array<double, 2>> out;
  if (poly.empty()) return out;
  out.push_back(poly[0]);
  double carry = 0;
  for (size_t i = 0; i + 1 < poly.size(); ++i) {
    const double ax = poly[i][0], ay = poly[i][1];
    const double ex = poly[i + 1][0] - ax, ey = poly[i + 1][1] - ay;
    const double len = std::hypot(ex, ey);
    if (len == 0) continue;
    double t = step - carry;
    while (t <= len) {
      out.push_back({ax + ex * t / len, ay + ey * t / len});
      t += step;
    }
    carry = len - (t - step);
  }
  return out;
}

}  // namespace

LaneMetrics lane_fscore(const std::vector<std::vector<DecodedLane>>& preds_per_sample,
                        const std::vector<std::vector<synth::LanePolyline>>& gts_per_sample,
                        double tol_m, double coverage) {
  check_contract(preds_per_sample.size() == gts_per_sample.size(),
                 "lane_fscore: sample count mismatch");
  long tp = 0, n_pred = 0, n_gt = 0;
  for (size_t s = 0; s < preds_per_sample.size(); ++s) {
    const auto& gts = gts_per_sample[s];
    n_gt += static_cast<long>(gts.size());
    // predictions in confidence order
    std::vector<int> order(preds_per_sample[s].size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return preds_per_sample[s][static_cast<size_t>(a)].score >
             preds_per_sample[s][static_cast<size_t>(b)].score;
    });
    std::vector<char> used(gts.size(), 0);
    for (int pi : order) {
      const DecodedLane& pred = preds_per_sample[s][static_cast<size_t>(pi)];
      ++n_pred;
      const auto samples = resample_polyline(pred.points, 0.25);
      if (samples.empty()) continue;
      int best_gt = -1;
      double best_cov = coverage;
      for (size_t gi = 0; gi < gts.size(); ++gi) {
        if (used[gi]) continue;
        long close = 0;
        for (const auto& p : samples)
          if (point_to_polyline_dist(p[0], p[1], gts[gi].points) <= tol_m) ++close;
        const double cov = static_cast<double>(close) / static_cast<double>(samples.size());
        if (cov >= best_cov) {
          best_cov = cov;
          best_gt = static_cast<int>(gi);
        }
      }
      if (best_gt >= 0) {
        used[static_cast<size_t>(best_gt)] = 1;
        ++tp;
      }
    }
  }
  LaneMetrics out;
  out.precision = n_pred ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  out.recall = n_gt ? static_cast<double>(tp) / static_cast<double>(n_gt) : 0.0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

OccMetrics occ_miou(const std::vector<Tensor>& occ_logits, const std::vector<Tensor>& occ_grids,
                    int c_occ_total) {
  check_contract(occ_logits.size() == occ_grids.size() && !occ_logits.empty(),
                 "occ_miou: sample count mismatch");
  std::vector<long> inter(static_cast<size_t>(c_occ_total), 0),
      uni(static_cast<size_t>(c_occ_total), 0);
  for (size_t s = 0; s < occ_logits.size(); ++s) {
    const Tensor& lg = occ_logits[s];
    const Tensor& gt = occ_grids[s];
    const int h = gt.dim(0), w = gt.dim(1), nz = gt.dim(2);
    check_contract(lg.rank() == 3 && lg.dim(0) == nz * c_occ_total && lg.dim(1) == h &&
                       lg.dim(2) == w,
                   "occ_miou: logits shape mismatch");
    const long hw = static_cast<long>(h) * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const long cell = static_cast<long>(i) * w + j;
        for (int k = 0; k < nz; ++k) {
          int arg = 0;
          for (int c = 1; c < c_occ_total; ++c)
            if (lg[static_cast<long>(occ_channel(k, c, c_occ_total)) * hw + cell] >
                lg[static_cast<long>(occ_channel(k, arg, c_occ_total)) * hw + cell])
              arg = c;
          const int label = static_cast<int>(gt.at(i, j, k));
          if (arg == label) ++inter[static_cast<size_t>(arg)];
          if (arg == label) {
            ++uni[static_cast<size_t>(arg)];
          } else {
            ++uni[static_cast<size_t>(arg)];
            ++uni[static_cast<size_t>(label)];
          }
        }
      }
  }
  OccMetrics out;
  double sum = 0;
  int counted = 0;
  const int free_idx = c_occ_total - 1;
  for (int c = 0; c < c_occ_total; ++c) {
    if (uni[static_cast<size_t>(c)] == 0) {
      out.iou_per_cat.push_back(-1.0);
      continue;
    }
    const double iou = static_cast<double>(inter[static_cast<size_t>(c)]) /
                       static_cast<double>(uni[static_cast<size_t>(c)]);
    out.iou_per_cat.push_back(iou);
    if (c != free_idx) {
      sum += iou;
      ++counted;
    }
  }
  out.miou = counted ? sum / counted : 0.0;
  return out;
}

DiscountFactor discount_factor(const std::vector<double>& multi,
                               const std::vector<double>& base) {
  check_contract(multi.size() == base.size() && !multi.empty(),
                 "discount_factor: score count mismatch");
  DiscountFactor out;
  for (size_t i = 0; i < multi.size(); ++i) {
    check_contract(base[i] > 0, "discount_factor: baseline scores must be positive");
    out.ratios.push_back(multi[i] / base[i]);
    out.cumulative *= out.ratios.back();
  }
  return out;
}

double EfficiencyReport::mac_ratio() const {
  uint64_t s = 0;
  for (uint64_t v : single_macs) s += v;
  return s ? static_cast<double>(quad_macs) / static_cast<double>(s) : 0.0;
}

double EfficiencyReport::latency_ratio() const {
  return baseline_latency_ms > 0 ? quad_latency_ms / baseline_latency_ms : 0.0;
}

std::string EfficiencyReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "mode,macs,latency_ms,latency_sd_ms\n";
  os << "quad," << quad_macs << "," << quad_latency_ms << "," << quad_latency_sd << "\n";
  uint64_t total = 0;
  for (int t = 0; t < nets::kNumTasks; ++t) {
    os << "single_" << nets::task_name(static_cast<nets::Task>(t)) << ","
       << single_macs[static_cast<size_t>(t)] << ",,\n";
    total += single_macs[static_cast<size_t>(t)];
  }
  os << "baselines_total," << total << "," << baseline_latency_ms << ","
     << baseline_latency_sd << "\n";
  os << "ratio," << mac_ratio() << "," << latency_ratio() << ",\n";
  return os.str();
}

EfficiencyReport efficiency_benchmark(nets::QuadModel& model, const synth::Sample& sample,
                                      int repeats, int warmup) {
  check_contract(repeats >= 1, "efficiency_benchmark: need at least one repeat");
  EfficiencyReport rep;
  rep.repeats = repeats;
  rep.quad_macs = nets::flops_count_quad(model.config()).total();
  for (int t = 0; t < nets::kNumTasks; ++t)
    rep.single_macs[static_cast<size_t>(t)] =
        nets::flops_count_single(model.config(), static_cast<nets::Task>(t)).total();

  const auto saved_impl = kern::impl();
  kern::impl() = kern::Impl::serial;  // pinned-order single-thread timing
  const bool saved_mode = model.train_mode();
  model.set_train_mode(false);

  using Clock = std::chrono::steady_clock;
  auto time_once = [&](const std::function<void()>& fn) {
    const auto t0 = Clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  auto quad_pass = [&] {
    ad::Tape tape;
    model.begin_step(tape);
    model.forward(tape, sample, {});
  };
  auto baseline_pass = [&] {
    for (int t = 0; t < nets::kNumTasks; ++t) {
      std::array<bool, nets::kNumTasks> mask{};
      mask[static_cast<size_t>(t)] = true;
      ad::Tape tape;
      model.begin_step(tape);
      model.forward(tape, sample, {}, mask);
    }
  };

  for (int i = 0; i < warmup; ++i) {
    quad_pass();
    baseline_pass();
  }
  std::vector<double> quad_ms, base_ms;
  for (int i = 0; i < repeats; ++i) {
    quad_ms.push_back(time_once(quad_pass));
    base_ms.push_back(time_once(baseline_pass));
  }
  auto mean_sd = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  };
  mean_sd(quad_ms, rep.quad_latency_ms, rep.quad_latency_sd);
  mean_sd(base_ms, rep.baseline_latency_ms, rep.baseline_latency_sd);

  kern::impl() = saved_impl;
  model.set_train_mode(saved_mode);
  return rep;
}

double EvalSummary::combined_score() const {
  double sum = 0;
  int n = 0;
  if (evaluated[0]) {
    sum += det.map;
    ++n;
  }
  if (evaluated[1]) {
    sum += map.miou;
    ++n;
  }
  if (evaluated[2]) {
    sum += lane.f1;
    ++n;
  }
  if (evaluated[3]) {
    sum += occ.miou;
    ++n;
  }
  return n ? sum / n : 0.0;
}

std::string EvalSummary::text_report() const {
  std::ostringstream os;
  os.precision(4);
  if (evaluated[0]) {
    os << "[det]\n  mAP: " << det.map << "\n  mAP@2m: " << det.map_at_2m
       << "\n  NDS_desk: " << det.nds_desk << "\n  mATE: " << det.mate
       << "\n  mASE: " << det.mase << "\n  mAOE: " << det.maoe << "\n";
    for (const auto& [tau, ap] : det.ap_by_threshold) os << "  AP@" << tau << "m: " << ap << "\n";
  }
  if (evaluated[1]) {
    os << "[map]\n  mIoU: " << map.miou << "\n";
    for (size_t c = 0; c < map.iou_per_cat.size(); ++c)
      os << "  iou_" << c << ": " << map.iou_per_cat[c] << "\n";
  }
  if (evaluated[2]) {
    os << "[lane]\n  precision: " << lane.precision << "\n  recall: " << lane.recall
       << "\n  f1: " << lane.f1 << "\n";
  }
  if (evaluated[3]) {
    os << "[occ]\n  mIoU: " << occ.miou << "\n";
    for (size_t c = 0; c < occ.iou_per_cat.size(); ++c)
      os << "  iou_" << c << ": " << occ.iou_per_cat[c] << "\n";
  }
  os << "[combined]\n  score: " << combined_score() << "\n";
  return os.str();
}

std::string EvalSummary::csv_report() const {
  std::ostringstream os;
  os.precision(10);
  os << "metric,value\n";
  if (evaluated[0]) {
    os << "det_map," << det.map << "\n";
    os << "det_map_2m," << det.map_at_2m << "\n";
    os << "det_nds_desk," << det.nds_desk << "\n";
    os << "det_mate," << det.mate << "\n";
    os << "det_mase," << det.mase << "\n";
    os << "det_maoe," << det.maoe << "\n";
  }
  if (evaluated[1]) os << "map_miou," << map.miou << "\n";
  if (evaluated[2]) {
    os << "lane_precision," << lane.precision << "\n";
    os << "lane_recall," << lane.recall << "\n";
    os << "lane_f1," << lane.f1 << "\n";
  }
  if (evaluated[3]) os << "occ_miou," << occ.miou << "\n";
  os << "combined," << combined_score() << "\n";
  return os.str();
}

EvalSummary evaluate_model(nets::QuadModel& model, const synth::DatasetReader& data,
                           const std::vector<int>& indices,
                           const std::array<bool, nets::kNumTasks>& tasks, bool oracle_mode) {
  EvalSummary out;
  out.evaluated = tasks;
  const auto& cfg = model.config();

  std::vector<std::vector<ScoredBox>> det_preds;
  std::vector<std::vector<synth::Box3D>> det_gts;
  std::vector<Tensor> map_logits, map_gts;
  std::vector<std::vector<DecodedLane>> lane_preds;
  std::vector<std::vector<synth::LanePolyline>> lane_gts;
  std::vector<Tensor> occ_logits, occ_gts;

  const bool saved_mode = model.train_mode();
  model.set_train_mode(false);
  for (int idx : indices) {
    auto [sample, gt] = data.load(idx);

    Tensor det_heat, det_reg, map_lg, lane_conf, lane_off, lane_emb, lane_cls, occ_lg;
    if (oracle_mode) {
      auto inflate = [](const Tensor& t) {
        Tensor out2 = t;
        for (long i = 0; i < out2.numel(); ++i) out2[i] = (out2[i] - 0.5) * 24.0;
        return out2;
      };
      det_heat = inflate(gt.det_heatmap);
      det_reg = gt.det_reg;
      map_lg = inflate(gt.map_masks);
      lane_conf = inflate(gt.lane_conf);
      lane_off = gt.lane_offset;
      // well-separated synthetic embeddings per instance id
      lane_emb = Tensor({cfg.embed_dim, cfg.grid.h_bev(), cfg.grid.w_bev()});
      const long hw = static_cast<long>(cfg.grid.h_bev()) * cfg.grid.w_bev();
      for (long i = 0; i < hw; ++i)
        if (gt.lane_embed_id[i] >= 0) lane_emb[i] = (gt.lane_embed_id[i] + 1.0) * losses::kPushMargin;
      lane_cls = Tensor({cfg.c_lane_cls, cfg.grid.h_bev(), cfg.grid.w_bev()});
      for (long i = 0; i < hw; ++i)
        if (gt.lane_class[i] >= 0)
          lane_cls[static_cast<long>(gt.lane_class[i]) * hw + i] = 24.0;
      occ_lg = Tensor({cfg.grid.n_z * cfg.c_occ_total(), cfg.grid.h_bev(), cfg.grid.w_bev()});
      for (int i = 0; i < cfg.grid.h_bev(); ++i)
        for (int j = 0; j < cfg.grid.w_bev(); ++j)
          for (int k = 0; k < cfg.grid.n_z; ++k)
            occ_lg[static_cast<long>(occ_channel(k, static_cast<int>(gt.occ_grid.at(i, j, k)),
                                                 cfg.c_occ_total())) *
                       hw +
                   i * cfg.grid.w_bev() + j] = 24.0;
    } else {
      std::vector<nets::HistoryFrame> history;
      for (int hidx : data.history_indices(idx, cfg.t_hist)) {
        auto [hs, hgt] = data.load(hidx);
        history.push_back({model.raw_pooled_bev(hs), hs.ego_pose});
      }
      ad::Tape tape;
      model.begin_step(tape);
      nets::ForwardOut fwd = model.forward(tape, sample, history, tasks);
      if (tasks[0]) {
        det_heat = fwd.heads.det_heatmap.val();
        det_reg = fwd.heads.det_reg.val();
      }
      if (tasks[1]) map_lg = fwd.heads.map_logits.val();
      if (tasks[2]) {
        lane_conf = fwd.heads.lane_conf.val();
        lane_off = fwd.heads.lane_offset.val();
        lane_emb = fwd.heads.lane_embed.val();
        lane_cls = fwd.heads.lane_cls.val();
      }
      if (tasks[3]) occ_lg = fwd.heads.occ_logits.val();
    }

    if (tasks[0]) {
      det_preds.push_back(decode_detections(det_heat, det_reg, cfg.grid));
      det_gts.push_back(synth::boxes_in_grid(sample.world_ref, cfg.grid));
    }
    if (tasks[1]) {
      map_logits.push_back(map_lg);
      map_gts.push_back(gt.map_masks);
    }
    if (tasks[2]) {
      lane_preds.push_back(decode_lanes(lane_conf, lane_off, lane_emb, lane_cls, cfg.grid));
      lane_gts.push_back(sample.world_ref.lanes);
    }
    if (tasks[3]) {
      occ_logits.push_back(occ_lg);
      occ_gts.push_back(gt.occ_grid);
    }
  }
  model.set_train_mode(saved_mode);

  if (tasks[0]) out.det = compute_map_nds(det_preds, det_gts, cfg.c_det);
  if (tasks[1]) out.map = map_iou(map_logits, map_gts);
  if (tasks[2]) out.lane = lane_fscore(lane_preds, lane_gts);
  if (tasks[3]) out.occ = occ_miou(occ_logits, occ_gts, cfg.c_occ_total());
  return out;
}

}  // namespace qbev::evalkit
