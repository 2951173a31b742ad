#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quadbev/dataset.hpp"
#include "quadbev/losses.hpp"
#include "quadbev/model.hpp"

namespace qbev::evalkit {

struct ScoredBox {
  synth::Box3D box;
  double score = 0;
};

// Peak picking (3x3 local maxima on the sigmoid heatmap), top-k by score,
// regression decode, then axis-aligned BEV NMS at the given IoU.
std::vector<ScoredBox> decode_detections(const Tensor& heat_logits, const Tensor& reg,
                                         const geom::BevGridSpec& grid,
                                         double score_thresh = 0.3, int max_k = 64,
                                         double nms_iou = 0.5);

double aa_bev_iou(const synth::Box3D& a, const synth::Box3D& b);

struct DetectionMetrics {
  double map = 0;       // mean AP over categories and distance thresholds
  double map_at_2m = 0;
  double mate = 1, mase = 1, maoe = 1;
  double nds_desk = 0;
  std::map<double, double> ap_by_threshold;
};

inline const std::vector<double>& detection_thresholds() {
  static const std::vector<double> t{0.5, 1.0, 2.0, 4.0};
  return t;
}

DetectionMetrics compute_map_nds(const std::vector<std::vector<ScoredBox>>& preds_per_sample,
                                 const std::vector<std::vector<synth::Box3D>>& gts_per_sample,
                                 int n_categories);

struct MapMetrics {
  std::vector<double> iou_per_cat;  // -1 when the union is empty
  double miou = 0;
};
MapMetrics map_iou(const std::vector<Tensor>& logits, const std::vector<Tensor>& masks);

struct DecodedLane {
  std::vector<std::array<double, 2>> points;
  int category = 0;
  double score = 0;
};

std::vector<DecodedLane> decode_lanes(const Tensor& conf_logits, const Tensor& offset,
                                      const Tensor& embed, const Tensor& cls_logits,
                                      const geom::BevGridSpec& grid, double conf_thresh = 0.5,
                                      double cluster_dist = losses::kPushMargin / 2,
                                      int min_cells = 3);

struct LaneMetrics {
  double precision = 0, recall = 0, f1 = 0;
};
LaneMetrics lane_fscore(const std::vector<std::vector<DecodedLane>>& preds_per_sample,
                        const std::vector<std::vector<synth::LanePolyline>>& gts_per_sample,
                        double tol_m = 0.5, double coverage = 0.75);

struct OccMetrics {
  std::vector<double> iou_per_cat;  // all categories incl. free; -1 when union empty
  double miou = 0;                  // free excluded
};
OccMetrics occ_miou(const std::vector<Tensor>& occ_logits, const std::vector<Tensor>& occ_grids,
                    int c_occ_total);

// channel layout of the occupancy head: layer k, class c
inline int occ_channel(int k, int c, int c_occ_total) { return k * c_occ_total + c; }

struct DiscountFactor {
  std::vector<double> ratios;
  double cumulative = 1.0;
};
DiscountFactor discount_factor(const std::vector<double>& multi, const std::vector<double>& base);

struct EfficiencyReport {
  uint64_t quad_macs = 0;
  std::array<uint64_t, nets::kNumTasks> single_macs{};
  double quad_latency_ms = 0, quad_latency_sd = 0;
  double baseline_latency_ms = 0, baseline_latency_sd = 0;  // 4 single-task passes
  int repeats = 0;
  double mac_ratio() const;
  double latency_ratio() const;
  std::string to_csv() const;
};

// Wall-clock runs serial single-threaded for stability; warm-up iterations
// are excluded.
EfficiencyReport efficiency_benchmark(nets::QuadModel& model, const synth::Sample& sample,
                                      int repeats, int warmup = 2);

// ---- whole-model evaluation -------------------------------------------------

struct EvalSummary {
  DetectionMetrics det;
  MapMetrics map;
  LaneMetrics lane;
  OccMetrics occ;
  std::array<bool, nets::kNumTasks> evaluated{};
  // mean of (mAP, map mIoU, lane F1, occ mIoU) over evaluated tasks
  double combined_score() const;
  std::string text_report() const;
  std::string csv_report() const;
};

// Runs the model (eval mode) over the given record indices and computes all
// requested metrics against the stored ground truth. When oracle_mode is
// set, logit-inflated ground-truth rasters stand in for the model outputs.
EvalSummary evaluate_model(nets::QuadModel& model, const synth::DatasetReader& data,
                           const std::vector<int>& indices,
                           const std::array<bool, nets::kNumTasks>& tasks,
                           bool oracle_mode = false);

}  // namespace qbev::evalkit
