#pragma once

#include <array>
#include <string>
#include <vector>

#include "quadbev/sample.hpp"
#include "quadbev/tape.hpp"

namespace qbev::losses {

struct DetLambdas {
  double cls = 1, reg = 1, iou = 1;
};
struct LaneLambdas {
  double conf = 1, offset = 1, emb = 1, cls = 1;
};

// Fixed weights of the combined loss (components ordered det, map, lane,
// occ, depth) plus the inner lambdas.
struct LossWeights {
  double alpha = 1, beta = 1, gamma = 1, delta = 1, epsilon = 1;
  DetLambdas det;
  LaneLambdas lane;
  std::array<double, 5> as_array() const { return {alpha, beta, gamma, delta, epsilon}; }
};

inline constexpr int kNumComponents = 5;  // det, map, lane, occ, depth
inline constexpr double kPushMargin = 3.0;

// ---- fused scalar ops (exposed for direct testing) ------------------------

// mean over selected elements of softplus(x) - t*x; select=nullptr means all
ad::Var bce_logits_mean(ad::Var logits, const Tensor& targets,
                        const std::vector<char>* select = nullptr);
// binary focal loss from logits; alpha weights the positive term only, so
// gamma=0, alpha=1 reduces to plain BCE
ad::Var focal_logits_mean(ad::Var logits, const Tensor& targets, double alpha, double gamma);
ad::Var l1_mean(ad::Var x, const Tensor& target);
ad::Var mse_mean(ad::Var x, const Tensor& target);
// columns of (K, M) logits vs integer labels, mean cross-entropy
ad::Var ce_cols_mean(ad::Var logits, const std::vector<int>& labels);
// (n_z*C, H, W) logits vs (H, W, n_z) integer grid; channel k*C+c holds
// voxel layer k, class c
ad::Var occ_ce_mean(ad::Var logits, const Tensor& occ_grid, int c_occ_total);

// ---- task losses -----------------------------------------------------------

struct DetLossParts {
  ad::Var total, cls, reg, iou;
};
DetLossParts detection_loss(ad::Tape& tape, ad::Var heat_logits, ad::Var reg,
                            const synth::GtRasters& gt, const geom::BevGridSpec& grid,
                            const DetLambdas& lambdas);

ad::Var map_loss(ad::Tape& tape, ad::Var logits, const Tensor& map_masks, double alpha = 0.25,
                 double gamma = 2.0);

struct LaneLossParts {
  ad::Var total, conf, offset, emb, cls;
};
LaneLossParts lane_loss(ad::Tape& tape, ad::Var conf, ad::Var offset, ad::Var embed,
                        ad::Var cls, const synth::GtRasters& gt, const LaneLambdas& lambdas,
                        double m_push = kPushMargin);

ad::Var occ_loss(ad::Tape& tape, ad::Var occ_logits, const Tensor& occ_grid, int c_occ_total);

struct DepthLossOut {
  ad::Var loss;
  bool any_valid = false;
};
DepthLossOut depth_loss(ad::Tape& tape, ad::Var depth_logits,
                        const std::vector<Tensor>& depth_bins);

// ---- combination -----------------------------------------------------------

// One CSV row per training step.
struct LossReport {
  long step = 0;
  std::array<double, kNumComponents> raw{};
  std::array<double, kNumComponents> weights{};
  double combined = 0;
  std::array<double, kNumComponents> gnorm{};
  bool depth_valid = true;
  bool l0_fallback = false;

  static std::string csv_header();
  std::string csv_row() const;
};

struct CombineOut {
  ad::Var combined;
  std::array<ad::Var, kNumComponents> weighted;  // w_i * L_i nodes (invalid when part absent)
  LossReport report;
};

// parts may contain invalid Vars (disabled components); they contribute 0.
CombineOut combine(ad::Tape& tape, const std::array<ad::Var, kNumComponents>& parts,
                   const std::array<double, kNumComponents>& weights);

}  // namespace qbev::losses
