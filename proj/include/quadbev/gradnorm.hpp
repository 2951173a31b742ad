#pragma once

#include <vector>

#include "quadbev/losses.hpp"

namespace qbev::losses {

// Dynamic loss weighting: per-task weights adapt so the shared-layer
// gradient norms track targets set by relative training rates. The task set
// covers the five weighted components of the combined loss (depth included
// by default; include_depth=false drops it to four tasks).
struct GradNormState {
  int n_tasks = kNumComponents;
  std::vector<double> w;   // sums to n_tasks after every update
  std::vector<double> l0;  // initial losses L_i(0)
  bool l0_set = false;
  double a_gn = 1.5;
  double lr_w = 0.025;
  bool include_depth = true;
  std::vector<uint8_t> l0_fallback;  // set where L_i(0) <= 0 was replaced by 1

  static GradNormState make(int n_tasks = kNumComponents, double a_gn = 1.5,
                            double lr_w = 0.025);
  double weight_sum() const;
};

struct GradNormInfo {
  bool l0_fallback_warn = false;  // some L_i(0) <= 0 fell back to 1.0
};

// One GradNorm step: relative inverse rates r_i = (L_i/L_i(0)) / mean,
// targets mean(G) * r_i^a treated as constants, sign-consistent weight
// update, clamp at 1e-4, renormalize to sum n_tasks.
GradNormInfo gradnorm_update(GradNormState& state, const std::vector<double>& losses,
                             const std::vector<double>& grad_norms);

}  // namespace qbev::losses
