#include "quadbev/gradnorm.hpp"

#include <algorithm>
#include <cmath>

#include "quadbev/error.hpp"

namespace qbev::losses {

namespace {
constexpr double kWeightFloor = 1e-4;

// Scale weights to sum n, re-flooring anything the scaling pushed below the
// clamp and redistributing the remainder. Terminates because the floored set
// only grows.
void renormalize(std::vector<double>& w, double target_sum) {
  std::vector<char> floored(w.size(), 0);
  for (int pass = 0; pass < static_cast<int>(w.size()) + 1; ++pass) {
    double fixed = 0;
    double rest = 0;
    for (size_t i = 0; i < w.size(); ++i) {
      if (floored[i])
        fixed += w[i];
      else
        rest += w[i];
    }
    if (rest <= 0) break;
    const double scale = (target_sum - fixed) / rest;
    bool changed = false;
    for (size_t i = 0; i < w.size(); ++i) {
      if (floored[i]) continue;
      w[i] *= scale;
      if (w[i] < kWeightFloor) {
        w[i] = kWeightFloor;
        floored[i] = 1;
        changed = true;
      }
    }
    if (!changed) break;
  }
}

}  // namespace

GradNormState GradNormState::make(int n_tasks, double a_gn, double lr_w) {
  GradNormState s;
  s.n_tasks = n_tasks;
  s.w.assign(static_cast<size_t>(n_tasks), 1.0);
  s.l0.assign(static_cast<size_t>(n_tasks), 1.0);
  s.l0_fallback.assign(static_cast<size_t>(n_tasks), 0);
  s.a_gn = a_gn;
  s.lr_w = lr_w;
  return s;
}

double GradNormState::weight_sum() const {
  double s = 0;
  for (double v : w) s += v;
  return s;
}

GradNormInfo gradnorm_update(GradNormState& state, const std::vector<double>& losses,
                             const std::vector<double>& grad_norms) {
  const size_t n = static_cast<size_t>(state.n_tasks);
  check_contract(losses.size() == n && grad_norms.size() == n,
                 "gradnorm_update: task count mismatch");
  GradNormInfo info;

  if (!state.l0_set) {
    for (size_t i = 0; i < n; ++i) {
      if (losses[i] > 0) {
        state.l0[i] = losses[i];
      } else {
        state.l0[i] = 1.0;
        state.l0_fallback[i] = 1;
        info.l0_fallback_warn = true;
      }
    }
    state.l0_set = true;
  }

  std::vector<double> rate(n);
  double rate_mean = 0;
  for (size_t i = 0; i < n; ++i) {
    rate[i] = losses[i] / state.l0[i];
    rate_mean += rate[i];
  }
  rate_mean /= static_cast<double>(n);
  if (rate_mean <= 0) rate_mean = 1.0;

  double g_mean = 0;
  for (double g : grad_norms) g_mean += g;
  g_mean /= static_cast<double>(n);

  for (size_t i = 0; i < n; ++i) {
    const double r = rate[i] / rate_mean;
    const double target = g_mean * std::pow(std::max(r, 0.0), state.a_gn);
    // G_i = w_i * ||dL_i/dtheta_ref||, so dG_i/dw_i = G_i / w_i
    const double dgi_dwi = grad_norms[i] / std::max(state.w[i], kWeightFloor);
    const double sign = grad_norms[i] > target ? 1.0 : (grad_norms[i] < target ? -1.0 : 0.0);
    state.w[i] -= state.lr_w * sign * dgi_dwi;
    state.w[i] = std::max(state.w[i], kWeightFloor);
  }
  renormalize(state.w, static_cast<double>(state.n_tasks));
  return info;
}

}  // namespace qbev::losses
