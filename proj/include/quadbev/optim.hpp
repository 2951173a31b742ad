#pragma once

#include <map>

#include "quadbev/model.hpp"

namespace qbev::train {

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-2;
};

// Decoupled weight-decay Adam over a ParamStore, with per-module-group
// learning rates. Groups absent from the lr map are frozen: their
// parameters and moments are never touched.
class AdamW {
 public:
  AdamW(nets::ParamStore& params, AdamWConfig cfg);

  void set_group_lr(std::map<nets::ModuleGroup, double> lr) { group_lr_ = std::move(lr); }
  double lr_of(nets::ModuleGroup g) const {
    auto it = group_lr_.find(g);
    return it == group_lr_.end() ? 0.0 : it->second;
  }
  const std::map<nets::ModuleGroup, double>& group_lr() const { return group_lr_; }

  // grads[i] may be null (parameter unused this step -> zero gradient).
  // clip_norm <= 0 disables clipping. Returns the pre-clip global norm.
  double step(const std::vector<const Tensor*>& grads, double clip_norm);

  long t() const { return t_; }
  void set_t(long t) { t_ = t; }
  Tensor& m(int i) { return m_[static_cast<size_t>(i)]; }
  Tensor& v(int i) { return v_[static_cast<size_t>(i)]; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  nets::ParamStore& params_;
  AdamWConfig cfg_;
  std::map<nets::ModuleGroup, double> group_lr_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace qbev::train
