#include "quadbev/optim.hpp"

#include <cmath>

#include "quadbev/error.hpp"

namespace qbev::train {

AdamW::AdamW(nets::ParamStore& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
  for (int i = 0; i < params.size(); ++i) {
    m_.emplace_back(params.at(i).value.shape());
    v_.emplace_back(params.at(i).value.shape());
  }
}

double AdamW::step(const std::vector<const Tensor*>& grads, double clip_norm) {
  check_contract(static_cast<int>(grads.size()) == params_.size(),
                 "AdamW::step: gradient count mismatch");
  double sq = 0;
  for (int i = 0; i < params_.size(); ++i) {
    if (lr_of(params_.at(i).group) <= 0 || !grads[static_cast<size_t>(i)]) continue;
    const Tensor& g = *grads[static_cast<size_t>(i)];
    for (long j = 0; j < g.numel(); ++j) sq += g[j] * g[j];
  }
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (int i = 0; i < params_.size(); ++i) {
    const double lr = lr_of(params_.at(i).group);
    if (lr <= 0 || !grads[static_cast<size_t>(i)]) continue;
    const Tensor& g = *grads[static_cast<size_t>(i)];
    Tensor& p = params_.at(i).value;
    Tensor& m = m_[static_cast<size_t>(i)];
    Tensor& v = v_[static_cast<size_t>(i)];
    check_contract(g.same_shape(p), "AdamW::step: gradient shape mismatch");
    for (long j = 0; j < p.numel(); ++j) {
      const double gj = g[j] * scale;
      m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
    }
  }
  return norm;
}

}  // namespace qbev::train
