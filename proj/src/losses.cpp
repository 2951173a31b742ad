#include "quadbev/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "quadbev/error.hpp"

namespace qbev::losses {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }
double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

std::vector<int> cells_where(const Tensor& mask, double value) {
  std::vector<int> out;
  for (long i = 0; i < mask.numel(); ++i)
    if (mask[i] == value) out.push_back(static_cast<int>(i));
  return out;
}

}  // namespace

ad::Var bce_logits_mean(ad::Var logits, const Tensor& targets,
                        const std::vector<char>* select) {
  const Tensor& x = logits.val();
  check_contract(x.numel() == targets.numel(), "bce: logits/target size mismatch");
  if (select)
    check_contract(static_cast<long>(select->size()) == x.numel(), "bce: select size mismatch");
  long n = 0;
  double total = 0;
  for (long i = 0; i < x.numel(); ++i) {
    if (select && !(*select)[static_cast<size_t>(i)]) continue;
    total += softplus(x[i]) - targets[i] * x[i];
    ++n;
  }
  const long denom = std::max<long>(1, n);
  int px = logits.id;
  Tensor tgt = targets;
  std::vector<char> sel = select ? *select : std::vector<char>{};
  return logits.tape->make(
      Tensor::scalar(total / static_cast<double>(denom)), {px},
      [px, tgt, sel, denom](ad::Tape& t, int self) {
        const double g = t.grad(self)[0] / static_cast<double>(denom);
        const Tensor& xv = t.val(px);
        Tensor& gx = t.grad(px);
        for (long i = 0; i < xv.numel(); ++i) {
          if (!sel.empty() && !sel[static_cast<size_t>(i)]) continue;
          gx[i] += g * (sigmoid(xv[i]) - tgt[i]);
        }
      });
}

ad::Var focal_logits_mean(ad::Var logits, const Tensor& targets, double alpha, double gamma) {
  const Tensor& x = logits.val();
  check_contract(x.numel() == targets.numel(), "focal: logits/target size mismatch");
  const long n = std::max<long>(1, x.numel());
  double total = 0;
  for (long i = 0; i < x.numel(); ++i) {
    const double lp = -softplus(-x[i]);  // log p
    const double lq = -softplus(x[i]);   // log (1-p)
    const double p_pow = std::exp(gamma * lp);
    const double q_pow = std::exp(gamma * lq);
    total += -alpha * targets[i] * q_pow * lp - (1.0 - targets[i]) * p_pow * lq;
  }
  int px = logits.id;
  Tensor tgt = targets;
  return logits.tape->make(
      Tensor::scalar(total / static_cast<double>(n)), {px},
      [px, tgt, alpha, gamma, n](ad::Tape& t, int self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        const Tensor& xv = t.val(px);
        Tensor& gx = t.grad(px);
        for (long i = 0; i < xv.numel(); ++i) {
          const double lp = -softplus(-xv[i]);
          const double lq = -softplus(xv[i]);
          const double p = std::exp(lp), q = std::exp(lq);
          const double p_pow = std::exp(gamma * lp);
          const double q_pow = std::exp(gamma * lq);
          // d/dx of the focal terms, written against log-space powers for
          // stability in the saturated tails
          const double dpos = -(q_pow * q - gamma * q_pow * p * lp);
          const double dneg = p_pow * p - gamma * p_pow * q * lq;
          gx[i] += g * (alpha * tgt[i] * dpos + (1.0 - tgt[i]) * dneg);
        }
      });
}

ad::Var l1_mean(ad::Var x, const Tensor& target) {
  const Tensor& xv = x.val();
  check_contract(xv.numel() == target.numel(), "l1_mean: size mismatch");
  const long n = std::max<long>(1, xv.numel());
  double total = 0;
  for (long i = 0; i < xv.numel(); ++i) total += std::fabs(xv[i] - target[i]);
  int px = x.id;
  Tensor tgt = target;
  return x.tape->make(Tensor::scalar(total / static_cast<double>(n)), {px},
                      [px, tgt, n](ad::Tape& t, int self) {
                        const double g = t.grad(self)[0] / static_cast<double>(n);
                        const Tensor& xv2 = t.val(px);
                        Tensor& gx = t.grad(px);
                        for (long i = 0; i < xv2.numel(); ++i) {
                          const double d = xv2[i] - tgt[i];
                          gx[i] += g * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
                        }
                      });
}

ad::Var mse_mean(ad::Var x, const Tensor& target) {
  const Tensor& xv = x.val();
  check_contract(xv.numel() == target.numel(), "mse_mean: size mismatch");
  const long n = std::max<long>(1, xv.numel());
  double total = 0;
  for (long i = 0; i < xv.numel(); ++i) total += (xv[i] - target[i]) * (xv[i] - target[i]);
  int px = x.id;
  Tensor tgt = target;
  return x.tape->make(Tensor::scalar(total / static_cast<double>(n)), {px},
                      [px, tgt, n](ad::Tape& t, int self) {
                        const double g = t.grad(self)[0] / static_cast<double>(n);
                        const Tensor& xv2 = t.val(px);
                        Tensor& gx = t.grad(px);
                        for (long i = 0; i < xv2.numel(); ++i)
                          gx[i] += g * 2.0 * (xv2[i] - tgt[i]);
                      });
}

ad::Var ce_cols_mean(ad::Var logits, const std::vector<int>& labels) {
  const Tensor& x = logits.val();
  check_contract(x.rank() == 2 && x.dim(1) == static_cast<int>(labels.size()),
                 "ce_cols: want (K, M) with one label per column");
  const int k = x.dim(0), m = x.dim(1);
  const long n = std::max(1, m);
  double total = 0;
  for (int j = 0; j < m; ++j) {
    double mx = x.at(0, j);
    for (int i = 1; i < k; ++i) mx = std::max(mx, x.at(i, j));
    double z = 0;
    for (int i = 0; i < k; ++i) z += std::exp(x.at(i, j) - mx);
    total += mx + std::log(z) - x.at(labels[static_cast<size_t>(j)], j);
  }
  int px = logits.id;
  std::vector<int> lab = labels;
  return logits.tape->make(
      Tensor::scalar(total / static_cast<double>(n)), {px},
      [px, lab, k, m, n](ad::Tape& t, int self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        const Tensor& xv = t.val(px);
        Tensor& gx = t.grad(px);
        for (int j = 0; j < m; ++j) {
          double mx = xv.at(0, j);
          for (int i = 1; i < k; ++i) mx = std::max(mx, xv.at(i, j));
          double z = 0;
          for (int i = 0; i < k; ++i) z += std::exp(xv.at(i, j) - mx);
          for (int i = 0; i < k; ++i) {
            const double soft = std::exp(xv.at(i, j) - mx) / z;
            gx[static_cast<long>(i) * m + j] +=
                g * (soft - (i == lab[static_cast<size_t>(j)] ? 1.0 : 0.0));
          }
        }
      });
}

ad::Var occ_ce_mean(ad::Var logits, const Tensor& occ_grid, int c_occ_total) {
  const Tensor& x = logits.val();
  check_contract(x.rank() == 3 && occ_grid.rank() == 3, "occ_ce: rank mismatch");
  const int h = occ_grid.dim(0), w = occ_grid.dim(1), nz = occ_grid.dim(2);
  check_contract(x.dim(0) == nz * c_occ_total && x.dim(1) == h && x.dim(2) == w,
                 "occ_ce: logits shape mismatch");
  const long hw = static_cast<long>(h) * w;
  const long n = hw * nz;
  double total = 0;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const long cell = static_cast<long>(i) * w + j;
      for (int k = 0; k < nz; ++k) {
        const int label = static_cast<int>(occ_grid.at(i, j, k));
        double mx = x[static_cast<long>(k * c_occ_total) * hw + cell];
        for (int c = 1; c < c_occ_total; ++c)
          mx = std::max(mx, x[static_cast<long>(k * c_occ_total + c) * hw + cell]);
        double z = 0;
        for (int c = 0; c < c_occ_total; ++c)
          z += std::exp(x[static_cast<long>(k * c_occ_total + c) * hw + cell] - mx);
        total += mx + std::log(z) - x[static_cast<long>(k * c_occ_total + label) * hw + cell];
      }
    }
  int px = logits.id;
  Tensor grid_copy = occ_grid;
  return logits.tape->make(
      Tensor::scalar(total / static_cast<double>(n)), {px},
      [px, grid_copy, c_occ_total, h, w, nz, n](ad::Tape& t, int self) {
        const double g = t.grad(self)[0] / static_cast<double>(n);
        const Tensor& xv = t.val(px);
        Tensor& gx = t.grad(px);
        const long hw = static_cast<long>(h) * w;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const long cell = static_cast<long>(i) * w + j;
            for (int k = 0; k < nz; ++k) {
              const int label = static_cast<int>(grid_copy.at(i, j, k));
              double mx = xv[static_cast<long>(k * c_occ_total) * hw + cell];
              for (int c = 1; c < c_occ_total; ++c)
                mx = std::max(mx, xv[static_cast<long>(k * c_occ_total + c) * hw + cell]);
              double z = 0;
              for (int c = 0; c < c_occ_total; ++c)
                z += std::exp(xv[static_cast<long>(k * c_occ_total + c) * hw + cell] - mx);
              for (int c = 0; c < c_occ_total; ++c) {
                const double soft =
                    std::exp(xv[static_cast<long>(k * c_occ_total + c) * hw + cell] - mx) / z;
                gx[static_cast<long>(k * c_occ_total + c) * hw + cell] +=
                    g * (soft - (c == label ? 1.0 : 0.0));
              }
            }
          }
      });
}

DetLossParts detection_loss(ad::Tape& tape, ad::Var heat_logits, ad::Var reg,
                            const synth::GtRasters& gt, const geom::BevGridSpec& grid,
                            const DetLambdas& lambdas) {
  check_contract(heat_logits.val().same_shape(gt.det_heatmap),
                 "detection_loss: heatmap shape mismatch");
  check_contract(reg.val().same_shape(gt.det_reg), "detection_loss: reg shape mismatch");
  DetLossParts parts;
  parts.cls = bce_logits_mean(heat_logits, gt.det_heatmap);

  const std::vector<int> cells = cells_where(gt.det_mask, 1.0);
  if (cells.empty()) {
    parts.reg = tape.leaf(Tensor::scalar(0.0));
    parts.iou = tape.leaf(Tensor::scalar(0.0));
  } else {
    const int k = static_cast<int>(cells.size());
    ad::Var reg_g = ad::gather_cells(reg, cells);
    Tensor tgt({8, k});
    for (int r = 0; r < 8; ++r)
      for (int j = 0; j < k; ++j)
        tgt.at(r, j) = gt.det_reg[static_cast<long>(r) * gt.det_mask.numel() +
                                  cells[static_cast<size_t>(j)]];
    parts.reg = l1_mean(reg_g, tgt);

    // axis-aligned BEV IoU between decoded boxes and ground truth
    Tensor cellx({k}), celly({k}), gx0({k}), gx1({k}), gy0({k}), gy1({k}), garea({k});
    for (int j = 0; j < k; ++j) {
      const int cell = cells[static_cast<size_t>(j)];
      const int ci = cell / grid.w_bev(), cj = cell % grid.w_bev();
      cellx[j] = grid.center_x(cj);
      celly[j] = grid.center_y(ci);
      const double bx = cellx[j] + tgt.at(0, j), by = celly[j] + tgt.at(1, j);
      const double bw = std::exp(tgt.at(3, j)), bl = std::exp(tgt.at(4, j));
      gx0[j] = bx - bw / 2;
      gx1[j] = bx + bw / 2;
      gy0[j] = by - bl / 2;
      gy1[j] = by + bl / 2;
      garea[j] = bw * bl;
    }
    ad::Var px = ad::add(ad::row(reg_g, 0), tape.leaf(cellx));
    ad::Var py = ad::add(ad::row(reg_g, 1), tape.leaf(celly));
    ad::Var pw = ad::exp_op(ad::row(reg_g, 3));
    ad::Var pl = ad::exp_op(ad::row(reg_g, 4));
    ad::Var px0 = ad::sub(px, ad::scale(pw, 0.5));
    ad::Var px1 = ad::add(px, ad::scale(pw, 0.5));
    ad::Var py0 = ad::sub(py, ad::scale(pl, 0.5));
    ad::Var py1 = ad::add(py, ad::scale(pl, 0.5));
    ad::Var ox = ad::relu(ad::sub(ad::min_ew(px1, tape.leaf(gx1)), ad::max_ew(px0, tape.leaf(gx0))));
    ad::Var oy = ad::relu(ad::sub(ad::min_ew(py1, tape.leaf(gy1)), ad::max_ew(py0, tape.leaf(gy0))));
    ad::Var inter = ad::mul(ox, oy);
    ad::Var uni = ad::sub(ad::add(ad::mul(pw, pl), tape.leaf(garea)), inter);
    ad::Var iou = ad::div(inter, uni);
    parts.iou = ad::add_const(ad::scale(ad::mean_all(iou), -1.0), 1.0);
  }
  parts.total = ad::add(ad::scale(parts.cls, lambdas.cls),
                        ad::add(ad::scale(parts.reg, lambdas.reg),
                                ad::scale(parts.iou, lambdas.iou)));
  return parts;
}

ad::Var map_loss(ad::Tape&, ad::Var logits, const Tensor& map_masks, double alpha,
                 double gamma) {
  check_contract(logits.val().same_shape(map_masks), "map_loss: shape mismatch");
  return focal_logits_mean(logits, map_masks, alpha, gamma);
}

LaneLossParts lane_loss(ad::Tape& tape, ad::Var conf, ad::Var offset, ad::Var embed,
                        ad::Var cls, const synth::GtRasters& gt, const LaneLambdas& lambdas,
                        double m_push) {
  LaneLossParts parts;
  parts.conf = bce_logits_mean(conf, gt.lane_conf);

  const std::vector<int> cells = cells_where(gt.lane_conf, 1.0);
  if (cells.empty()) {
    parts.offset = tape.leaf(Tensor::scalar(0.0));
    parts.emb = tape.leaf(Tensor::scalar(0.0));
    parts.cls = tape.leaf(Tensor::scalar(0.0));
  } else {
    const int k = static_cast<int>(cells.size());
    Tensor off_tgt({1, k});
    std::vector<int> labels(static_cast<size_t>(k));
    std::map<int, std::vector<int>> instance_cols;
    for (int j = 0; j < k; ++j) {
      const int cell = cells[static_cast<size_t>(j)];
      off_tgt.at(0, j) = gt.lane_offset[cell];
      labels[static_cast<size_t>(j)] = static_cast<int>(gt.lane_class[cell]);
      instance_cols[static_cast<int>(gt.lane_embed_id[cell])].push_back(j);
    }
    parts.offset = mse_mean(ad::gather_cells(offset, cells), off_tgt);
    parts.cls = ce_cols_mean(ad::gather_cells(cls, cells), labels);

    // push-pull instance embedding
    ad::Var emb_g = ad::gather_cells(embed, cells);  // (E, K)
    const int e_dim = embed.val().dim(0);
    std::vector<ad::Var> means;
    ad::Var pull;
    for (const auto& [inst, cols] : instance_cols) {
      ad::Var inst_cols = ad::gather_cols(emb_g, cols);
      ad::Var mu = ad::mean_cols(inst_cols);
      means.push_back(mu);
      ad::Var d = ad::sub_colvec(inst_cols, mu);
      // mean over cells of ||e - mu||^2 = sum of squares / n_cells
      ad::Var term = ad::scale(ad::sum_all(ad::square(d)),
                               1.0 / static_cast<double>(cols.size()));
      pull = pull.valid() ? ad::add(pull, term) : term;
    }
    pull = ad::scale(pull, 1.0 / static_cast<double>(instance_cols.size()));

    ad::Var push;
    int n_pairs = 0;
    for (size_t a = 0; a < means.size(); ++a)
      for (size_t b = a + 1; b < means.size(); ++b) {
        ad::Var dist = ad::sqrt_eps(ad::sum_all(ad::square(ad::sub(means[a], means[b]))));
        ad::Var viol = ad::square(ad::relu(ad::add_const(ad::scale(dist, -1.0), m_push)));
        push = push.valid() ? ad::add(push, viol) : viol;
        ++n_pairs;
      }
    if (n_pairs > 0)
      push = ad::scale(push, 1.0 / n_pairs);
    else
      push = tape.leaf(Tensor::scalar(0.0));
    parts.emb = ad::add(pull, push);
    (void)e_dim;
  }

  parts.total = ad::add(
      ad::add(ad::scale(parts.conf, lambdas.conf), ad::scale(parts.offset, lambdas.offset)),
      ad::add(ad::scale(parts.emb, lambdas.emb), ad::scale(parts.cls, lambdas.cls)));
  return parts;
}

ad::Var occ_loss(ad::Tape&, ad::Var occ_logits, const Tensor& occ_grid, int c_occ_total) {
  return occ_ce_mean(occ_logits, occ_grid, c_occ_total);
}

DepthLossOut depth_loss(ad::Tape& tape, ad::Var depth_logits,
                        const std::vector<Tensor>& depth_bins) {
  const Tensor& x = depth_logits.val();
  check_contract(x.rank() == 4 && x.dim(0) == static_cast<int>(depth_bins.size()),
                 "depth_loss: want (N_cam, D, Hf, Wf)");
  const int n_cam = x.dim(0), d = x.dim(1);
  const long cols = static_cast<long>(x.dim(2)) * x.dim(3);

  Tensor targets(x.shape());
  std::vector<char> select(static_cast<size_t>(x.numel()), 0);
  long n_valid_cols = 0;
  for (int c = 0; c < n_cam; ++c) {
    const Tensor& bins = depth_bins[static_cast<size_t>(c)];
    check_contract(bins.numel() == static_cast<long>(d) * cols,
                   "depth_loss: target shape mismatch");
    for (long p = 0; p < cols; ++p) {
      bool valid = false;
      for (int b = 0; b < d; ++b)
        if (bins[b * cols + p] != 0.0) valid = true;
      if (!valid) continue;
      ++n_valid_cols;
      for (int b = 0; b < d; ++b) {
        const long idx = (static_cast<long>(c) * d + b) * cols + p;
        targets[idx] = bins[b * cols + p];
        select[static_cast<size_t>(idx)] = 1;
      }
    }
  }
  DepthLossOut out;
  out.any_valid = n_valid_cols > 0;
  out.loss = out.any_valid ? bce_logits_mean(depth_logits, targets, &select)
                           : tape.leaf(Tensor::scalar(0.0));
  return out;
}

std::string LossReport::csv_header() {
  return "step,det,map,lane,occ,depth,w_det,w_map,w_lane,w_occ,w_depth,combined,"
         "g_det,g_map,g_lane,g_occ,g_depth";
}

std::string LossReport::csv_row() const {
  std::ostringstream os;
  os.precision(10);
  os << step;
  for (double v : raw) os << "," << v;
  for (double v : weights) os << "," << v;
  os << "," << combined;
  for (double v : gnorm) os << "," << v;
  return os.str();
}

CombineOut combine(ad::Tape& tape, const std::array<ad::Var, kNumComponents>& parts,
                   const std::array<double, kNumComponents>& weights) {
  CombineOut out;
  for (int i = 0; i < kNumComponents; ++i) {
    out.report.weights[static_cast<size_t>(i)] = weights[static_cast<size_t>(i)];
    if (!parts[static_cast<size_t>(i)].valid()) continue;
    out.report.raw[static_cast<size_t>(i)] = parts[static_cast<size_t>(i)].scalar();
    ad::Var weighted = ad::scale(parts[static_cast<size_t>(i)], weights[static_cast<size_t>(i)]);
    out.weighted[static_cast<size_t>(i)] = weighted;
    out.combined = out.combined.valid() ? ad::add(out.combined, weighted) : weighted;
  }
  if (!out.combined.valid()) out.combined = tape.leaf(Tensor::scalar(0.0));
  out.report.combined = out.combined.scalar();
  return out;
}

}  // namespace qbev::losses
