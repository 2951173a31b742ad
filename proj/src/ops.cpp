#include <algorithm>
#include <cmath>

#include "quadbev/kernels.hpp"
#include "quadbev/tape.hpp"

namespace qbev::ad {

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
  check_contract(a.tape == b.tape, std::string(op) + ": vars from different tapes");
  check_contract(a.val().same_shape(b.val()), std::string(op) + ": shape mismatch");
}

// Elementwise binary op scaffold.
template <typename FwdFn, typename BackFn>
Var binary(Var a, Var b, const char* name, FwdFn fwd, BackFn bwd) {
  check_same(a, b, name);
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  Tensor out(av.shape());
  for (long i = 0; i < av.numel(); ++i) out[i] = fwd(av[i], bv[i]);
  int pa = a.id, pb = b.id;
  return a.tape->make(std::move(out), {pa, pb}, [pa, pb, bwd](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av2 = t.val(pa);
    const Tensor& bv2 = t.val(pb);
    Tensor& ga = t.grad(pa);
    Tensor& gb = t.grad(pb);
    for (long i = 0; i < g.numel(); ++i) {
      auto [da, db] = bwd(av2[i], bv2[i]);
      ga[i] += g[i] * da;
      gb[i] += g[i] * db;
    }
  });
}

template <typename FwdFn, typename BackFn>
Var unary(Var x, const char* /*name*/, FwdFn fwd, BackFn bwd) {
  const Tensor& xv = x.val();
  Tensor out(xv.shape());
  for (long i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, bwd](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.val(px);
    const Tensor& yv = t.val(self);
    Tensor& gx = t.grad(px);
    for (long i = 0; i < g.numel(); ++i) gx[i] += g[i] * bwd(xv2[i], yv[i]);
  });
}

}  // namespace

Var constant(Tape& t, Tensor v) { return t.leaf(std::move(v)); }

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}
Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}
Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair<double, double>{y, x}; });
}
Var div(Var a, Var b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double x, double y) {
                  return std::pair<double, double>{1.0 / y, -x / (y * y)};
                });
}
Var min_ew(Var a, Var b) {
  return binary(a, b, "min_ew", [](double x, double y) { return x < y ? x : y; },
                [](double x, double y) {
                  return x <= y ? std::pair<double, double>{1.0, 0.0}
                                : std::pair<double, double>{0.0, 1.0};
                });
}
Var max_ew(Var a, Var b) {
  return binary(a, b, "max_ew", [](double x, double y) { return x > y ? x : y; },
                [](double x, double y) {
                  return x >= y ? std::pair<double, double>{1.0, 0.0}
                                : std::pair<double, double>{0.0, 1.0};
                });
}

Var relu(Var x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
Var exp_op(Var x) {
  return unary(x, "exp", [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}
Var square(Var x) {
  return unary(x, "square", [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}
Var sqrt_eps(Var x, double eps) {
  return unary(x, "sqrt_eps", [eps](double v) { return std::sqrt(v + eps); },
               [](double, double y) { return 0.5 / y; });
}
Var sigmoid(Var x) {
  return unary(x, "sigmoid",
               [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                              : std::exp(v) / (1.0 + std::exp(v)); },
               [](double, double y) { return y * (1.0 - y); });
}
Var scale(Var x, double c) {
  return unary(x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}
Var add_const(Var x, double c) {
  return unary(x, "add_const", [c](double v) { return v + c; },
               [](double, double) { return 1.0; });
}

Var sum_all(Var x) {
  int px = x.id;
  Tensor out = Tensor::scalar(x.val().sum());
  return x.tape->make(std::move(out), {px}, [px](Tape& t, int self) {
    const double g = t.grad(self)[0];
    Tensor& gx = t.grad(px);
    for (long i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

Var mean_all(Var x) {
  const long n = std::max<long>(1, x.val().numel());
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

Var concat_ch(std::vector<Var> parts) {
  check_contract(!parts.empty(), "concat_ch: empty");
  Tape* tape = parts[0].tape;
  const int h = parts[0].val().dim(1), w = parts[0].val().dim(2);
  int ctot = 0;
  std::vector<int> pids;
  for (const Var& p : parts) {
    check_contract(p.val().rank() == 3 && p.val().dim(1) == h && p.val().dim(2) == w,
                   "concat_ch: spatial shape mismatch");
    ctot += p.val().dim(0);
    pids.push_back(p.id);
  }
  Tensor out({ctot, h, w});
  long off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.val();
    std::copy(v.data(), v.data() + v.numel(), out.data() + off);
    off += v.numel();
  }
  return tape->make(std::move(out), pids, [pids](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    long off2 = 0;
    for (int pid : pids) {
      Tensor& gp = t.grad(pid);
      for (long i = 0; i < gp.numel(); ++i) gp[i] += g[off2 + i];
      off2 += gp.numel();
    }
  });
}

Var gather_cells(Var x, std::vector<int> cells) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() == 3, "gather_cells: want (C,H,W)");
  const int c = xv.dim(0);
  const long hw = static_cast<long>(xv.dim(1)) * xv.dim(2);
  const int k = static_cast<int>(cells.size());
  Tensor out({c, k});
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < k; ++j) out.at(ci, j) = xv[ci * hw + cells[static_cast<size_t>(j)]];
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, cells, c, hw](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (int ci = 0; ci < c; ++ci)
      for (size_t j = 0; j < cells.size(); ++j)
        gx[ci * hw + cells[j]] += g[ci * static_cast<long>(cells.size()) + static_cast<long>(j)];
  });
}

Var gather_cols(Var x, std::vector<int> idx) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() == 2, "gather_cols: want (C,K)");
  const int c = xv.dim(0), kin = xv.dim(1);
  const int k = static_cast<int>(idx.size());
  Tensor out({c, k});
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < k; ++j) out.at(ci, j) = xv.at(ci, idx[static_cast<size_t>(j)]);
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, idx, c, kin](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (int ci = 0; ci < c; ++ci)
      for (size_t j = 0; j < idx.size(); ++j)
        gx[static_cast<long>(ci) * kin + idx[j]] += g[ci * static_cast<long>(idx.size()) + static_cast<long>(j)];
  });
}

Var row(Var x, int r) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() == 2 && r < xv.dim(0), "row: out of range");
  const int k = xv.dim(1);
  Tensor out({k});
  for (int j = 0; j < k; ++j) out[j] = xv.at(r, j);
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, r, k](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (int j = 0; j < k; ++j) gx[static_cast<long>(r) * k + j] += g[j];
  });
}

Var mean_cols(Var x) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() == 2 && xv.dim(1) > 0, "mean_cols: want (C,K>0)");
  const int c = xv.dim(0), k = xv.dim(1);
  Tensor out({c});
  for (int ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += xv.at(ci, j);
    out[ci] = s / k;
  }
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, c, k](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (int ci = 0; ci < c; ++ci)
      for (int j = 0; j < k; ++j) gx[static_cast<long>(ci) * k + j] += g[ci] / k;
  });
}

Var sub_colvec(Var x, Var v) {
  const Tensor& xv = x.val();
  const Tensor& vv = v.val();
  check_contract(xv.rank() == 2 && vv.rank() == 1 && xv.dim(0) == vv.dim(0),
                 "sub_colvec: shape mismatch");
  const int c = xv.dim(0), k = xv.dim(1);
  Tensor out({c, k});
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < k; ++j) out.at(ci, j) = xv.at(ci, j) - vv[ci];
  int px = x.id, pv = v.id;
  return x.tape->make(std::move(out), {px, pv}, [px, pv, c, k](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    Tensor& gv = t.grad(pv);
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int j = 0; j < k; ++j) {
        gx[static_cast<long>(ci) * k + j] += g[static_cast<long>(ci) * k + j];
        s += g[static_cast<long>(ci) * k + j];
      }
      gv[ci] -= s;
    }
  });
}

Var softmax_axis0(Var x) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() >= 1, "softmax_axis0: rank");
  const int d = xv.dim(0);
  const long cols = xv.numel() / d;
  Tensor out(xv.shape());
  for (long j = 0; j < cols; ++j) {
    double m = xv[j];
    for (int i = 1; i < d; ++i) m = std::max(m, xv[i * cols + j]);
    double z = 0.0;
    for (int i = 0; i < d; ++i) z += std::exp(xv[i * cols + j] - m);
    for (int i = 0; i < d; ++i) out[i * cols + j] = std::exp(xv[i * cols + j] - m) / z;
  }
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, d, cols](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    Tensor& gx = t.grad(px);
    for (long j = 0; j < cols; ++j) {
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += g[i * cols + j] * y[i * cols + j];
      for (int i = 0; i < d; ++i)
        gx[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
    }
  });
}

Var reshape(Var x, std::vector<int> shape) {
  const Tensor& xv = x.val();
  Tensor out(shape);
  check_contract(out.numel() == xv.numel(), "reshape: numel mismatch");
  std::copy(xv.data(), xv.data() + xv.numel(), out.data());
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (long i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var slice_item(Var x, int i) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() >= 2 && i >= 0 && i < xv.dim(0), "slice_item: index out of range");
  std::vector<int> shape(xv.shape().begin() + 1, xv.shape().end());
  Tensor out(shape);
  const long n = out.numel();
  std::copy(xv.data() + i * n, xv.data() + (i + 1) * n, out.data());
  int px = x.id;
  return x.tape->make(std::move(out), {px}, [px, i, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(px);
    for (long j = 0; j < n; ++j) gx[i * n + j] += g[j];
  });
}

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  check_contract(xv.rank() == 4 && wv.rank() == 4, "conv2d: want (N,C,H,W) and (Co,Ci,k,k)");
  check_contract(xv.dim(1) == wv.dim(1), "conv2d: input channels mismatch");
  check_contract(wv.dim(2) == wv.dim(3), "conv2d: square kernels only");
  auto d = kern::Conv2dDims::make(xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0),
                                  wv.dim(2), stride, pad);
  check_contract(d.hout > 0 && d.wout > 0, "conv2d: empty output");
  const bool has_b = b.valid();
  if (has_b) check_contract(b.val().numel() == d.cout, "conv2d: bias size");
  Tensor out({d.n, d.cout, d.hout, d.wout});
  kern::conv2d_forward(xv.data(), wv.data(), has_b ? b.val().data() : nullptr, out.data(), d);
  std::vector<int> parents = has_b ? std::vector<int>{x.id, w.id, b.id}
                                   : std::vector<int>{x.id, w.id};
  int px = x.id, pw = w.id, pb = has_b ? b.id : -1;
  return x.tape->make(std::move(out), parents, [px, pw, pb, d](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    kern::conv2d_backward_input(g.data(), t.val(pw).data(), t.grad(px).data(), d);
    kern::conv2d_backward_weight(t.val(px).data(), g.data(), t.grad(pw).data(),
                                 pb >= 0 ? t.grad(pb).data() : nullptr, d);
  });
}

Var raster_norm(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                bool training, double momentum, double eps) {
  const Tensor& xv = x.val();
  check_contract(xv.rank() == 3 || xv.rank() == 4, "raster_norm: want (C,H,W) or (N,C,H,W)");
  const bool batched = xv.rank() == 4;
  const int n = batched ? xv.dim(0) : 1;
  const int c = batched ? xv.dim(1) : xv.dim(0);
  const long hw = static_cast<long>(xv.dim(batched ? 2 : 1)) * xv.dim(batched ? 3 : 2);
  check_contract(gamma.val().numel() == c && beta.val().numel() == c, "raster_norm: affine size");
  check_contract(running_mean->numel() == c && running_var->numel() == c,
                 "raster_norm: running stats size");

  Tensor out(xv.shape());
  std::vector<double> mu(static_cast<size_t>(n) * c), inv_sigma(static_cast<size_t>(n) * c);
  const Tensor& gv = gamma.val();
  const Tensor& bv = beta.val();
  if (training) {
    for (int s = 0; s < n * c; ++s) {
      const double* xp = xv.data() + static_cast<long>(s) * hw;
      double m = 0.0;
      for (long i = 0; i < hw; ++i) m += xp[i];
      m /= static_cast<double>(hw);
      double v = 0.0;
      for (long i = 0; i < hw; ++i) v += (xp[i] - m) * (xp[i] - m);
      v /= static_cast<double>(hw);
      mu[static_cast<size_t>(s)] = m;
      inv_sigma[static_cast<size_t>(s)] = 1.0 / std::sqrt(v + eps);
    }
    // running stats: per-channel mean over batch slices
    for (int ci = 0; ci < c; ++ci) {
      double ms = 0.0, vs = 0.0;
      for (int b2 = 0; b2 < n; ++b2) {
        const int s = b2 * c + ci;
        ms += mu[static_cast<size_t>(s)];
        const double is = inv_sigma[static_cast<size_t>(s)];
        vs += 1.0 / (is * is) - eps;
      }
      (*running_mean)[ci] = (1.0 - momentum) * (*running_mean)[ci] + momentum * ms / n;
      (*running_var)[ci] = (1.0 - momentum) * (*running_var)[ci] + momentum * vs / n;
    }
  } else {
    for (int s = 0; s < n * c; ++s) {
      const int ci = s % c;
      mu[static_cast<size_t>(s)] = (*running_mean)[ci];
      inv_sigma[static_cast<size_t>(s)] = 1.0 / std::sqrt((*running_var)[ci] + eps);
    }
  }
  for (int s = 0; s < n * c; ++s) {
    const int ci = s % c;
    const double* xp = xv.data() + static_cast<long>(s) * hw;
    double* op = out.data() + static_cast<long>(s) * hw;
    const double m = mu[static_cast<size_t>(s)], is = inv_sigma[static_cast<size_t>(s)];
    for (long i = 0; i < hw; ++i) op[i] = gv[ci] * (xp[i] - m) * is + bv[ci];
  }

  int px = x.id, pg = gamma.id, pb = beta.id;
  return x.tape->make(
      std::move(out), {px, pg, pb},
      [px, pg, pb, n, c, hw, mu, inv_sigma, training](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv2 = t.val(px);
        const Tensor& gv2 = t.val(pg);
        Tensor& gx = t.grad(px);
        Tensor& gg = t.grad(pg);
        Tensor& gb = t.grad(pb);
        for (int s = 0; s < n * c; ++s) {
          const int ci = s % c;
          const double* xp = xv2.data() + static_cast<long>(s) * hw;
          const double* gp = g.data() + static_cast<long>(s) * hw;
          double* gxp = gx.data() + static_cast<long>(s) * hw;
          const double m = mu[static_cast<size_t>(s)], is = inv_sigma[static_cast<size_t>(s)];
          double sum_g = 0.0, sum_gx = 0.0;
          for (long i = 0; i < hw; ++i) {
            const double xh = (xp[i] - m) * is;
            sum_g += gp[i];
            sum_gx += gp[i] * xh;
          }
          gg[ci] += sum_gx;
          gb[ci] += sum_g;
          if (training) {
            const double inv_hw = 1.0 / static_cast<double>(hw);
            for (long i = 0; i < hw; ++i) {
              const double xh = (xp[i] - m) * is;
              gxp[i] += gv2[ci] * is * (gp[i] - sum_g * inv_hw - xh * sum_gx * inv_hw);
            }
          } else {
            for (long i = 0; i < hw; ++i) gxp[i] += gv2[ci] * is * gp[i];
          }
        }
      });
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (long i = 0; i < x.numel(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + step;
    const double fp = f(xp);
    xp[i] = orig - step;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

double grad_rel_err(const Tensor& g, const Tensor& fd, double floor_) {
  check_contract(g.same_shape(fd), "grad_rel_err: shape mismatch");
  double worst = 0.0;
  for (long i = 0; i < g.numel(); ++i) {
    const double denom = std::max({std::fabs(g[i]), std::fabs(fd[i]), floor_});
    worst = std::max(worst, std::fabs(g[i] - fd[i]) / denom);
  }
  return worst;
}

}  // namespace qbev::ad
