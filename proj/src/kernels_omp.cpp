#include <algorithm>
#include <vector>

#include "quadbev/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// OpenMP kernels. Parallelism is always over independently written output
// elements; inner accumulation order matches kernels_ref.cpp exactly, so
// results are bit-identical to the serial reference for any thread count.

namespace qbev::kern::par {

void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    const Conv2dDims& d) {
  const long in_im = static_cast<long>(d.cin) * d.hin * d.win;
  const long out_im = static_cast<long>(d.cout) * d.hout * d.wout;
  const long rows = static_cast<long>(d.n) * d.cout * d.hout;
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const int oy = static_cast<int>(r % d.hout);
    const int co = static_cast<int>((r / d.hout) % d.cout);
    const int n = static_cast<int>(r / (static_cast<long>(d.hout) * d.cout));
    double* yrow = y + n * out_im + (static_cast<long>(co) * d.hout + oy) * d.wout;
    const double bias = b ? b[co] : 0.0;
    for (int ox = 0; ox < d.wout; ++ox) yrow[ox] = bias;
    const int iy0 = oy * d.stride - d.pad;
    for (int ci = 0; ci < d.cin; ++ci) {
      const double* xp = x + n * in_im + static_cast<long>(ci) * d.hin * d.win;
      const double* wp = w + ((static_cast<long>(co) * d.cin + ci) * d.k) * d.k;
      for (int ky = 0; ky < d.k; ++ky) {
        const int iy = iy0 + ky;
        if (iy < 0 || iy >= d.hin) continue;
        const double* xrow = xp + static_cast<long>(iy) * d.win;
        for (int kx = 0; kx < d.k; ++kx) {
          const double wval = wp[ky * d.k + kx];
          int lo, hi;
          conv_ox_range(kx, d.pad, d.stride, d.win, d.wout, lo, hi);
          const double* xs = xrow + kx - d.pad;
          for (int ox = lo; ox <= hi; ++ox) yrow[ox] += wval * xs[ox * d.stride];
        }
      }
    }
  }
}

void conv2d_backward_input(const double* gy, const double* w, double* gx, const Conv2dDims& d) {
  const long in_im = static_cast<long>(d.cin) * d.hin * d.win;
  const long out_im = static_cast<long>(d.cout) * d.hout * d.wout;
  const long rows = static_cast<long>(d.n) * d.cin * d.hin;
#pragma omp parallel
  {
    std::vector<double> row(static_cast<size_t>(d.win));
#pragma omp for schedule(static)
    for (long r = 0; r < rows; ++r) {
      const int iy = static_cast<int>(r % d.hin);
      const int ci = static_cast<int>((r / d.hin) % d.cin);
      const int n = static_cast<int>(r / (static_cast<long>(d.hin) * d.cin));
      std::fill(row.begin(), row.end(), 0.0);
      for (int ky = 0; ky < d.k; ++ky) {
        const int ny = iy + d.pad - ky;
        if (ny < 0 || ny % d.stride != 0) continue;
        const int oy = ny / d.stride;
        if (oy >= d.hout) continue;
        for (int kx = 0; kx < d.k; ++kx) {
          int lo, hi;
          conv_ox_range(kx, d.pad, d.stride, d.win, d.wout, lo, hi);
          double* rs = row.data() + kx - d.pad;
          for (int co = 0; co < d.cout; ++co) {
            const double wval = w[((static_cast<long>(co) * d.cin + ci) * d.k + ky) * d.k + kx];
            const double* gyrow =
                gy + n * out_im + (static_cast<long>(co) * d.hout + oy) * d.wout;
            for (int ox = lo; ox <= hi; ++ox) rs[ox * d.stride] += wval * gyrow[ox];
          }
        }
      }
      double* gxrow = gx + n * in_im + (static_cast<long>(ci) * d.hin + iy) * d.win;
      for (int ix = 0; ix < d.win; ++ix) gxrow[ix] += row[static_cast<size_t>(ix)];
    }
  }
}

void conv2d_backward_weight(const double* x, const double* gy, double* gw, double* gb,
                            const Conv2dDims& d) {
  const long in_im = static_cast<long>(d.cin) * d.hin * d.win;
  const long out_im = static_cast<long>(d.cout) * d.hout * d.wout;
  const long welems = static_cast<long>(d.cout) * d.cin * d.k * d.k;
#pragma omp parallel for schedule(static)
  for (long wi = 0; wi < welems; ++wi) {
    const int kx = static_cast<int>(wi % d.k);
    const int ky = static_cast<int>((wi / d.k) % d.k);
    const int ci = static_cast<int>((wi / (static_cast<long>(d.k) * d.k)) % d.cin);
    const int co = static_cast<int>(wi / (static_cast<long>(d.k) * d.k * d.cin));
    int lo, hi;
    conv_ox_range(kx, d.pad, d.stride, d.win, d.wout, lo, hi);
    double acc = 0.0;
    for (int n = 0; n < d.n; ++n) {
      const double* xp = x + n * in_im + static_cast<long>(ci) * d.hin * d.win;
      const double* gp = gy + n * out_im + static_cast<long>(co) * d.hout * d.wout;
      for (int oy = 0; oy < d.hout; ++oy) {
        const int iy = oy * d.stride - d.pad + ky;
        if (iy < 0 || iy >= d.hin) continue;
        const double* xs = xp + static_cast<long>(iy) * d.win + kx - d.pad;
        const double* gyrow = gp + static_cast<long>(oy) * d.wout;
        for (int ox = lo; ox <= hi; ++ox) acc += xs[ox * d.stride] * gyrow[ox];
      }
    }
    gw[wi] += acc;
  }
  if (gb) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < d.cout; ++co) {
      double acc = 0.0;
      for (int n = 0; n < d.n; ++n) {
        const double* gp = gy + n * out_im + static_cast<long>(co) * d.hout * d.wout;
        for (long i = 0; i < static_cast<long>(d.hout) * d.wout; ++i) acc += gp[i];
      }
      gb[co] += acc;
    }
  }
}

void splat_forward(const double* feat, const double* dp, double* out, int c,
                   const SplatIntervals& plan) {
  const int n_occ = static_cast<int>(plan.cell_ids.size());
  const long work = static_cast<long>(c) * n_occ;
#pragma omp parallel for schedule(static)
  for (long r = 0; r < work; ++r) {
    const int e = static_cast<int>(r % n_occ);
    const int ci = static_cast<int>(r / n_occ);
    const double* fp = feat + static_cast<long>(ci) * plan.n_pix;
    double acc = 0.0;
    const int s = plan.starts[e], cnt = plan.counts[e];
    for (int t = 0; t < cnt; ++t) {
      const int pix = plan.point_pixel[s + t];
      const int bin = plan.point_bin[s + t];
      acc += dp[static_cast<long>(bin) * plan.n_pix + pix] * fp[pix];
    }
    out[static_cast<long>(ci) * plan.n_cells + plan.cell_ids[e]] += acc;
  }
}

void splat_backward(const double* gout, const double* feat, const double* dp, double* gfeat,
                    double* gdp, int c, const SplatIntervals& plan) {
  const long fwork = static_cast<long>(c) * plan.n_pix;
#pragma omp parallel for schedule(static)
  for (long r = 0; r < fwork; ++r) {
    const int pix = static_cast<int>(r % plan.n_pix);
    const int ci = static_cast<int>(r / plan.n_pix);
    const double* gp = gout + static_cast<long>(ci) * plan.n_cells;
    double acc = 0.0;
    for (int bin = 0; bin < plan.n_bins; ++bin) {
      const int cell = plan.cell_of[static_cast<long>(bin) * plan.n_pix + pix];
      if (cell >= 0) acc += dp[static_cast<long>(bin) * plan.n_pix + pix] * gp[cell];
    }
    gfeat[static_cast<long>(ci) * plan.n_pix + pix] += acc;
  }
  const long dwork = static_cast<long>(plan.n_bins) * plan.n_pix;
#pragma omp parallel for schedule(static)
  for (long r = 0; r < dwork; ++r) {
    const int cell = plan.cell_of[r];
    if (cell < 0) continue;
    const int pix = static_cast<int>(r % plan.n_pix);
    double acc = 0.0;
    for (int ci = 0; ci < c; ++ci) {
      acc += feat[static_cast<long>(ci) * plan.n_pix + pix] *
             gout[static_cast<long>(ci) * plan.n_cells + cell];
    }
    gdp[r] += acc;
  }
}

void warp_forward(const double* x, double* y, int c, const WarpTaps& taps) {
  const long cells = static_cast<long>(taps.h) * taps.w;
  const long work = static_cast<long>(c) * cells;
#pragma omp parallel for schedule(static)
  for (long r = 0; r < work; ++r) {
    const long i = r % cells;
    const int ci = static_cast<int>(r / cells);
    const double* xp = x + ci * cells;
    double acc = 0.0;
    for (int t = 0; t < 4; ++t) {
      const int32_t j = taps.idx[static_cast<size_t>(t) * cells + i];
      if (j >= 0) acc += taps.wgt[static_cast<size_t>(t) * cells + i] * xp[j];
    }
    y[r] = acc;
  }
}

void warp_backward(const double* gy, double* gx, int c, const WarpTaps& taps) {
  const long cells = static_cast<long>(taps.h) * taps.w;
  // Channels write disjoint ranges; scatter within a channel stays serial.
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < c; ++ci) {
    const double* gp = gy + ci * cells;
    double* gxp = gx + ci * cells;
    for (long i = 0; i < cells; ++i) {
      const double g = gp[i];
      if (g == 0.0) continue;
      for (int t = 0; t < 4; ++t) {
        const int32_t j = taps.idx[static_cast<size_t>(t) * cells + i];
        if (j >= 0) gxp[j] += taps.wgt[static_cast<size_t>(t) * cells + i] * g;
      }
    }
  }
}

}  // namespace qbev::kern::par

namespace qbev::kern {

Impl& impl() {
  static Impl g = Impl::openmp;
  return g;
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    const Conv2dDims& d) {
  impl() == Impl::serial ? ref::conv2d_forward(x, w, b, y, d) : par::conv2d_forward(x, w, b, y, d);
}
void conv2d_backward_input(const double* gy, const double* w, double* gx, const Conv2dDims& d) {
  impl() == Impl::serial ? ref::conv2d_backward_input(gy, w, gx, d)
                         : par::conv2d_backward_input(gy, w, gx, d);
}
void conv2d_backward_weight(const double* x, const double* gy, double* gw, double* gb,
                            const Conv2dDims& d) {
  impl() == Impl::serial ? ref::conv2d_backward_weight(x, gy, gw, gb, d)
                         : par::conv2d_backward_weight(x, gy, gw, gb, d);
}
void splat_forward(const double* feat, const double* dp, double* out, int c,
                   const SplatIntervals& plan) {
  impl() == Impl::serial ? ref::splat_forward(feat, dp, out, c, plan)
                         : par::splat_forward(feat, dp, out, c, plan);
}
void splat_backward(const double* gout, const double* feat, const double* dp, double* gfeat,
                    double* gdp, int c, const SplatIntervals& plan) {
  impl() == Impl::serial ? ref::splat_backward(gout, feat, dp, gfeat, gdp, c, plan)
                         : par::splat_backward(gout, feat, dp, gfeat, gdp, c, plan);
}
void warp_forward(const double* x, double* y, int c, const WarpTaps& taps) {
  impl() == Impl::serial ? ref::warp_forward(x, y, c, taps) : par::warp_forward(x, y, c, taps);
}
void warp_backward(const double* gy, double* gx, int c, const WarpTaps& taps) {
  impl() == Impl::serial ? ref::warp_backward(gy, gx, c, taps) : par::warp_backward(gy, gx, c, taps);
}

}  // namespace qbev::kern
