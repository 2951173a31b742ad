#pragma once

#include <cstdint>
#include <vector>

namespace qbev::kern {

// Every kernel has a serial reference implementation (kern::ref) and an
// OpenMP one (kern::par). Both compute each output element with the same
// sequential inner loop, so results are bit-identical regardless of thread
// count; tests assert exact equality. The dispatcher picks the active
// implementation via impl().
enum class Impl { serial, openmp };

Impl& impl();
int max_threads();

struct Conv2dDims {
  int n = 1;       // batch (cameras fold in here)
  int cin = 0, hin = 0, win = 0;
  int cout = 0, k = 1, stride = 1, pad = 0;
  int hout = 0, wout = 0;

  static Conv2dDims make(int n, int cin, int hin, int win, int cout, int k, int stride, int pad) {
    Conv2dDims d{n, cin, hin, win, cout, k, stride, pad, 0, 0};
    d.hout = (hin + 2 * pad - k) / stride + 1;
    d.wout = (win + 2 * pad - k) / stride + 1;
    return d;
  }
};

// Valid output-column range [lo, hi] keeping ox*stride - pad + kx inside
// [0, win). Shared by the reference and OpenMP kernels so their loop
// structures stay identical.
inline void conv_ox_range(int kx, int pad, int stride, int win, int wout, int& lo, int& hi) {
  const int num = pad - kx;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  const int top = win - 1 + pad - kx;
  hi = top < 0 ? -1 : top / stride;
  if (hi > wout - 1) hi = wout - 1;
}

// x: (n,cin,hin,win), w: (cout,cin,k,k), b: (cout) or null, y: (n,cout,hout,wout)
void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    const Conv2dDims& d);
// gx accumulated (+=), shape of x
void conv2d_backward_input(const double* gy, const double* w, double* gx, const Conv2dDims& d);
// gw/gb accumulated (+=)
void conv2d_backward_weight(const double* x, const double* gy, double* gw, double* gb,
                            const Conv2dDims& d);

// Depth-weighted feature scatter into BEV cells, precomputed as intervals:
// points sorted by destination cell. feat: (c, n_pix), dp: (n_bins, n_pix),
// out: (c, n_cells) accumulated (+=).
struct SplatIntervals {
  int n_cells = 0;
  int n_pix = 0;
  int n_bins = 0;
  std::vector<int32_t> cell_ids;      // one entry per occupied cell
  std::vector<int32_t> starts;        // into point_pixel/point_bin
  std::vector<int32_t> counts;
  std::vector<int32_t> point_pixel;   // sorted by destination cell
  std::vector<int32_t> point_bin;
  std::vector<int32_t> cell_of;       // (n_bins*n_pix) -> cell or -1
};

void splat_forward(const double* feat, const double* dp, double* out, int c,
                   const SplatIntervals& plan);
// gfeat: (c, n_pix) accumulated; gdp: (n_bins, n_pix) accumulated
void splat_backward(const double* gout, const double* feat, const double* dp, double* gfeat,
                    double* gdp, int c, const SplatIntervals& plan);

// Bilinear resampling of a (c,h,w) raster at precomputed taps. Each output
// cell reads up to four input cells; missing taps contribute zero.
struct WarpTaps {
  int h = 0, w = 0;
  std::vector<int32_t> idx;  // (4, h*w), -1 for out-of-range taps
  std::vector<double> wgt;   // (4, h*w)
};

void warp_forward(const double* x, double* y, int c, const WarpTaps& taps);
// gx accumulated (+=)
void warp_backward(const double* gy, double* gx, int c, const WarpTaps& taps);

namespace ref {
void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    const Conv2dDims& d);
void conv2d_backward_input(const double* gy, const double* w, double* gx, const Conv2dDims& d);
void conv2d_backward_weight(const double* x, const double* gy, double* gw, double* gb,
                            const Conv2dDims& d);
void splat_forward(const double* feat, const double* dp, double* out, int c,
                   const SplatIntervals& plan);
void splat_backward(const double* gout, const double* feat, const double* dp, double* gfeat,
                    double* gdp, int c, const SplatIntervals& plan);
void warp_forward(const double* x, double* y, int c, const WarpTaps& taps);
void warp_backward(const double* gy, double* gx, int c, const WarpTaps& taps);
}  // namespace ref

namespace par {
void conv2d_forward(const double* x, const double* w, const double* b, double* y,
                    const Conv2dDims& d);
void conv2d_backward_input(const double* gy, const double* w, double* gx, const Conv2dDims& d);
void conv2d_backward_weight(const double* x, const double* gy, double* gw, double* gb,
                            const Conv2dDims& d);
void splat_forward(const double* feat, const double* dp, double* out, int c,
                   const SplatIntervals& plan);
void splat_backward(const double* gout, const double* feat, const double* dp, double* gfeat,
                    double* gdp, int c, const SplatIntervals& plan);
void warp_forward(const double* x, double* y, int c, const WarpTaps& taps);
void warp_backward(const double* gy, double* gx, int c, const WarpTaps& taps);
}  // namespace par

}  // namespace qbev::kern
