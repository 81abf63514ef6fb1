#include "arthro/kernels.hpp"

// OpenMP variants. Work is partitioned over slices whose results never
// overlap (output plane for forward, input plane for backward-input,
// output channel for backward-params), so accumulation order within each
// slice is identical to the serial reference.
namespace arthro::kernels::omp {

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b,
                    int stride, int pad, Tensor& y) {
  const int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  y = Tensor({N, Co, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < Co; ++oc)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = b ? b->data[oc] : 0.0;
          for (int ic = 0; ic < Ci; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                acc += x.at(n, ic, iy, ix) * w.at(oc, ic, ky, kx);
              }
            }
          y.at(n, oc, oy, ox) = acc;
        }
}

void conv2d_backward_input(const Tensor& w, const Tensor& gy,
                           int stride, int pad, int H, int W, Tensor& gx) {
  const int N = gy.shape[0], Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
  const int Ci = w.shape[1], kh = w.shape[2], kw = w.shape[3];
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n)
    for (int ic = 0; ic < Ci; ++ic)
      for (int iy = 0; iy < H; ++iy)
        for (int ix = 0; ix < W; ++ix) {
          double acc = 0.0;
          for (int ky = 0; ky < kh; ++ky) {
            const int num_y = iy + pad - ky;
            if (num_y < 0 || num_y % stride) continue;
            const int oy = num_y / stride;
            if (oy >= Ho) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int num_x = ix + pad - kx;
              if (num_x < 0 || num_x % stride) continue;
              const int ox = num_x / stride;
              if (ox >= Wo) continue;
              for (int oc = 0; oc < Co; ++oc)
                acc += w.at(oc, ic, ky, kx) * gy.at(n, oc, oy, ox);
            }
          }
          gx.at(n, ic, iy, ix) += acc;
        }
}

void conv2d_backward_params(const Tensor& x, const Tensor& gy,
                            int stride, int pad, Tensor& gw, Tensor* gb) {
  const int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Co = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3];
  const int kh = gw.shape[2], kw = gw.shape[3];
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < Co; ++oc) {
    for (int n = 0; n < N; ++n)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double g = gy.at(n, oc, oy, ox);
          if (gb) gb->data[oc] += g;
          for (int ic = 0; ic < Ci; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                gw.at(oc, ic, ky, kx) += g * x.at(n, ic, iy, ix);
              }
            }
        }
  }
}

}  // namespace arthro::kernels::omp
