#include "arthro/kernels.hpp"

namespace arthro::kernels {

namespace {
Backend g_backend = Backend::OpenMP;
}

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }

void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b,
                    int stride, int pad, Tensor& y) {
  if (g_backend == Backend::OpenMP)
    omp::conv2d_forward(x, w, b, stride, pad, y);
  else
    serial::conv2d_forward(x, w, b, stride, pad, y);
}

void conv2d_backward_input(const Tensor& w, const Tensor& gy,
                           int stride, int pad, int H, int W, Tensor& gx) {
  if (g_backend == Backend::OpenMP)
    omp::conv2d_backward_input(w, gy, stride, pad, H, W, gx);
  else
    serial::conv2d_backward_input(w, gy, stride, pad, H, W, gx);
}

void conv2d_backward_params(const Tensor& x, const Tensor& gy,
                            int stride, int pad, Tensor& gw, Tensor* gb) {
  if (g_backend == Backend::OpenMP)
    omp::conv2d_backward_params(x, gy, stride, pad, gw, gb);
  else
    serial::conv2d_backward_params(x, gy, stride, pad, gw, gb);
}

}  // namespace arthro::kernels
