#pragma once

#include "arthro/tensor.hpp"

// Convolution inner loops, the hot path of every forward/backward pass.
// Two implementations share one dispatch surface: an OpenMP-parallel one
// (default) and a serial reference used for testing and benchmarking.
// Both are deterministic: parallel loops only partition independent output
// slices, so results are bitwise identical across backends and thread counts.
namespace arthro::kernels {

enum class Backend { Serial, OpenMP };

Backend backend();
void set_backend(Backend b);

// x: (N,Ci,H,W), w: (Co,Ci,kh,kw), b: (Co) or null; y resized to (N,Co,Ho,Wo).
void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b,
                    int stride, int pad, Tensor& y);

// Accumulates into gx (same shape as x). Gather form over input pixels.
void conv2d_backward_input(const Tensor& w, const Tensor& gy,
                           int stride, int pad, int H, int W, Tensor& gx);

// Accumulates into gw / gb.
void conv2d_backward_params(const Tensor& x, const Tensor& gy,
                            int stride, int pad, Tensor& gw, Tensor* gb);

namespace serial {
void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b,
                    int stride, int pad, Tensor& y);
void conv2d_backward_input(const Tensor& w, const Tensor& gy,
                           int stride, int pad, int H, int W, Tensor& gx);
void conv2d_backward_params(const Tensor& x, const Tensor& gy,
                            int stride, int pad, Tensor& gw, Tensor* gb);
}  // namespace serial

namespace omp {
void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* b,
                    int stride, int pad, Tensor& y);
void conv2d_backward_input(const Tensor& w, const Tensor& gy,
                           int stride, int pad, int H, int W, Tensor& gx);
void conv2d_backward_params(const Tensor& x, const Tensor& gy,
                            int stride, int pad, Tensor& gw, Tensor* gb);
}  // namespace omp

}  // namespace arthro::kernels
