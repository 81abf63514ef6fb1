#pragma once

#include "arthro/autograd.hpp"

// Differentiable image-space primitives: horizontal disparity warping,
// windowed SSIM, and forward-difference gradients. Images are NCHW tensors
// with values in [0,1]; disparity maps are (N,1,H,W) in units of image-width
// fraction (a value d shifts by d*W pixels).
namespace arthro::geometry {

using ag::Var;

inline constexpr double kSsimC1 = 1e-4;  // (0.01)^2, intensity range 1
inline constexpr double kSsimC2 = 9e-4;  // (0.03)^2

// Reconstructing the left view samples the right image at x + d*W
// (direction +1); reconstructing the right samples the left at x - d*W
// (direction -1). Out-of-range coordinates clamp to the border.
Var warp_horizontal(const Var& source, const Var& disparity, int direction);
Tensor warp_horizontal(const Tensor& source, const Tensor& disparity, int direction);

// Per-pixel SSIM over a 3x3 border-clipped window; multi-channel inputs are
// averaged over channels. Output (N,1,H,W) with values in [-1,1].
Var ssim_map(const Var& a, const Var& b);
Tensor ssim_map(const Tensor& a, const Tensor& b);

Var grad_x(const Var& g);
Var grad_y(const Var& g);
Tensor grad_x(const Tensor& g);
Tensor grad_y(const Tensor& g);

}  // namespace arthro::geometry
