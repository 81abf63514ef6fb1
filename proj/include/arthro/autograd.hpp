#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "arthro/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor. Double precision
// throughout so analytic gradients can be checked against central finite
// differences at tight tolerances.
namespace arthro::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;           // allocated lazily during backward
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backfn;  // scatters this->grad into parents

  Tensor& g() {
    if (grad.shape.empty()) grad = Tensor(value.shape);
    return grad;
  }
};

Var constant(Tensor t);
Var leaf(Tensor t);  // requires_grad = true

// Runs reverse accumulation from a scalar (numel-1) root.
void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var abs_v(const Var& a);
Var exp_v(const Var& a);
Var log_v(const Var& a);
Var sqrt_v(const Var& a);
Var sigmoid_v(const Var& a);
Var relu_v(const Var& a);
Var clamp_v(const Var& a, double lo, double hi);  // zero gradient where clamped

// ---- reductions / broadcast ----
Var sum_all(const Var& a);    // -> shape {1}
Var mean_all(const Var& a);   // -> shape {1}
Var channel_mean(const Var& a);              // (N,C,H,W) -> (C), mean over N,H,W
Var broadcast_channel(const Var& c, int N, int H, int W);  // (C) -> (N,C,H,W)
Var mean_over_channels(const Var& a);        // (N,C,H,W) -> (N,1,H,W)

// ---- structured ----
Var softmax_channels(const Var& a);          // softmax over C at each (n,y,x)
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& a, int c0, int c1);  // channels [c0, c1)
// Forward difference along x (resp. y); last column (resp. row) zero.
Var forward_diff_x(const Var& a);
Var forward_diff_y(const Var& a);
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var maxpool2x2(const Var& x);
// Bilinear resize with half-pixel centre convention, border-clamped.
Var resize_bilinear(const Var& x, int Ho, int Wo);
// out(n,c,y,x) = src sampled at (y, x + direction*disp(n,0,y,x)*W),
// horizontal two-point interpolation, border-clamped. Differentiable in
// both src and disp (zero disparity gradient at the clamp boundary).
Var warp_horizontal(const Var& src, const Var& disp, int direction);
// 3x3 window mean where windows are clipped at image borders (statistics
// over the pixels actually inside the image).
Var box_mean3(const Var& a);

// ---- gradient verification ----
struct GradCheck {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool ok = false;
};

// f builds a scalar Var from leaves; leaves are perturbed by central
// differences with the given step. rel error uses max(|analytic|,|numeric|,eps)
// as denominator.
GradCheck check_gradients(const std::function<Var(const std::vector<Var>&)>& f,
                          const std::vector<Tensor>& inputs,
                          double step = 1e-5, double rel_tol = 1e-3,
                          double abs_floor = 1e-7);

}  // namespace arthro::ag
