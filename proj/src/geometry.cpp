#include "arthro/geometry.hpp"

#include <stdexcept>

namespace arthro::geometry {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  if (!a.all_finite() || !b.all_finite())
    throw std::invalid_argument(std::string(op) + ": non-finite input");
}

}  // namespace

Var warp_horizontal(const Var& source, const Var& disparity, int direction) {
  return ag::warp_horizontal(source, disparity, direction);
}

Tensor warp_horizontal(const Tensor& source, const Tensor& disparity, int direction) {
  return ag::warp_horizontal(ag::constant(source), ag::constant(disparity), direction)->value;
}

Var ssim_map(const Var& a, const Var& b) {
  check_pair(a->value, b->value, "ssim_map");
  using namespace ag;
  Var mu_a = box_mean3(a);
  Var mu_b = box_mean3(b);
  Var var_a = sub(box_mean3(mul(a, a)), mul(mu_a, mu_a));
  Var var_b = sub(box_mean3(mul(b, b)), mul(mu_b, mu_b));
  Var cov = sub(box_mean3(mul(a, b)), mul(mu_a, mu_b));
  Var num = mul(add_scalar(scale(mul(mu_a, mu_b), 2.0), kSsimC1),
                add_scalar(scale(cov, 2.0), kSsimC2));
  Var den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), kSsimC1),
                add_scalar(add(var_a, var_b), kSsimC2));
  Var ssim = div(num, den);
  if (a->value.shape[1] > 1) ssim = mean_over_channels(ssim);
  return ssim;
}

Tensor ssim_map(const Tensor& a, const Tensor& b) {
  return ssim_map(ag::constant(a), ag::constant(b))->value;
}

Var grad_x(const Var& g) { return ag::forward_diff_x(g); }
Var grad_y(const Var& g) { return ag::forward_diff_y(g); }

Tensor grad_x(const Tensor& g) { return ag::forward_diff_x(ag::constant(g))->value; }
Tensor grad_y(const Tensor& g) { return ag::forward_diff_y(ag::constant(g))->value; }

}  // namespace arthro::geometry
