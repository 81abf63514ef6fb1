#include "arthro/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace arthro::nn {

Conv2d::Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  Tensor wt({out_ch, in_ch, k, k});
  const double sd = std::sqrt(2.0 / (in_ch * k * k));
  for (auto& v : wt.data) v = rng.normal(0.0, sd);
  w = ag::leaf(std::move(wt));
  b = ag::leaf(Tensor({out_ch}));
}

BatchNorm2d::BatchNorm2d(int channels)
    : gamma(ag::leaf(Tensor({channels}, 1.0))),
      beta(ag::leaf(Tensor({channels}))),
      running_mean(Tensor({channels})),
      running_var(Tensor({channels}, 1.0)) {}

Var BatchNorm2d::operator()(const Var& x, bool training) {
  const int N = x->value.shape[0], H = x->value.shape[2], W = x->value.shape[3];
  const int C = x->value.shape[1];
  if (training) {
    Var mu = ag::channel_mean(x);
    Var xc = ag::sub(x, ag::broadcast_channel(mu, N, H, W));
    Var var = ag::channel_mean(ag::mul(xc, xc));
    for (int c = 0; c < C; ++c) {
      running_mean.data[c] =
          (1 - momentum) * running_mean.data[c] + momentum * mu->value.data[c];
      running_var.data[c] =
          (1 - momentum) * running_var.data[c] + momentum * var->value.data[c];
    }
    Var inv_sd = ag::div(gamma, ag::sqrt_v(ag::add_scalar(var, eps)));
    return ag::add(ag::mul(xc, ag::broadcast_channel(inv_sd, N, H, W)),
                   ag::broadcast_channel(beta, N, H, W));
  }
  Tensor scale({C}), shift({C});
  for (int c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(running_var.data[c] + eps);
    scale.data[c] = inv;
    shift.data[c] = -running_mean.data[c] * inv;
  }
  Var xn = ag::add(ag::mul(x, ag::broadcast_channel(ag::constant(scale), N, H, W)),
                   ag::broadcast_channel(ag::constant(shift), N, H, W));
  return ag::add(ag::mul(xn, ag::broadcast_channel(gamma, N, H, W)),
                 ag::broadcast_channel(beta, N, H, W));
}

Adam::Adam(std::vector<Var> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape);
    v_.emplace_back(p->value.shape);
  }
}

void Adam::step(double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Var& p = params_[k];
    const bool has_grad = !p->grad.shape.empty();
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double g = has_grad ? p->grad.data[i] : 0.0;
      if (weight_decay != 0.0) g += weight_decay * p->value.data[i];
      m_[k].data[i] = beta1_ * m_[k].data[i] + (1 - beta1_) * g;
      v_[k].data[i] = beta2_ * v_[k].data[i] + (1 - beta2_) * g * g;
      const double mhat = m_[k].data[i] / bc1;
      const double vhat = v_[k].data[i] / bc2;
      p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::restore(std::vector<Tensor> m, std::vector<Tensor> v, int64_t t) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw std::invalid_argument("Adam::restore: state size mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

}  // namespace arthro::nn
