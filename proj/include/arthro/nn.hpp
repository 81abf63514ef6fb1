#pragma once

#include <string>
#include <utility>
#include <vector>

#include "arthro/autograd.hpp"

namespace arthro::nn {

using ag::Var;

using ParamList = std::vector<std::pair<std::string, Var>>;
// non-learned state that still has to persist (batch-norm running stats)
using BufferList = std::vector<std::pair<std::string, Tensor*>>;

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng);

  Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

struct BatchNorm2d {
  Var gamma, beta;
  Tensor running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Var operator()(const Var& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
  void collect_buffers(BufferList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".running_mean", &running_mean);
    out.emplace_back(prefix + ".running_var", &running_var);
  }
};

// conv3x3 + BN + ReLU
struct ConvBnRelu {
  Conv2d conv;
  BatchNorm2d bn;

  ConvBnRelu() = default;
  ConvBnRelu(int in_ch, int out_ch, int k, int stride, Rng& rng)
      : conv(in_ch, out_ch, k, stride, k / 2, rng), bn(out_ch) {}

  Var operator()(const Var& x, bool training) {
    return ag::relu_v(bn(conv(x), training));
  }
  void collect(ParamList& out, const std::string& prefix) const {
    conv.collect(out, prefix + ".conv");
    bn.collect(out, prefix + ".bn");
  }
  void collect_buffers(BufferList& out, const std::string& prefix) {
    bn.collect_buffers(out, prefix + ".bn");
  }
};

// Adam with optional L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Var> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step(double lr, double weight_decay);
  void zero_grad() { ag::zero_grad(params_); }

  int64_t step_count() const { return t_; }
  const std::vector<Tensor>& moment1() const { return m_; }
  const std::vector<Tensor>& moment2() const { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, int64_t t);

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

}  // namespace arthro::nn
