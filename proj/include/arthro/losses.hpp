#pragma once

#include <string>
#include <vector>

#include "arthro/autograd.hpp"
#include "arthro/types.hpp"

// Training objectives: combined cross-entropy + soft-Dice segmentation loss
// and the three-term multi-scale self-supervised depth loss (appearance,
// left-right consistency, edge-aware smoothness).
namespace arthro::losses {

using ag::Var;

struct SegLossWeights {
  double alpha_ce = 0.5;
};

struct DepthLossWeights {
  double alpha_ap = 1.0;
  double alpha_lr = 1.0;
  double alpha_ds = 0.1;
  double gamma = 0.85;
};

inline constexpr int kPyramidScales = 4;

// Left/right disparity maps at scales 0..3, scale i at (H/2^i, W/2^i).
struct DisparityPyramid {
  std::vector<Var> left, right;
};

enum class Side { Left, Right };

// alpha_ce * CE(y, p) + (1 - soft multi-class Dice), Dice averaged over
// classes present in the annotation, smoothing 1e-6, CE prob clamp 1e-7.
Var seg_loss(const Tensor& annotation_onehot, const Var& averaged_prediction,
             const SegLossWeights& w);

// Elementwise mean of the four full-resolution probability heads.
Var average_seg_heads(const std::vector<Var>& heads);

// gamma*(1-SSIM)/2 + (1-gamma)*L1 between an image and its reconstruction
// warped from the opposite view.
Var appearance_loss(const Var& left, const Var& right, const Var& disparity,
                    Side side, double gamma);

// Mean L1 between a disparity map and itself resampled through the
// opposite-side map.
Var lr_consistency_loss(const Var& d_left, const Var& d_right, Side side);

// Mean |grad d| * exp(-|grad I|), per axis.
Var smoothness_loss(const Var& image, const Var& disparity);

// Sum over 4 scales of the three weighted terms for both sides. The image
// pyramid is built by repeated bilinear downsampling of the pair.
Var depth_loss(const StereoSample& pair, const DisparityPyramid& pyramid,
               const DepthLossWeights& w);

// Finite-difference verification of every differentiable loss/primitive,
// shared by `arthro gradcheck` and the acceptance suite.
struct GradSuiteRow {
  std::string name;
  int instances = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};
std::vector<GradSuiteRow> gradient_suite(uint64_t seed, int instances_per_op);

}  // namespace arthro::losses
