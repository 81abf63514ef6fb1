#include "arthro/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "arthro/geometry.hpp"

namespace arthro::losses {

namespace {

constexpr double kDiceSmooth = 1e-6;
constexpr double kProbClamp = 1e-7;

void check_scale_match(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3])
    throw std::invalid_argument(std::string(op) + ": scale mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace

Var seg_loss(const Tensor& annotation_onehot, const Var& averaged_prediction,
             const SegLossWeights& w) {
  using namespace ag;
  const Tensor& p = averaged_prediction->value;
  if (annotation_onehot.shape != p.shape)
    throw std::invalid_argument("seg_loss: shape mismatch");
  const int N = p.shape[0], C = p.shape[1], H = p.shape[2], W = p.shape[3];
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += p.at(n, c, y, x);
        if (std::fabs(s - 1.0) > 5e-5)
          throw std::invalid_argument("seg_loss: prediction rows not normalized");
      }

  Var y_const = constant(annotation_onehot);
  Var ce = scale(sum_all(mul(y_const, log_v(clamp_v(averaged_prediction, kProbClamp, 1.0)))),
                 -w.alpha_ce / (static_cast<double>(N) * H * W));

  // Soft Dice averaged over classes present in the annotation.
  std::vector<Var> dices;
  for (int c = 0; c < C; ++c) {
    double y_sum = 0.0;
    for (int n = 0; n < N; ++n)
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) y_sum += annotation_onehot.at(n, c, yy, xx);
    if (y_sum <= 0.0) continue;
    Tensor y_c({N, 1, H, W});
    for (int n = 0; n < N; ++n)
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) y_c.at(n, 0, yy, xx) = annotation_onehot.at(n, c, yy, xx);
    Var p_c = slice_channels(averaged_prediction, c, c + 1);
    Var inter = sum_all(mul(constant(y_c), p_c));
    Var num = add_scalar(scale(inter, 2.0), kDiceSmooth);
    Var den = add_scalar(sum_all(p_c), y_sum + kDiceSmooth);
    dices.push_back(div(num, den));
  }
  if (dices.empty()) throw std::invalid_argument("seg_loss: empty annotation");
  Var dice_mean = dices[0];
  for (size_t i = 1; i < dices.size(); ++i) dice_mean = add(dice_mean, dices[i]);
  dice_mean = scale(dice_mean, 1.0 / static_cast<double>(dices.size()));

  return add(ce, add_scalar(neg(dice_mean), 1.0));
}

Var average_seg_heads(const std::vector<Var>& heads) {
  if (heads.size() != 4)
    throw std::invalid_argument("average_seg_heads: expected 4 heads, got " +
                                std::to_string(heads.size()));
  Var s = ag::add(ag::add(heads[0], heads[1]), ag::add(heads[2], heads[3]));
  return ag::scale(s, 0.25);
}

Var appearance_loss(const Var& left, const Var& right, const Var& disparity,
                    Side side, double gamma) {
  using namespace ag;
  check_scale_match(left->value, right->value, "appearance_loss");
  check_scale_match(left->value, disparity->value, "appearance_loss");
  const Var& target = (side == Side::Left) ? left : right;
  const Var& source = (side == Side::Left) ? right : left;
  Var recon = geometry::warp_horizontal(source, disparity, side == Side::Left ? +1 : -1);
  Var ssim_term = mean_all(add_scalar(neg(geometry::ssim_map(target, recon)), 1.0));
  Var l1_term = mean_all(abs_v(sub(target, recon)));
  return add(scale(ssim_term, gamma / 2.0), scale(l1_term, 1.0 - gamma));
}

Var lr_consistency_loss(const Var& d_left, const Var& d_right, Side side) {
  using namespace ag;
  check_scale_match(d_left->value, d_right->value, "lr_consistency_loss");
  if (side == Side::Left) {
    Var sampled = geometry::warp_horizontal(d_left, d_right, +1);
    return mean_all(abs_v(sub(d_left, sampled)));
  }
  Var sampled = geometry::warp_horizontal(d_right, d_left, -1);
  return mean_all(abs_v(sub(d_right, sampled)));
}

Var smoothness_loss(const Var& image, const Var& disparity) {
  using namespace ag;
  check_scale_match(image->value, disparity->value, "smoothness_loss");
  Var wx = exp_v(neg(mean_over_channels(abs_v(geometry::grad_x(image)))));
  Var wy = exp_v(neg(mean_over_channels(abs_v(geometry::grad_y(image)))));
  Var dx = abs_v(geometry::grad_x(disparity));
  Var dy = abs_v(geometry::grad_y(disparity));
  return mean_all(add(mul(dx, wx), mul(dy, wy)));
}

Var depth_loss(const StereoSample& pair, const DisparityPyramid& pyramid,
               const DepthLossWeights& w) {
  using namespace ag;
  if (pyramid.left.size() != kPyramidScales || pyramid.right.size() != kPyramidScales)
    throw std::invalid_argument("depth_loss: pyramid must have 4 scales per side");
  if (!pair.left.all_finite() || !pair.right.all_finite())
    throw std::invalid_argument("depth_loss: non-finite image");

  Var left_i = constant(pair.left);
  Var right_i = constant(pair.right);
  Var total;
  for (int i = 0; i < kPyramidScales; ++i) {
    const Tensor& dl = pyramid.left[i]->value;
    if (i > 0) {
      left_i = resize_bilinear(left_i, dl.shape[2], dl.shape[3]);
      right_i = resize_bilinear(right_i, dl.shape[2], dl.shape[3]);
    }
    check_scale_match(left_i->value, dl, "depth_loss");
    Var ap = add(appearance_loss(left_i, right_i, pyramid.left[i], Side::Left, w.gamma),
                 appearance_loss(left_i, right_i, pyramid.right[i], Side::Right, w.gamma));
    Var lr = add(lr_consistency_loss(pyramid.left[i], pyramid.right[i], Side::Left),
                 lr_consistency_loss(pyramid.left[i], pyramid.right[i], Side::Right));
    Var ds = add(smoothness_loss(left_i, pyramid.left[i]),
                 smoothness_loss(right_i, pyramid.right[i]));
    Var term = add(add(scale(ap, w.alpha_ap), scale(lr, w.alpha_lr)), scale(ds, w.alpha_ds));
    total = total ? add(total, term) : term;
  }
  return total;
}

// ------------------------------------------------------------- grad suite

namespace {

Tensor random_image(int C, int H, int W, Rng& rng) {
  Tensor t({1, C, H, W});
  for (auto& v : t.data) v = rng.uniform(0.05, 0.95);
  return t;
}

// Disparity values keeping every sample position away from the border and
// from interpolation-cell edges for the given warp direction, so central
// differences stay on one smooth piece.
Tensor safe_disparity(int H, int W, int direction, Rng& rng) {
  Tensor d({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double room = (direction > 0) ? (W - 1.0 - x) : x;
      double shift;
      if (room > 1.4) {
        shift = rng.uniform(0.15, 0.85);
        if (room > 2.4 && rng.bernoulli(0.5)) shift += 1.0;
      } else {
        shift = room + 0.6 + rng.uniform(0.0, 0.3);  // lands in the clamp zone
      }
      d.at(0, 0, y, x) = shift / W;
    }
  return d;
}

Tensor random_probs(int H, int W, Rng& rng) {
  Tensor p({1, kNumClasses, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double z = 0.0;
      for (int c = 0; c < kNumClasses; ++c) {
        const double e = std::exp(rng.uniform(-1.0, 1.0));
        p.at(0, c, y, x) = e;
        z += e;
      }
      for (int c = 0; c < kNumClasses; ++c) p.at(0, c, y, x) /= z;
    }
  return p;
}

Tensor random_onehot(int H, int W, Rng& rng) {
  LabelMask m(H, W);
  for (auto& v : m.v) v = static_cast<uint8_t>(rng.randint(0, kNumClasses - 1));
  return m.onehot();
}

}  // namespace

std::vector<GradSuiteRow> gradient_suite(uint64_t seed, int instances_per_op) {
  Rng rng(seed);
  const int H = 6, W = 6;
  std::vector<GradSuiteRow> rows;

  auto run = [&](const std::string& name, auto make_case) {
    GradSuiteRow row{name, instances_per_op, 0.0, true};
    for (int k = 0; k < instances_per_op; ++k) {
      auto [fn, inputs] = make_case();
      ag::GradCheck r = ag::check_gradients(fn, inputs);
      row.max_rel_err = std::max(row.max_rel_err, r.max_rel_err);
      if (!r.ok) row.pass = false;
    }
    rows.push_back(row);
  };

  using Fn = std::function<Var(const std::vector<Var>&)>;

  run("warp_horizontal", [&]() {
    std::vector<Tensor> in{random_image(1, H, W, rng), safe_disparity(H, W, +1, rng)};
    Fn fn = [](const std::vector<Var>& v) {
      return ag::mean_all(geometry::warp_horizontal(v[0], v[1], +1));
    };
    return std::make_pair(fn, in);
  });

  run("ssim_map", [&]() {
    std::vector<Tensor> in{random_image(1, H, W, rng), random_image(1, H, W, rng)};
    Fn fn = [](const std::vector<Var>& v) {
      return ag::mean_all(geometry::ssim_map(v[0], v[1]));
    };
    return std::make_pair(fn, in);
  });

  run("seg_loss", [&]() {
    Tensor onehot = random_onehot(H, W, rng);
    std::vector<Tensor> in{random_probs(H, W, rng)};
    Fn fn = [onehot](const std::vector<Var>& v) {
      return seg_loss(onehot, v[0], SegLossWeights{});
    };
    return std::make_pair(fn, in);
  });

  run("appearance_loss", [&]() {
    std::vector<Tensor> in{random_image(3, H, W, rng), random_image(3, H, W, rng),
                           safe_disparity(H, W, +1, rng)};
    Fn fn = [](const std::vector<Var>& v) {
      return appearance_loss(v[0], v[1], v[2], Side::Left, 0.85);
    };
    return std::make_pair(fn, in);
  });

  run("lr_consistency_loss", [&]() {
    std::vector<Tensor> in{random_image(1, H, W, rng), safe_disparity(H, W, +1, rng)};
    in[0].shape = {1, 1, H, W};
    Fn fn = [](const std::vector<Var>& v) {
      return lr_consistency_loss(v[0], v[1], Side::Left);
    };
    return std::make_pair(fn, in);
  });

  run("smoothness_loss", [&]() {
    std::vector<Tensor> in{random_image(3, H, W, rng), safe_disparity(H, W, +1, rng)};
    Fn fn = [](const std::vector<Var>& v) { return smoothness_loss(v[0], v[1]); };
    return std::make_pair(fn, in);
  });

  return rows;
}

}  // namespace arthro::losses
