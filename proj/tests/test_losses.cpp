#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "arthro/geometry.hpp"
#include "arthro/losses.hpp"

using namespace arthro;
using namespace arthro::losses;
using ag::Var;

namespace {

Tensor random_image(int C, int H, int W, Rng& rng) {
  Tensor t({1, C, H, W});
  for (auto& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

Tensor uniform_probs(int H, int W) {
  return Tensor({1, kNumClasses, H, W}, 1.0 / kNumClasses);
}

}  // namespace

TEST_CASE("seg_loss at a perfect one-hot prediction is ~0") {
  LabelMask m(4, 4);
  m.at(1, 1) = 2;
  m.at(2, 3) = 4;
  Tensor onehot = m.onehot();
  // exact copy of the annotation as probabilities
  Var pred = ag::constant(onehot);
  double loss = seg_loss(onehot, pred, SegLossWeights{})->value.data[0];
  CHECK(loss <= 0.5 * (-std::log(1.0 - 1e-7)) + 1e-5);
}

TEST_CASE("seg_loss uniform prediction on single-class image: CE term = alpha*ln5") {
  LabelMask m(4, 4);  // all background
  Tensor onehot = m.onehot();
  Var pred = ag::constant(uniform_probs(4, 4));
  double loss = seg_loss(onehot, pred, SegLossWeights{})->value.data[0];
  // Dice term: one present class, p_sum = 16/5, inter = 16/5
  const double dice = (2 * 16.0 / 5 + 1e-6) / (16.0 / 5 + 16.0 + 1e-6);
  const double expect = 0.5 * std::log(5.0) + (1.0 - dice);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("seg_loss matches hand-evaluated CE + soft-Dice on a 2x2 case") {
  // 2x2 image, classes 0 and 1 active
  LabelMask m(2, 2);
  m.at(0, 0) = 0;
  m.at(0, 1) = 1;
  m.at(1, 0) = 1;
  m.at(1, 1) = 0;
  Tensor onehot = m.onehot();
  Tensor p({1, kNumClasses, 2, 2});
  const double probs[4][5] = {{0.7, 0.1, 0.1, 0.05, 0.05},
                              {0.2, 0.6, 0.1, 0.05, 0.05},
                              {0.3, 0.5, 0.1, 0.05, 0.05},
                              {0.6, 0.2, 0.1, 0.05, 0.05}};
  int idx = 0;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x, ++idx)
      for (int c = 0; c < 5; ++c) p.at(0, c, y, x) = probs[idx][c];

  // manual arithmetic
  const double ce =
      -(std::log(0.7) + std::log(0.6) + std::log(0.5) + std::log(0.6)) / 4.0;
  // class 0: y = {1,0,0,1}, p = {0.7,0.2,0.3,0.6}; class 1: y = {0,1,1,0}, p = {0.1,0.6,0.5,0.2}
  const double dice0 = (2 * (0.7 + 0.6) + 1e-6) / ((0.7 + 0.2 + 0.3 + 0.6) + 2.0 + 1e-6);
  const double dice1 = (2 * (0.6 + 0.5) + 1e-6) / ((0.1 + 0.6 + 0.5 + 0.2) + 2.0 + 1e-6);
  const double expect = 0.5 * ce + (1.0 - 0.5 * (dice0 + dice1));

  double loss = seg_loss(onehot, ag::constant(p), SegLossWeights{})->value.data[0];
  CHECK(loss == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("seg_loss rejects unnormalized prediction") {
  LabelMask m(2, 2);
  Tensor bad({1, kNumClasses, 2, 2}, 0.3);
  CHECK_THROWS_AS(seg_loss(m.onehot(), ag::constant(bad), SegLossWeights{}),
                  std::invalid_argument);
}

TEST_CASE("seg_loss is permutation-equivariant under class relabeling") {
  Rng rng(9);
  LabelMask m(4, 4);
  for (auto& v : m.v) v = static_cast<uint8_t>(rng.randint(0, 4));
  Tensor p({1, kNumClasses, 4, 4});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      double z = 0;
      for (int c = 0; c < 5; ++c) {
        p.at(0, c, y, x) = std::exp(rng.uniform(-1, 1));
        z += p.at(0, c, y, x);
      }
      for (int c = 0; c < 5; ++c) p.at(0, c, y, x) /= z;
    }
  const int perm[5] = {3, 0, 4, 1, 2};
  LabelMask m2(4, 4);
  for (size_t i = 0; i < m.v.size(); ++i) m2.v[i] = static_cast<uint8_t>(perm[m.v[i]]);
  Tensor p2({1, kNumClasses, 4, 4});
  for (int c = 0; c < 5; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) p2.at(0, perm[c], y, x) = p.at(0, c, y, x);
  double l1 = seg_loss(m.onehot(), ag::constant(p), SegLossWeights{})->value.data[0];
  double l2 = seg_loss(m2.onehot(), ag::constant(p2), SegLossWeights{})->value.data[0];
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
}

TEST_CASE("average_seg_heads") {
  Rng rng(10);
  Tensor h = uniform_probs(3, 3);
  std::vector<Var> same{ag::constant(h), ag::constant(h), ag::constant(h), ag::constant(h)};
  Tensor avg = average_seg_heads(same)->value;
  for (int64_t i = 0; i < avg.numel(); ++i) CHECK(avg.data[i] == doctest::Approx(h.data[i]));

  // four distinct one-hot heads at one pixel -> 0.25 per named class
  std::vector<Var> heads;
  for (int k = 0; k < 4; ++k) {
    Tensor t({1, kNumClasses, 1, 1});
    t.at(0, k, 0, 0) = 1.0;
    heads.push_back(ag::constant(t));
  }
  Tensor a2 = average_seg_heads(heads)->value;
  for (int c = 0; c < 4; ++c) CHECK(a2.at(0, c, 0, 0) == doctest::Approx(0.25));
  CHECK(a2.at(0, 4, 0, 0) == 0.0);

  // mean of normalized heads stays normalized
  std::vector<Var> rnd;
  for (int k = 0; k < 4; ++k) {
    Tensor t({1, kNumClasses, 3, 3});
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double z = 0;
        for (int c = 0; c < 5; ++c) {
          t.at(0, c, y, x) = std::exp(rng.uniform(-1, 1));
          z += t.at(0, c, y, x);
        }
        for (int c = 0; c < 5; ++c) t.at(0, c, y, x) /= z;
      }
    rnd.push_back(ag::constant(t));
  }
  Tensor a3 = average_seg_heads(rnd)->value;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += a3.at(0, c, y, x);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

  CHECK_THROWS_AS(average_seg_heads({ag::constant(h)}), std::invalid_argument);
}

TEST_CASE("appearance_loss zero point and gamma=0 collapse") {
  Rng rng(11);
  Tensor img = random_image(3, 6, 6, rng);
  Var zero_d = ag::constant(Tensor({1, 1, 6, 6}));
  Var l = appearance_loss(ag::constant(img), ag::constant(img), zero_d, Side::Left, 0.85);
  CHECK(l->value.data[0] == doctest::Approx(0.0).epsilon(1e-9));

  // gamma = 0 reduces to mean absolute reconstruction error
  Tensor right = random_image(3, 6, 6, rng);
  Tensor d({1, 1, 6, 6});
  for (auto& v : d.data) v = 0.25 / 6;
  Var l0 = appearance_loss(ag::constant(img), ag::constant(right), ag::constant(d),
                           Side::Left, 0.0);
  Tensor recon = geometry::warp_horizontal(right, d, +1);
  double mae = 0;
  for (int64_t i = 0; i < img.numel(); ++i) mae += std::fabs(img.data[i] - recon.data[i]);
  mae /= static_cast<double>(img.numel());
  CHECK(l0->value.data[0] == doctest::Approx(mae).epsilon(1e-12));
}

TEST_CASE("appearance_loss matches chained oracles on constant disparity") {
  Rng rng(12);
  Tensor left = random_image(1, 8, 8, rng);
  Tensor right = random_image(1, 8, 8, rng);
  Tensor d({1, 1, 8, 8}, 1.5 / 8);
  const double gamma = 0.85;
  Var l = appearance_loss(ag::constant(left), ag::constant(right), ag::constant(d),
                          Side::Left, gamma);
  Tensor recon = geometry::warp_horizontal(right, d, +1);
  Tensor ssim = geometry::ssim_map(left, recon);
  double ssim_term = 0, l1_term = 0;
  for (double v : ssim.data) ssim_term += (1.0 - v);
  ssim_term /= static_cast<double>(ssim.numel());
  for (int64_t i = 0; i < left.numel(); ++i) l1_term += std::fabs(left.data[i] - recon.data[i]);
  l1_term /= static_cast<double>(left.numel());
  const double expect = gamma / 2 * ssim_term + (1 - gamma) * l1_term;
  CHECK(l->value.data[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("lr_consistency_loss zero and constant-field cases") {
  Var z = ag::constant(Tensor({1, 1, 4, 4}));
  CHECK(lr_consistency_loss(z, z, Side::Left)->value.data[0] == 0.0);

  Tensor c({1, 1, 4, 4}, 0.07);
  Tensor dr({1, 1, 4, 4});
  Rng rng(13);
  for (auto& v : dr.data) v = rng.uniform(0.0, 0.2);
  CHECK(lr_consistency_loss(ag::constant(c), ag::constant(dr), Side::Left)->value.data[0] ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("lr_consistency_loss matches manual interpolation on a 1x4 row") {
  Tensor dl({1, 1, 1, 4});
  dl.data = {0.10, 0.20, 0.05, 0.15};
  Tensor dr({1, 1, 1, 4});
  dr.data = {0.125, 0.250, 0.0, 0.375};  // *W=4 -> shifts 0.5, 1.0, 0.0, 1.5
  double expect = 0;
  const double shifts[4] = {0.5, 1.0, 0.0, 1.5};
  for (int x = 0; x < 4; ++x) {
    double xs = std::min(std::max(x + shifts[x], 0.0), 3.0);
    const int x0 = static_cast<int>(xs);
    const int x1 = std::min(x0 + 1, 3);
    const double t = xs - x0;
    const double sampled = (1 - t) * dl.data[x0] + t * dl.data[x1];
    expect += std::fabs(dl.data[x] - sampled);
  }
  expect /= 4.0;
  double got = lr_consistency_loss(ag::constant(dl), ag::constant(dr), Side::Left)->value.data[0];
  CHECK(got == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("smoothness_loss closed forms and explicit-loop oracle") {
  // constant disparity -> 0
  Rng rng(14);
  Tensor img = random_image(3, 4, 4, rng);
  Tensor c({1, 1, 4, 4}, 0.1);
  CHECK(smoothness_loss(ag::constant(img), ag::constant(c))->value.data[0] == 0.0);

  // constant image, 1x4 ramp d -> 0.25
  Tensor flat({1, 1, 1, 4}, 0.5);
  Tensor ramp({1, 1, 1, 4});
  for (int x = 0; x < 4; ++x) ramp.data[x] = x / 3.0;
  CHECK(smoothness_loss(ag::constant(flat), ag::constant(ramp))->value.data[0] ==
        doctest::Approx(0.25).epsilon(1e-12));

  // random 3x3 against a direct-formula loop
  Tensor I = random_image(3, 3, 3, rng);
  Tensor d({1, 1, 3, 3});
  for (auto& v : d.data) v = rng.uniform(0.0, 0.3);
  double expect = 0;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      const double ddx = (x < 2) ? d.at(0, 0, y, x + 1) - d.at(0, 0, y, x) : 0.0;
      const double ddy = (y < 2) ? d.at(0, 0, y + 1, x) - d.at(0, 0, y, x) : 0.0;
      double gx = 0, gy = 0;
      for (int ch = 0; ch < 3; ++ch) {
        gx += (x < 2) ? std::fabs(I.at(0, ch, y, x + 1) - I.at(0, ch, y, x)) : 0.0;
        gy += (y < 2) ? std::fabs(I.at(0, ch, y + 1, x) - I.at(0, ch, y, x)) : 0.0;
      }
      expect += std::fabs(ddx) * std::exp(-gx / 3) + std::fabs(ddy) * std::exp(-gy / 3);
    }
  expect /= 9.0;
  CHECK(smoothness_loss(ag::constant(I), ag::constant(d))->value.data[0] ==
        doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("depth_loss zero points and 24-term decomposition") {
  Rng rng(15);
  const int H = 16, W = 16;
  StereoSample pair;
  pair.left = random_image(3, H, W, rng);
  pair.right = pair.left;

  DisparityPyramid pyr;
  for (int i = 0; i < 4; ++i) {
    pyr.left.push_back(ag::constant(Tensor({1, 1, H >> i, W >> i})));
    pyr.right.push_back(ag::constant(Tensor({1, 1, H >> i, W >> i})));
  }
  DepthLossWeights w;
  CHECK(depth_loss(pair, pyr, w)->value.data[0] == doctest::Approx(0.0).epsilon(1e-9));

  // all weights zero -> 0 for arbitrary inputs
  StereoSample pair2;
  pair2.left = random_image(3, H, W, rng);
  pair2.right = random_image(3, H, W, rng);
  DisparityPyramid pyr2;
  for (int i = 0; i < 4; ++i) {
    Tensor dl({1, 1, H >> i, W >> i}), dr({1, 1, H >> i, W >> i});
    for (auto& v : dl.data) v = rng.uniform(0.0, 0.2);
    for (auto& v : dr.data) v = rng.uniform(0.0, 0.2);
    pyr2.left.push_back(ag::constant(dl));
    pyr2.right.push_back(ag::constant(dr));
  }
  DepthLossWeights zero_w{0.0, 0.0, 0.0, 0.85};
  CHECK(depth_loss(pair2, pyr2, zero_w)->value.data[0] == 0.0);

  // explicit 24-term sum
  DepthLossWeights w2{1.0, 1.0, 0.1, 0.85};
  double total = depth_loss(pair2, pyr2, w2)->value.data[0];
  double expect = 0;
  Var li = ag::constant(pair2.left), ri = ag::constant(pair2.right);
  for (int i = 0; i < 4; ++i) {
    if (i > 0) {
      li = ag::resize_bilinear(li, H >> i, W >> i);
      ri = ag::resize_bilinear(ri, H >> i, W >> i);
    }
    expect += w2.alpha_ap *
              (appearance_loss(li, ri, pyr2.left[i], Side::Left, w2.gamma)->value.data[0] +
               appearance_loss(li, ri, pyr2.right[i], Side::Right, w2.gamma)->value.data[0]);
    expect += w2.alpha_lr *
              (lr_consistency_loss(pyr2.left[i], pyr2.right[i], Side::Left)->value.data[0] +
               lr_consistency_loss(pyr2.left[i], pyr2.right[i], Side::Right)->value.data[0]);
    expect += w2.alpha_ds * (smoothness_loss(li, pyr2.left[i])->value.data[0] +
                             smoothness_loss(ri, pyr2.right[i])->value.data[0]);
  }
  CHECK(std::fabs(total - expect) < 1e-9);

  // wrong scale count rejected
  DisparityPyramid bad;
  bad.left = {pyr2.left[0]};
  bad.right = {pyr2.right[0]};
  CHECK_THROWS_AS(depth_loss(pair2, bad, w2), std::invalid_argument);
}

TEST_CASE("gradient suite passes at 1e-3") {
  auto rows = gradient_suite(2024, 3);
  for (const auto& row : rows) {
    INFO(row.name << " max_rel_err=" << row.max_rel_err);
    CHECK(row.pass);
  }
}
