#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "arthro/geometry.hpp"

using namespace arthro;
using ag::Var;

namespace {

Tensor image_ramp_x(int H, int W) {
  Tensor t({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) t.at(0, 0, y, x) = static_cast<double>(x) / (W - 1);
  return t;
}

Tensor random_image(int C, int H, int W, Rng& rng) {
  Tensor t({1, C, H, W});
  for (auto& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

// Scalar per-pixel two-point interpolation oracle, evaluated directly.
double warp_oracle_pixel(const Tensor& src, int c, int y, double xs, int W) {
  xs = std::min(std::max(xs, 0.0), static_cast<double>(W - 1));
  const int x0 = static_cast<int>(xs);
  const int x1 = std::min(x0 + 1, W - 1);
  const double t = xs - x0;
  return (1 - t) * src.at(0, c, y, x0) + t * src.at(0, c, y, x1);
}

// Windowed-statistics SSIM oracle: means/variances/covariance over each
// 3x3 border-clipped window, computed with plain loops.
double ssim_oracle_pixel(const Tensor& a, const Tensor& b, int c, int y, int x) {
  const int H = a.shape[2], W = a.shape[3];
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  int cnt = 0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int yy = y + dy, xx = x + dx;
      if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
      const double va = a.at(0, c, yy, xx), vb = b.at(0, c, yy, xx);
      sa += va;
      sb += vb;
      saa += va * va;
      sbb += vb * vb;
      sab += va * vb;
      ++cnt;
    }
  const double mu_a = sa / cnt, mu_b = sb / cnt;
  const double var_a = saa / cnt - mu_a * mu_a;
  const double var_b = sbb / cnt - mu_b * mu_b;
  const double cov = sab / cnt - mu_a * mu_b;
  const double c1 = 1e-4, c2 = 9e-4;
  return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
         ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
}

}  // namespace

TEST_CASE("zero disparity warp is the exact identity") {
  Rng rng(1);
  Tensor src = random_image(3, 5, 7, rng);
  Tensor zero({1, 1, 5, 7});
  Tensor out = geometry::warp_horizontal(src, zero, +1);
  for (int64_t i = 0; i < src.numel(); ++i) CHECK(out.data[i] == src.data[i]);
}

TEST_CASE("one-column shift on a horizontal ramp") {
  const int H = 4, W = 8;
  Tensor src = image_ramp_x(H, W);
  Tensor d({1, 1, H, W}, 1.0 / W);
  Tensor out = geometry::warp_horizontal(src, d, +1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W - 1; ++x)
      CHECK(out.at(0, 0, y, x) == doctest::Approx((x + 1.0) / (W - 1)).epsilon(1e-12));
}

TEST_CASE("warp matches brute-force bilinear oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int H = 4, W = 4;
    Tensor src = random_image(1, H, W, rng);
    Tensor d({1, 1, H, W});
    for (auto& v : d.data) v = rng.uniform(0.0, 0.25);
    Tensor out = geometry::warp_horizontal(src, d, +1);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double expect = warp_oracle_pixel(src, 0, y, x + d.at(0, 0, y, x) * W, W);
        CHECK(std::fabs(out.at(0, 0, y, x) - expect) < 1e-6);
      }
  }
}

TEST_CASE("warp output stays within source intensity bounds") {
  Rng rng(3);
  Tensor src = random_image(3, 6, 6, rng);
  Tensor d({1, 1, 6, 6});
  for (auto& v : d.data) v = rng.uniform(0.0, 0.3);
  Tensor out = geometry::warp_horizontal(src, d, +1);
  CHECK(out.min() >= src.min() - 1e-12);
  CHECK(out.max() <= src.max() + 1e-12);
}

TEST_CASE("warp rejects shape mismatch and non-finite input") {
  Tensor src({1, 1, 4, 4}, 0.5);
  Tensor d({1, 1, 4, 5}, 0.0);
  CHECK_THROWS_AS(geometry::warp_horizontal(src, d, +1), std::invalid_argument);
  Tensor d2({1, 1, 4, 4}, 0.0);
  d2.data[3] = std::nan("");
  CHECK_THROWS_AS(geometry::warp_horizontal(src, d2, +1), std::invalid_argument);
}

TEST_CASE("ssim of an image with itself is 1 and symmetric") {
  Rng rng(4);
  Tensor a = random_image(3, 8, 8, rng);
  Tensor s = geometry::ssim_map(a, a);
  for (double v : s.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

  Tensor b = random_image(3, 8, 8, rng);
  Tensor ab = geometry::ssim_map(a, b);
  Tensor ba = geometry::ssim_map(b, a);
  for (int64_t i = 0; i < ab.numel(); ++i)
    CHECK(ab.data[i] == doctest::Approx(ba.data[i]).epsilon(1e-12));
  for (double v : ab.data) {
    CHECK(v <= 1.0 + 1e-9);
    CHECK(v >= -1.0 - 1e-9);
  }
}

TEST_CASE("ssim matches windowed-statistics oracle") {
  Rng rng(5);
  Tensor a = random_image(1, 8, 8, rng);
  Tensor b = random_image(1, 8, 8, rng);
  Tensor s = geometry::ssim_map(a, b);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      CHECK(std::fabs(s.at(0, 0, y, x) - ssim_oracle_pixel(a, b, 0, y, x)) < 1e-6);
}

TEST_CASE("ssim rejects shape mismatch") {
  Tensor a({1, 1, 4, 4}, 0.5), b({1, 1, 4, 5}, 0.5);
  CHECK_THROWS_AS(geometry::ssim_map(a, b), std::invalid_argument);
}

TEST_CASE("gradients: constant and ramp cases, explicit-loop oracle") {
  Tensor c({1, 1, 3, 4}, 0.7);
  Tensor gx = geometry::grad_x(c);
  for (double v : gx.data) CHECK(v == 0.0);

  Tensor ramp({1, 1, 3, 4});
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x) ramp.at(0, 0, y, x) = x;
  gx = geometry::grad_x(ramp);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 3; ++x) CHECK(gx.at(0, 0, y, x) == 1.0);
    CHECK(gx.at(0, 0, y, 3) == 0.0);
  }

  Rng rng(6);
  Tensor r = random_image(1, 3, 3, rng);
  Tensor gy = geometry::grad_y(r);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      const double expect = (y < 2) ? r.at(0, 0, y + 1, x) - r.at(0, 0, y, x) : 0.0;
      CHECK(gy.at(0, 0, y, x) == expect);
    }
}

TEST_CASE("warp and ssim analytic gradients match finite differences") {
  Rng rng(7);
  const int H = 6, W = 6;
  // Disparities chosen mid-cell, away from borders.
  Tensor d({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      d.at(0, 0, y, x) = (x < W - 2) ? rng.uniform(0.15, 0.85) / W : 0.4 / W;
  std::vector<Tensor> in{random_image(1, H, W, rng), d};
  auto r = ag::check_gradients(
      [](const std::vector<Var>& v) {
        Var w = geometry::warp_horizontal(v[0], v[1], +1);
        return ag::mean_all(ag::mul(w, w));
      },
      in);
  INFO("warp max_rel_err=" << r.max_rel_err);
  CHECK(r.ok);

  std::vector<Tensor> in2{random_image(1, H, W, rng), random_image(1, H, W, rng)};
  auto r2 = ag::check_gradients(
      [](const std::vector<Var>& v) { return ag::mean_all(geometry::ssim_map(v[0], v[1])); },
      in2);
  INFO("ssim max_rel_err=" << r2.max_rel_err);
  CHECK(r2.ok);
}
