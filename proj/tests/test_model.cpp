#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "arthro/model.hpp"

using namespace arthro;
using namespace arthro::model;
using ag::Var;

namespace {

ModelConfig tiny_config(int hw = 64, int base = 8) {
  ModelConfig cfg;
  cfg.encoder_kind = "tiny";
  cfg.input_h = cfg.input_w = hw;
  cfg.base_channels = base;
  return cfg;
}

Tensor random_image(int N, int H, int W, Rng& rng) {
  Tensor t({N, 3, H, W});
  for (auto& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

double grad_norm(const Var& p) {
  if (p->grad.shape.empty()) return 0.0;
  double s = 0;
  for (double v : p->grad.data) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("tiny model forward produces the contracted shapes") {
  Model m = Model::build(tiny_config(), 1);
  Rng rng(2);
  ModelOutput out = m.forward(random_image(1, 64, 64, rng), false);
  REQUIRE(out.seg_heads.size() == 4);
  for (const auto& h : out.seg_heads) {
    CHECK(h->value.shape == std::vector<int>{1, 5, 64, 64});
  }
  REQUIRE(out.pyramid.left.size() == 4);
  REQUIRE(out.pyramid.right.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.pyramid.left[i]->value.shape == std::vector<int>{1, 1, 64 >> i, 64 >> i});
    CHECK(out.pyramid.right[i]->value.shape == std::vector<int>{1, 1, 64 >> i, 64 >> i});
  }
}

TEST_CASE("resnet50 configuration: disparity scales 384,192,96,48") {
  ModelConfig cfg;  // defaults: resnet50 at 384x384
  auto scales = disparity_scales(cfg);
  CHECK(scales == std::vector<std::pair<int, int>>{{384, 384}, {192, 192}, {96, 96}, {48, 48}});
}

TEST_CASE("resnet50 encoder builds and forward matches shape contract") {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 64;
  Model m = Model::build(cfg, 3);
  Rng rng(4);
  ModelOutput out = m.forward(random_image(1, 64, 64, rng), false);
  for (const auto& h : out.seg_heads)
    CHECK(h->value.shape == std::vector<int>{1, 5, 64, 64});
  for (int i = 0; i < 4; ++i)
    CHECK(out.pyramid.left[i]->value.shape == std::vector<int>{1, 1, 64 >> i, 64 >> i});
}

TEST_CASE("seg rows sum to 1 and disparities stay inside (0, d_max)") {
  Model m = Model::build(tiny_config(32), 5);
  Rng rng(6);
  ModelOutput out = m.forward(random_image(2, 32, 32, rng), false);
  for (const auto& h : out.seg_heads) {
    const Tensor& p = h->value;
    for (int n = 0; n < 2; ++n)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          double s = 0;
          for (int c = 0; c < 5; ++c) s += p.at(n, c, y, x);
          CHECK(std::fabs(s - 1.0) < 1e-5);
        }
  }
  for (int i = 0; i < 4; ++i)
    for (double v : out.pyramid.left[i]->value.data) {
      CHECK(v > 0.0);
      CHECK(v < 0.3);
    }
}

TEST_CASE("zero-initialized disparity head filters give d_max/2 exactly") {
  Model m = Model::build(tiny_config(32), 7);
  for (auto& pair : m.disparity_heads()) {
    for (auto& v : pair.left.w->value.data) v = 0.0;
    for (auto& v : pair.left.b->value.data) v = 0.0;
  }
  Rng rng(8);
  ModelOutput out = m.forward(random_image(1, 32, 32, rng), false);
  for (int i = 0; i < 4; ++i)
    for (double v : out.pyramid.left[i]->value.data) CHECK(v == 0.3 * 0.5);
}

TEST_CASE("same seed gives identical parameters; construction deterministic") {
  Model a = Model::build(tiny_config(), 42);
  Model b = Model::build(tiny_config(), 42);
  auto pa = a.all_params(), pb = b.all_params();
  REQUIRE(pa.size() == pb.size());
  int64_t count = 0;
  for (size_t k = 0; k < pa.size(); ++k) {
    CHECK(pa[k].first == pb[k].first);
    REQUIRE(pa[k].second->value.shape == pb[k].second->value.shape);
    for (int64_t i = 0; i < pa[k].second->value.numel(); ++i)
      if (pa[k].second->value.data[i] != pb[k].second->value.data[i]) ++count;
  }
  CHECK(count == 0);
}

TEST_CASE("inference forward is bitwise deterministic") {
  Model m = Model::build(tiny_config(32), 9);
  Rng rng(10);
  Tensor img = random_image(1, 32, 32, rng);
  ModelOutput a = m.forward(img, false);
  ModelOutput b = m.forward(img, false);
  for (int j = 0; j < 4; ++j)
    for (int64_t i = 0; i < a.seg_heads[j]->value.numel(); ++i)
      CHECK(a.seg_heads[j]->value.data[i] == b.seg_heads[j]->value.data[i]);
  for (int s = 0; s < 4; ++s)
    for (int64_t i = 0; i < a.pyramid.left[s]->value.numel(); ++i)
      CHECK(a.pyramid.left[s]->value.data[i] == b.pyramid.left[s]->value.data[i]);
}

TEST_CASE("infer_segmentation is the argmax of the last head, ties to lowest index") {
  Model m = Model::build(tiny_config(32), 11);
  Rng rng(12);
  Tensor img = random_image(1, 32, 32, rng);
  LabelMask mask = m.infer_segmentation(img);
  ModelOutput out = m.forward(img, false);
  const Tensor& p = out.seg_heads[3]->value;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      int best = 0;
      double bv = p.at(0, 0, y, x);
      for (int c = 1; c < 5; ++c)
        if (p.at(0, c, y, x) > bv) {
          bv = p.at(0, c, y, x);
          best = c;
        }
      CHECK(mask.at(y, x) == best);
    }

  // uniform logits (zeroed last head) tie every class -> index 0 everywhere
  for (auto& v : m.seg_head_convs()[3].w->value.data) v = 0.0;
  for (auto& v : m.seg_head_convs()[3].b->value.data) v = 0.0;
  LabelMask tied = m.infer_segmentation(img);
  for (uint8_t v : tied.v) CHECK(v == 0);
}

TEST_CASE("infer_depth returns the scale-0 left disparity") {
  Model m = Model::build(tiny_config(32), 13);
  Rng rng(14);
  Tensor img = random_image(1, 32, 32, rng);
  Tensor d = m.infer_depth(img);
  CHECK(d.shape == std::vector<int>{1, 1, 32, 32});
  Tensor ref = m.forward(img, false).pyramid.left[0]->value;
  for (int64_t i = 0; i < d.numel(); ++i) CHECK(d.data[i] == ref.data[i]);
  for (double v : d.data) {
    CHECK(v > 0.0);
    CHECK(v < 0.3);
  }
}

TEST_CASE("one joint gradient step touches every branch (no dead parameters)") {
  Model m = Model::build(tiny_config(32, 4), 15);
  Rng rng(16);
  Tensor img = random_image(1, 32, 32, rng);
  ModelOutput out = m.forward(img, true);

  LabelMask mask(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) mask.at(y, x) = static_cast<uint8_t>((x / 8) % 5);
  StereoSample pair;
  pair.left = img;
  pair.right = random_image(1, 32, 32, rng);

  Var seg = losses::seg_loss(mask.onehot(), losses::average_seg_heads(out.seg_heads),
                             losses::SegLossWeights{});
  Var dep = losses::depth_loss(pair, out.pyramid, losses::DepthLossWeights{});
  Var total = ag::add(seg, dep);
  ag::backward(total);

  for (const auto& [name, p] : m.all_params()) {
    INFO("param " << name);
    CHECK(grad_norm(p) > 0.0);
  }
}

TEST_CASE("wrong input size is rejected") {
  Model m = Model::build(tiny_config(32), 17);
  CHECK_THROWS_AS(m.forward(Tensor({1, 3, 16, 32}), false), std::invalid_argument);
  ModelConfig bad = tiny_config(30);
  CHECK_THROWS_AS(Model::build(bad, 1), std::invalid_argument);
}
