#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "arthro/data.hpp"

using namespace arthro;
namespace fs = std::filesystem;

namespace {

Tensor random_rgb(int H, int W, Rng& rng) {
  Tensor t({1, 3, H, W});
  // stay on the 8-bit grid so png round trips are exact
  for (auto& v : t.data) v = rng.randint(0, 255) / 255.0;
  return t;
}

LabelMask random_mask(int H, int W, Rng& rng) {
  LabelMask m(H, W);
  for (auto& v : m.v) v = static_cast<uint8_t>(rng.randint(0, kNumClasses - 1));
  return m;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) {
    path = fs::temp_directory_path() / ("arthro_test_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("png rgb round trip is bit-exact on the 8-bit grid") {
  TmpDir dir("png_rgb");
  Rng rng(7);
  Tensor img = random_rgb(13, 9, rng);
  data::save_png_rgb(dir.str() + "/a.png", img);
  Tensor back = data::load_png_rgb(dir.str() + "/a.png");
  REQUIRE(back.shape == img.shape);
  for (size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("mask round trip preserves labels and rejects out-of-range values") {
  TmpDir dir("png_mask");
  Rng rng(8);
  LabelMask m = random_mask(11, 6, rng);
  data::save_png_mask(dir.str() + "/m.png", m);
  LabelMask back = data::load_png_mask(dir.str() + "/m.png");
  REQUIRE(back.H == m.H);
  REQUIRE(back.W == m.W);
  CHECK(back.v == m.v);

  // grayscale png with a value outside 0..4 must be rejected on load
  std::ofstream raw(dir.str() + "/bad.pgm", std::ios::binary);
  raw << "P5\n2 2\n255\n";
  char px[4] = {0, 1, 9, 2};
  raw.write(px, 4);
  raw.close();
  CHECK_THROWS(data::load_png_mask(dir.str() + "/bad.pgm"));
}

TEST_CASE("gt disparity sidecar round trips through the flat binary format") {
  TmpDir dir("gtdisp");
  Tensor d({1, 1, 5, 7});
  Rng rng(9);
  for (auto& v : d.data) v = static_cast<float>(rng.uniform(0.0, 0.3));
  data::save_gt_disparity(dir.str() + "/d.bin", d);
  Tensor back = data::load_gt_disparity(dir.str() + "/d.bin");
  REQUIRE(back.shape == d.shape);
  for (size_t i = 0; i < d.data.size(); ++i) CHECK(back.data[i] == d.data[i]);

  // header sanity: uint32 H, uint32 W, then H*W float32
  CHECK(fs::file_size(dir.str() + "/d.bin") == 8 + 4 * 5 * 7);
  std::ofstream trunc(dir.str() + "/t.bin", std::ios::binary);
  uint32_t hw[2] = {5, 7};
  trunc.write(reinterpret_cast<char*>(hw), 8);
  trunc.close();
  CHECK_THROWS(data::load_gt_disparity(dir.str() + "/t.bin"));
}

TEST_CASE("preprocess_raw crops and resizes endoscope frames, validates stereo frames") {
  Tensor endo({1, 3, 720, 1280});
  // constant columns: value = source x / 1279, so the crop window is visible
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 720; ++y)
      for (int x = 0; x < 1280; ++x) endo.at(0, c, y, x) = x / 1279.0;
  Tensor out = data::preprocess_raw(endo, data::SourceKind::Endoscope1280x720);
  REQUIRE(out.shape == std::vector<int>({1, 3, 384, 384}));
  // centre crop keeps columns 280..999; with the half-pixel convention the
  // sampled source column for output x is 280 + (x+0.5)*720/384 - 0.5
  for (int x : {0, 100, 383}) {
    double sx = 280.0 + (x + 0.5) * (720.0 / 384.0) - 0.5;
    CHECK(out.at(0, 0, 50, x) == doctest::Approx(sx / 1279.0).epsilon(1e-9));
  }

  Tensor ok({1, 3, 384, 384}, 0.5);
  CHECK(data::preprocess_raw(ok, data::SourceKind::Stereo384).same_shape(ok));
  Tensor bad({1, 3, 300, 384}, 0.5);
  CHECK_THROWS(data::preprocess_raw(bad, data::SourceKind::Stereo384));
  CHECK_THROWS(data::preprocess_raw(bad, data::SourceKind::Endoscope1280x720));
}

TEST_CASE("depth augmentation: identity params leave the pair untouched") {
  Rng rng(3);
  StereoSample s;
  s.left = random_rgb(6, 8, rng);
  s.right = random_rgb(6, 8, rng);
  data::DepthAugParams id;
  StereoSample out = data::augment_depth(s, id);
  CHECK(out.left.data == s.left.data);
  CHECK(out.right.data == s.right.data);
}

TEST_CASE("depth augmentation applies identical photometric maps to both sides") {
  Rng rng(4);
  StereoSample s;
  s.left = random_rgb(5, 5, rng);
  s.right = s.left;  // equal inputs stay equal under any photometric map
  data::DepthAugParams p;
  p.gamma = 1.1;
  p.brightness = 1.7;
  p.color = {0.9, 1.15, 0.85};
  StereoSample out = data::augment_depth(s, p);
  CHECK(out.left.data == out.right.data);
  // hand-check one pixel against the closed form
  double v = s.left.at(0, 1, 2, 3);
  double expect = std::min(1.0, std::pow(v, 1.1) * 1.7 * 1.15);
  CHECK(out.left.at(0, 1, 2, 3) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("horizontal flip swaps the stereo roles and mirrors both images") {
  Rng rng(5);
  StereoSample s;
  s.left = random_rgb(4, 6, rng);
  s.right = random_rgb(4, 6, rng);
  data::DepthAugParams p;
  p.hflip = true;
  StereoSample out = data::augment_depth(s, p);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) {
      CHECK(out.left.at(0, 0, y, x) == s.right.at(0, 0, y, 5 - x));
      CHECK(out.right.at(0, 0, y, x) == s.left.at(0, 0, y, 5 - x));
    }

  data::DepthAugParams pv;
  pv.vflip = true;
  StereoSample outv = data::augment_depth(s, pv);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) CHECK(outv.left.at(0, 2, y, x) == s.left.at(0, 2, 3 - y, x));
}

TEST_CASE("sampled depth augmentation parameters stay in their documented ranges") {
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    auto p = data::DepthAugParams::sample(rng);
    CHECK(p.gamma >= 0.8);
    CHECK(p.gamma <= 1.2);
    CHECK(p.brightness >= 0.5);
    CHECK(p.brightness <= 2.0);
    for (double c : p.color) {
      CHECK(c >= 0.8);
      CHECK(c <= 1.2);
    }
  }
}

TEST_CASE("seg augmentation: identity params are a no-op, flips move mask with image") {
  Rng rng(6);
  LabeledSample s;
  s.image = random_rgb(8, 8, rng);
  s.mask = random_mask(8, 8, rng);

  data::SegAugParams id;
  LabeledSample out = data::augment_seg(s, id);
  CHECK(out.image.data == s.image.data);
  CHECK(out.mask.v == s.mask.v);

  data::SegAugParams p;
  p.hflip = true;
  p.vflip = true;
  out = data::augment_seg(s, p);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(out.mask.at(y, x) == s.mask.at(7 - y, 7 - x));
      CHECK(out.image.at(0, 0, y, x) == s.image.at(0, 0, 7 - y, 7 - x));
    }
}

TEST_CASE("elastic deformation applies the same spatial map to image and mask") {
  Rng rng(12);
  const int H = 16, W = 16;
  LabeledSample s;
  // image channel 0 encodes x/W, channel 1 encodes y/H: a coordinate grid
  s.image = Tensor({1, 3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      s.image.at(0, 0, y, x) = static_cast<double>(x) / W;
      s.image.at(0, 1, y, x) = static_cast<double>(y) / H;
    }
  s.mask = random_mask(H, W, rng);

  data::ElasticConfig e;
  e.grid_spacing = 4.0;
  e.amplitude = 2.0;
  e.sigma = 1.5;
  data::SegAugParams p = data::SegAugParams::sample(rng, H, W, e);
  p.hflip = p.vflip = false;
  p.brightness = p.contrast = 1.0;
  LabeledSample out = data::augment_seg(s, p);

  for (int y = 2; y < H - 2; ++y)
    for (int x = 2; x < W - 2; ++x) {
      double sx = x + p.disp_x.at(0, 0, y, x);
      double sy = y + p.disp_y.at(0, 0, y, x);
      // the warped coordinate image reads back the source location
      CHECK(out.image.at(0, 0, y, x) * W == doctest::Approx(sx).epsilon(0.02));
      CHECK(out.image.at(0, 1, y, x) * H == doctest::Approx(sy).epsilon(0.02));
      // the mask uses the nearest-neighbour version of the same map
      int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, W - 1);
      int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, H - 1);
      CHECK(out.mask.at(y, x) == s.mask.at(ny, nx));
    }
}

TEST_CASE("seg photometric change touches the image and never the mask") {
  Rng rng(13);
  LabeledSample s;
  s.image = random_rgb(6, 6, rng);
  s.mask = random_mask(6, 6, rng);
  data::SegAugParams p;
  p.brightness = 1.2;
  p.contrast = 0.9;
  LabeledSample out = data::augment_seg(s, p);
  CHECK(out.mask.v == s.mask.v);
  double v = s.image.at(0, 2, 1, 1);
  CHECK(out.image.at(0, 2, 1, 1) ==
        doctest::Approx(std::clamp(((v - 0.5) * 0.9 + 0.5) * 1.2, 0.0, 1.0)));
}

TEST_CASE("batch order is deterministic in seed, distinct across epochs, partitions indices") {
  auto a = data::batch_order(23, 4, 77, 0);
  auto b = data::batch_order(23, 4, 77, 0);
  CHECK(a == b);
  auto c = data::batch_order(23, 4, 77, 1);
  CHECK(a != c);
  auto d = data::batch_order(23, 4, 78, 0);
  CHECK(a != d);

  std::set<size_t> seen;
  size_t total = 0;
  for (const auto& batch : a) {
    CHECK(batch.size() <= 4);
    for (size_t i : batch) seen.insert(i);
    total += batch.size();
  }
  CHECK(total == 23);
  CHECK(seen.size() == 23);
  CHECK(a.back().size() == 3);  // last partial batch kept
}

TEST_CASE("manifest round trip validates files, checksums and splits") {
  TmpDir dir("manifest");
  Rng rng(21);

  data::DatasetManifest m;
  m.root = dir.str();
  for (int i = 0; i < 3; ++i) {
    data::StereoRecord r;
    r.scene_id = "s0";
    r.frame = i;
    r.split = i < 2 ? "train" : "test";
    r.left = "stereo/s0/" + std::to_string(i) + "_L.png";
    r.right = "stereo/s0/" + std::to_string(i) + "_R.png";
    data::save_png_rgb(dir.str() + "/" + r.left, random_rgb(6, 6, rng));
    data::save_png_rgb(dir.str() + "/" + r.right, random_rgb(6, 6, rng));
    m.stereo.push_back(r);
  }
  data::SegRecord g;
  g.knee_id = "k0";
  g.frame = 0;
  g.image = "seg/k0/0.png";
  g.mask = "seg/k0/0_mask.png";
  data::save_png_rgb(dir.str() + "/" + g.image, random_rgb(6, 6, rng));
  data::save_png_mask(dir.str() + "/" + g.mask, random_mask(6, 6, rng));
  m.seg.push_back(g);
  data::save_manifest(m);

  data::DatasetManifest back = data::load_manifest(dir.str());
  REQUIRE(back.stereo.size() == 3);
  REQUIRE(back.seg.size() == 1);
  CHECK(back.stereo[2].split == "test");
  CHECK(back.seg[0].knee_id == "k0");

  StereoSample sp = data::load_stereo_sample(back, back.stereo[0]);
  CHECK(sp.left.shape == std::vector<int>({1, 3, 6, 6}));
  LabeledSample ls = data::load_seg_sample(back, back.seg[0]);
  CHECK(ls.mask.H == 6);

  SUBCASE("missing file is reported by name") {
    fs::remove(dir.str() + "/stereo/s0/1_R.png");
    try {
      data::load_manifest(dir.str());
      FAIL("expected validation failure");
    } catch (const std::runtime_error& ex) {
      CHECK(std::string(ex.what()).find("1_R.png") != std::string::npos);
    }
  }
  SUBCASE("corrupted file fails its checksum") {
    data::save_png_rgb(dir.str() + "/stereo/s0/0_L.png", random_rgb(6, 6, rng));
    try {
      data::load_manifest(dir.str());
      FAIL("expected checksum failure");
    } catch (const std::runtime_error& ex) {
      CHECK(std::string(ex.what()).find("checksum mismatch") != std::string::npos);
    }
  }
  SUBCASE("malformed json is rejected") {
    std::ofstream(dir.str() + "/manifest.json") << "{ not json";
    CHECK_THROWS(data::load_manifest(dir.str()));
  }
}

TEST_CASE("per-knee class presence stats match a cohort-style fixture exactly") {
  TmpDir dir("stats");
  // scaled fixture mirroring a per-knee frame census: 120 frames, femur in
  // 32%, acl in 20%, tibia in 5%, meniscus in 9% of them
  const int n = 120;
  const int n_femur = 38, n_acl = 24, n_tibia = 6, n_meniscus = 11;
  data::DatasetManifest m;
  m.root = dir.str();
  for (int i = 0; i < n; ++i) {
    LabelMask mask(4, 4);  // stats depend on presence only, so tiny masks do
    if (i < n_femur) mask.at(0, 0) = 1;
    if (i < n_tibia) mask.at(0, 1) = 2;
    if (i < n_meniscus) mask.at(1, 0) = 3;
    if (i < n_acl) mask.at(1, 1) = 4;
    data::SegRecord r;
    r.knee_id = "knee2";
    r.frame = i;
    r.image = "seg/knee2/" + std::to_string(i) + ".png";
    r.mask = "seg/knee2/" + std::to_string(i) + "_mask.png";
    data::save_png_rgb(dir.str() + "/" + r.image, Tensor({1, 3, 4, 4}, 0.5));
    data::save_png_mask(dir.str() + "/" + r.mask, mask);
    m.seg.push_back(r);
  }
  data::save_manifest(m);

  data::DatasetManifest back = data::load_manifest(dir.str());
  REQUIRE(back.class_presence_stats.count("knee2") == 1);
  const auto& st = back.class_presence_stats.at("knee2");
  CHECK(st[0] == 1.0);  // background everywhere
  CHECK(st[1] == doctest::Approx(static_cast<double>(n_femur) / n).epsilon(1e-12));
  CHECK(st[2] == doctest::Approx(static_cast<double>(n_tibia) / n).epsilon(1e-12));
  CHECK(st[3] == doctest::Approx(static_cast<double>(n_meniscus) / n).epsilon(1e-12));
  CHECK(st[4] == doctest::Approx(static_cast<double>(n_acl) / n).epsilon(1e-12));
}
