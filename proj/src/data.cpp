#include "arthro/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace arthro::data {

namespace {

uint8_t to_u8(double v) {
  double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(q);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Bilinear sample with border clamp; image is (1,C,H,W).
double sample_bilinear(const Tensor& img, int c, double y, double x) {
  const int H = img.dim(2), W = img.dim(3);
  x = std::clamp(x, 0.0, W - 1.0);
  y = std::clamp(y, 0.0, H - 1.0);
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * img.at(0, c, y0, x0) + fx * img.at(0, c, y0, x1)) +
         fy * ((1 - fx) * img.at(0, c, y1, x0) + fx * img.at(0, c, y1, x1));
}

Tensor mirror_x(const Tensor& img) {
  Tensor out(img.shape);
  const int C = img.dim(1), H = img.dim(2), W = img.dim(3);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(0, c, y, x) = img.at(0, c, y, W - 1 - x);
  return out;
}

Tensor mirror_y(const Tensor& img) {
  Tensor out(img.shape);
  const int C = img.dim(1), H = img.dim(2), W = img.dim(3);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(0, c, y, x) = img.at(0, c, H - 1 - y, x);
  return out;
}

// 1-D gaussian blur along each axis of a (1,1,H,W) field, border clamp.
Tensor gaussian_blur(const Tensor& f, double sigma) {
  if (sigma <= 0.0) return f;
  const int H = f.dim(2), W = f.dim(3);
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<size_t>(i + radius)];
  }
  for (double& w : k) w /= sum;

  Tensor tmp(f.shape), out(f.shape);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<size_t>(i + radius)] *
               f.at(0, 0, y, std::clamp(x + i, 0, W - 1));
      tmp.at(0, 0, y, x) = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<size_t>(i + radius)] *
               tmp.at(0, 0, std::clamp(y + i, 0, H - 1), x);
      out.at(0, 0, y, x) = acc;
    }
  return out;
}

void require_rgb(const Tensor& img, const char* what) {
  if (img.ndim() != 4 || img.dim(0) != 1 || img.dim(1) != 3)
    throw std::invalid_argument(std::string(what) + ": expected (1,3,H,W), got " +
                                img.shape_str());
}

}  // namespace

// ---- image containers ----

Tensor load_png_rgb(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image: " + path);
  Tensor img({1, 3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const cv::Vec3b& p = bgr.at<cv::Vec3b>(y, x);
      img.at(0, 0, y, x) = p[2] / 255.0;
      img.at(0, 1, y, x) = p[1] / 255.0;
      img.at(0, 2, y, x) = p[0] / 255.0;
    }
  return img;
}

void save_png_rgb(const std::string& path, const Tensor& image) {
  require_rgb(image, "save_png_rgb");
  const int H = image.dim(2), W = image.dim(3);
  cv::Mat bgr(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      bgr.at<cv::Vec3b>(y, x) = cv::Vec3b(to_u8(image.at(0, 2, y, x)),
                                          to_u8(image.at(0, 1, y, x)),
                                          to_u8(image.at(0, 0, y, x)));
  fs::create_directories(fs::path(path).parent_path());
  if (!cv::imwrite(path, bgr)) throw std::runtime_error("cannot write image: " + path);
}

LabelMask load_png_mask(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read mask: " + path);
  LabelMask mask(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      uint8_t v = m.at<uint8_t>(y, x);
      if (v >= kNumClasses)
        throw std::runtime_error("mask value " + std::to_string(v) +
                                 " out of range in " + path);
      mask.at(y, x) = v;
    }
  return mask;
}

void save_png_mask(const std::string& path, const LabelMask& mask) {
  cv::Mat m(mask.H, mask.W, CV_8UC1);
  for (int y = 0; y < mask.H; ++y)
    for (int x = 0; x < mask.W; ++x) m.at<uint8_t>(y, x) = mask.at(y, x);
  fs::create_directories(fs::path(path).parent_path());
  if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write mask: " + path);
}

Tensor load_gt_disparity(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read disparity: " + path);
  uint32_t H = 0, W = 0;
  in.read(reinterpret_cast<char*>(&H), 4);
  in.read(reinterpret_cast<char*>(&W), 4);
  if (!in || H == 0 || W == 0)
    throw std::runtime_error("bad disparity header in " + path);
  std::vector<float> buf(static_cast<size_t>(H) * W);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!in) throw std::runtime_error("truncated disparity file: " + path);
  Tensor d({1, 1, static_cast<int>(H), static_cast<int>(W)});
  for (size_t i = 0; i < buf.size(); ++i) d.data[i] = buf[i];
  return d;
}

void save_gt_disparity(const std::string& path, const Tensor& disparity) {
  if (disparity.ndim() != 4 || disparity.dim(0) != 1 || disparity.dim(1) != 1)
    throw std::invalid_argument("save_gt_disparity: expected (1,1,H,W), got " +
                                disparity.shape_str());
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write disparity: " + path);
  uint32_t H = static_cast<uint32_t>(disparity.dim(2));
  uint32_t W = static_cast<uint32_t>(disparity.dim(3));
  out.write(reinterpret_cast<const char*>(&H), 4);
  out.write(reinterpret_cast<const char*>(&W), 4);
  for (double v : disparity.data) {
    float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

// ---- preprocessing ----

Tensor preprocess_raw(const Tensor& image, SourceKind kind) {
  require_rgb(image, "preprocess_raw");
  const int H = image.dim(2), W = image.dim(3);
  if (kind == SourceKind::Stereo384) {
    if (H != 384 || W != 384)
      throw std::invalid_argument("stereo_384 source must be 384x384, got " +
                                  image.shape_str());
    return image;
  }
  if (H != 720 || W != 1280)
    throw std::invalid_argument("endoscope source must be 1280x720, got " +
                                image.shape_str());
  const int x0 = (W - 720) / 2;
  Tensor out({1, 3, 384, 384});
  // bilinear resize of the centred 720x720 crop, half-pixel convention
  const double scale = 720.0 / 384.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 384; ++y)
      for (int x = 0; x < 384; ++x) {
        double sy = (y + 0.5) * scale - 0.5;
        double sx = x0 + (x + 0.5) * scale - 0.5;
        out.at(0, c, y, x) = sample_bilinear(image, c, sy, sx);
      }
  return out;
}

// ---- depth-stage augmentation ----

DepthAugParams DepthAugParams::sample(Rng& rng) {
  DepthAugParams p;
  p.gamma = rng.uniform(0.8, 1.2);
  p.brightness = rng.uniform(0.5, 2.0);
  for (int c = 0; c < 3; ++c) p.color[c] = rng.uniform(0.8, 1.2);
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  return p;
}

StereoSample augment_depth(const StereoSample& s, const DepthAugParams& p) {
  require_rgb(s.left, "augment_depth");
  require_rgb(s.right, "augment_depth");
  if (!s.left.same_shape(s.right))
    throw std::invalid_argument("augment_depth: stereo shapes differ");

  auto photometric = [&](const Tensor& img) {
    Tensor out(img.shape);
    const int H = img.dim(2), W = img.dim(3);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double v = std::pow(std::max(img.at(0, c, y, x), 0.0), p.gamma);
          out.at(0, c, y, x) = clamp01(v * p.brightness * p.color[c]);
        }
    return out;
  };

  StereoSample out = s;
  out.left = photometric(s.left);
  out.right = photometric(s.right);
  if (p.hflip) {
    // mirroring swaps the epipolar roles, so the images swap sides too
    Tensor new_left = mirror_x(out.right);
    out.right = mirror_x(out.left);
    out.left = std::move(new_left);
  }
  if (p.vflip) {
    out.left = mirror_y(out.left);
    out.right = mirror_y(out.right);
  }
  return out;
}

StereoSample augment_depth(const StereoSample& s, Rng& rng) {
  return augment_depth(s, DepthAugParams::sample(rng));
}

// ---- segmentation-stage augmentation ----

SegAugParams SegAugParams::sample(Rng& rng, int H, int W, const ElasticConfig& e) {
  SegAugParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.brightness = rng.uniform(0.8, 1.2);
  p.contrast = rng.uniform(0.8, 1.2);

  // coarse control grid of iid displacements, upsampled then smoothed
  const double spacing = std::max(e.grid_spacing, 1.0);
  const int gh = static_cast<int>(std::ceil(H / spacing)) + 1;
  const int gw = static_cast<int>(std::ceil(W / spacing)) + 1;
  Tensor cx({1, 1, gh, gw}), cy({1, 1, gh, gw});
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) {
      cx.at(0, 0, y, x) = rng.uniform(-e.amplitude, e.amplitude);
      cy.at(0, 0, y, x) = rng.uniform(-e.amplitude, e.amplitude);
    }
  p.disp_x = Tensor({1, 1, H, W});
  p.disp_y = Tensor({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      p.disp_x.at(0, 0, y, x) = sample_bilinear(cx, 0, y / spacing, x / spacing);
      p.disp_y.at(0, 0, y, x) = sample_bilinear(cy, 0, y / spacing, x / spacing);
    }
  p.disp_x = gaussian_blur(p.disp_x, e.sigma);
  p.disp_y = gaussian_blur(p.disp_y, e.sigma);
  return p;
}

LabeledSample augment_seg(const LabeledSample& s, const SegAugParams& p) {
  require_rgb(s.image, "augment_seg");
  const int H = s.image.dim(2), W = s.image.dim(3);
  if (s.mask.H != H || s.mask.W != W)
    throw std::invalid_argument("augment_seg: mask/image size mismatch");
  const bool elastic = p.disp_x.numel() > 0;
  if (elastic && (p.disp_x.shape != std::vector<int>{1, 1, H, W} ||
                  p.disp_y.shape != std::vector<int>{1, 1, H, W}))
    throw std::invalid_argument("augment_seg: displacement field size mismatch");

  LabeledSample out = s;
  if (p.hflip) {
    out.image = mirror_x(out.image);
    LabelMask m(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) m.at(y, x) = out.mask.at(y, W - 1 - x);
    out.mask = m;
  }
  if (p.vflip) {
    out.image = mirror_y(out.image);
    LabelMask m(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) m.at(y, x) = out.mask.at(H - 1 - y, x);
    out.mask = m;
  }
  if (elastic) {
    Tensor img(out.image.shape);
    LabelMask m(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double sy = y + p.disp_y.at(0, 0, y, x);
        double sx = x + p.disp_x.at(0, 0, y, x);
        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = sample_bilinear(out.image, c, sy, sx);
        int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, H - 1);
        int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, W - 1);
        m.at(y, x) = out.mask.at(ny, nx);
      }
    out.image = std::move(img);
    out.mask = std::move(m);
  }
  // photometric change touches the image only
  if (p.brightness != 1.0 || p.contrast != 1.0) {
    Tensor img(out.image.shape);
    for (size_t i = 0; i < img.data.size(); ++i) {
      double v = (out.image.data[i] - 0.5) * p.contrast + 0.5;
      img.data[i] = clamp01(v * p.brightness);
    }
    out.image = std::move(img);
  }
  return out;
}

LabeledSample augment_seg(const LabeledSample& s, Rng& rng, const ElasticConfig& e) {
  return augment_seg(s, SegAugParams::sample(rng, s.image.dim(2), s.image.dim(3), e));
}

// ---- manifest / iteration ----

std::string fnv1a_file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot checksum: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

void save_manifest(const DatasetManifest& m) {
  json j;
  j["format_version"] = 1;
  j["stereo"] = json::array();
  for (const auto& r : m.stereo) {
    json e = {{"scene_id", r.scene_id}, {"frame", r.frame},   {"left", r.left},
              {"right", r.right},       {"split", r.split},
              {"checksum_left", fnv1a_file_checksum(m.root + "/" + r.left)},
              {"checksum_right", fnv1a_file_checksum(m.root + "/" + r.right)}};
    if (!r.gt_disparity.empty()) e["gt_disparity"] = r.gt_disparity;
    if (!r.valid_mask.empty()) e["valid_mask"] = r.valid_mask;
    j["stereo"].push_back(e);
  }
  j["seg"] = json::array();
  for (const auto& r : m.seg) {
    j["seg"].push_back({{"knee_id", r.knee_id}, {"frame", r.frame},
                        {"image", r.image},     {"mask", r.mask},
                        {"split", r.split},
                        {"checksum_image", fnv1a_file_checksum(m.root + "/" + r.image)},
                        {"checksum_mask", fnv1a_file_checksum(m.root + "/" + r.mask)}});
  }
  fs::create_directories(m.root);
  std::ofstream out(m.root + "/manifest.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write manifest under " + m.root);
}

DatasetManifest load_manifest(const std::string& root) {
  std::ifstream in(root + "/manifest.json");
  if (!in) throw std::runtime_error("no manifest.json under " + root);
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw std::runtime_error("malformed manifest.json under " + root + ": " + ex.what());
  }
  if (j.value("format_version", -1) != 1)
    throw std::runtime_error("unsupported manifest format_version under " + root);

  DatasetManifest m;
  m.root = root;
  std::vector<std::string> issues;
  auto check_file = [&](const std::string& rel, const json& e, const char* ck) {
    std::string path = root + "/" + rel;
    if (!fs::exists(path)) {
      issues.push_back("missing file: " + rel);
      return;
    }
    if (e.contains(ck) && e[ck].get<std::string>() != fnv1a_file_checksum(path))
      issues.push_back("checksum mismatch: " + rel);
  };

  for (const auto& e : j.value("stereo", json::array())) {
    StereoRecord r;
    r.scene_id = e.at("scene_id").get<std::string>();
    r.frame = e.at("frame").get<int>();
    r.left = e.at("left").get<std::string>();
    r.right = e.at("right").get<std::string>();
    r.split = e.value("split", "train");
    r.gt_disparity = e.value("gt_disparity", "");
    r.valid_mask = e.value("valid_mask", "");
    check_file(r.left, e, "checksum_left");
    check_file(r.right, e, "checksum_right");
    for (const std::string& side : {r.gt_disparity, r.valid_mask})
      if (!side.empty() && !fs::exists(root + "/" + side))
        issues.push_back("missing file: " + side);
    m.stereo.push_back(std::move(r));
  }
  for (const auto& e : j.value("seg", json::array())) {
    SegRecord r;
    r.knee_id = e.at("knee_id").get<std::string>();
    r.frame = e.at("frame").get<int>();
    r.image = e.at("image").get<std::string>();
    r.mask = e.at("mask").get<std::string>();
    r.split = e.value("split", "train");
    check_file(r.image, e, "checksum_image");
    check_file(r.mask, e, "checksum_mask");
    m.seg.push_back(std::move(r));
  }
  if (!issues.empty()) {
    std::string msg = "dataset validation failed under " + root + ":";
    for (const auto& s : issues) msg += "\n  " + s;
    throw std::runtime_error(msg);
  }

  // per-knee presence fractions, computed from the masks themselves
  std::map<std::string, std::pair<int, std::array<int, kNumClasses>>> counts;
  for (const auto& r : m.seg) {
    LabelMask mask = load_png_mask(root + "/" + r.mask);
    std::array<bool, kNumClasses> present{};
    for (uint8_t v : mask.v) present[v] = true;
    auto& [n, per] = counts[r.knee_id];
    ++n;
    for (int c = 0; c < kNumClasses; ++c)
      if (present[c]) ++per[c];
  }
  for (const auto& [knee, np] : counts) {
    std::array<double, kNumClasses> frac{};
    for (int c = 0; c < kNumClasses; ++c)
      frac[c] = static_cast<double>(np.second[c]) / np.first;
    m.class_presence_stats[knee] = frac;
  }
  return m;
}

std::vector<std::vector<size_t>> batch_order(size_t n, int batch_size,
                                             uint64_t seed, int epoch) {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(seed);
  Rng epoch_rng = rng.fork(static_cast<uint64_t>(epoch));
  epoch_rng.shuffle(idx);
  std::vector<std::vector<size_t>> batches;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch_size))
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                         idx.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(n, i + static_cast<size_t>(batch_size))));
  return batches;
}

StereoSample load_stereo_sample(const DatasetManifest& m, const StereoRecord& rec) {
  StereoSample s;
  s.left = load_png_rgb(m.root + "/" + rec.left);
  s.right = load_png_rgb(m.root + "/" + rec.right);
  s.scene_id = rec.scene_id;
  s.frame_index = rec.frame;
  if (!s.left.same_shape(s.right))
    throw std::runtime_error("stereo pair shape mismatch for scene " + rec.scene_id);
  return s;
}

LabeledSample load_seg_sample(const DatasetManifest& m, const SegRecord& rec) {
  LabeledSample s;
  s.image = load_png_rgb(m.root + "/" + rec.image);
  s.mask = load_png_mask(m.root + "/" + rec.mask);
  s.knee_id = rec.knee_id;
  s.frame_index = rec.frame;
  if (s.mask.H != s.image.dim(2) || s.mask.W != s.image.dim(3))
    throw std::runtime_error("mask/image size mismatch for knee " + rec.knee_id);
  return s;
}

}  // namespace arthro::data
