#include "arthro/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace arthro::synth {

namespace {

constexpr double kNearClip = 0.01;

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// deterministic lattice value in [-1,1]
double lattice(int64_t ix, int64_t iy, uint64_t seed) {
  uint64_t h = splitmix64(seed ^ splitmix64(static_cast<uint64_t>(ix) * 0x632be59bd9b4e019ULL ^
                                            static_cast<uint64_t>(iy)));
  return static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53) * 2.0 - 1.0;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double px, double py, uint64_t seed) {
  double fx = std::floor(px), fy = std::floor(py);
  int64_t ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
  double tx = smoothstep(px - fx), ty = smoothstep(py - fy);
  double v00 = lattice(ix, iy, seed), v10 = lattice(ix + 1, iy, seed);
  double v01 = lattice(ix, iy + 1, seed), v11 = lattice(ix + 1, iy + 1, seed);
  return (1 - ty) * ((1 - tx) * v00 + tx * v10) + ty * ((1 - tx) * v01 + tx * v11);
}

// two smooth octaves keep the texture friendly to bilinear warping
double texture(double x, double y, uint64_t seed) {
  return 0.25 * value_noise(x * 8.0, y * 8.0, seed) +
         0.125 * value_noise(x * 16.0, y * 16.0, seed ^ 0x51ed270b2f6a87ULL);
}

struct Hit {
  double z = 0.0;       // depth of the hit (ray z-component is 1)
  double px = 0.0, py = 0.0, pz = 0.0;
  int prim = -1;
};

// camera centre (t,0,0); ray direction (dx,dy,1)
bool intersect(const SceneSpec& spec, double t, double dx, double dy, Hit& best) {
  best.prim = -1;
  best.z = 1e30;
  for (size_t i = 0; i < spec.primitives.size(); ++i) {
    const Primitive& pr = spec.primitives[i];
    double s = -1.0;
    if (pr.kind == Primitive::Kind::Sphere) {
      double ox = t - pr.cx, oy = -pr.cy, oz = -pr.cz;
      double a = dx * dx + dy * dy + 1.0;
      double b = 2.0 * (ox * dx + oy * dy + oz);
      double c = ox * ox + oy * oy + oz * oz - pr.radius * pr.radius;
      double disc = b * b - 4.0 * a * c;
      if (disc < 0.0) continue;
      double sq = std::sqrt(disc);
      s = (-b - sq) / (2.0 * a);
      if (s <= kNearClip) s = (-b + sq) / (2.0 * a);
    } else {
      double denom = 1.0 - pr.ax * dx - pr.ay * dy;
      if (std::abs(denom) < 1e-12) continue;
      s = (pr.z0 + pr.ax * t) / denom;
    }
    if (s <= kNearClip || s >= best.z) continue;
    double px = t + s * dx, py = s * dy, pz = s;
    // slanted planes are square patches of half-extent `radius`; fronto
    // planes are infinite so they can serve as backgrounds
    if (pr.kind == Primitive::Kind::SlantedPlane &&
        (std::abs(px - pr.cx) > pr.radius || std::abs(py - pr.cy) > pr.radius))
      continue;
    best = {pz, px, py, pz, static_cast<int>(i)};
  }
  return best.prim >= 0;
}

struct Shade {
  double r, g, b;
};

Shade shade_point(const SceneSpec& spec, const Hit& h) {
  const Primitive& pr = spec.primitives[static_cast<size_t>(h.prim)];
  double tex = texture(h.px, h.py, pr.texture_seed);
  double light = 1.0;
  if (pr.kind == Primitive::Kind::Sphere) {
    double nx = (h.px - pr.cx) / pr.radius, ny = (h.py - pr.cy) / pr.radius,
           nz = (h.pz - pr.cz) / pr.radius;
    // fixed directional light plus ambient term
    const double lx = 0.3, ly = -0.4, lz = -0.86;
    light = 0.35 + 0.65 * std::max(0.0, nx * lx + ny * ly + nz * lz);
  }
  double base = 0.75 + tex;
  auto ch = [&](double albedo) { return std::clamp(albedo * base * light, 0.0, 1.0); };
  return {ch(pr.albedo_r), ch(pr.albedo_g), ch(pr.albedo_b)};
}

void apply_vignette(Tensor& img, double strength) {
  if (strength <= 0.0) return;
  const int H = img.dim(2), W = img.dim(3);
  const double cyc = (H - 1) / 2.0, cxc = (W - 1) / 2.0;
  const double rmax2 = cyc * cyc + cxc * cxc;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double r2 = (y - cyc) * (y - cyc) + (x - cxc) * (x - cxc);
        img.at(0, c, y, x) *= 1.0 - strength * r2 / rmax2;
      }
}

void box_blur3(Tensor& img) {
  Tensor out(img.shape);
  const int H = img.dim(2), W = img.dim(3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += img.at(0, c, std::clamp(y + dy, 0, H - 1), std::clamp(x + dx, 0, W - 1));
        out.at(0, c, y, x) = acc / 9.0;
      }
  img = std::move(out);
}

void apply_degradation(Tensor& img, const Degradation& d) {
  if (d.overexpose)
    for (double& v : img.data) v = std::min(1.0, v * 1.8);
  for (int i = 0; i < d.blur_passes; ++i) box_blur3(img);
  if (d.detexture > 0.0) {
    const int H = img.dim(2), W = img.dim(3);
    for (int c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) mean += img.at(0, c, y, x);
      mean /= H * W;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double& v = img.at(0, c, y, x);
          v = mean + (v - mean) * (1.0 - d.detexture);
        }
    }
  }
}

void quantize_8bit(Tensor& img) {
  for (double& v : img.data)
    v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

SyntheticSample render(const SceneSpec& spec) {
  if (spec.primitives.empty()) throw std::invalid_argument("scene has no primitives");
  if (spec.width <= 0 || spec.height <= 0 || spec.focal_px <= 0.0 || spec.baseline_m <= 0.0)
    throw std::invalid_argument("bad scene geometry parameters");
  const int W = spec.width, H = spec.height;
  const double f = spec.focal_px, B = spec.baseline_m;
  const double cxp = (W - 1) / 2.0, cyp = (H - 1) / 2.0;

  SyntheticSample out;
  out.stereo.scene_id = spec.scene_id;
  out.stereo.left = Tensor({1, 3, H, W});
  out.stereo.right = Tensor({1, 3, H, W});
  out.gt_disparity = Tensor({1, 1, H, W});
  out.mask = LabelMask(H, W);
  out.valid = Tensor({1, 1, H, W});

  std::vector<Hit> left_hits(static_cast<size_t>(H) * W);
  for (int cam = 0; cam < 2; ++cam) {
    const double t = cam == 0 ? 0.0 : -B;
    Tensor& img = cam == 0 ? out.stereo.left : out.stereo.right;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        Hit h;
        if (!intersect(spec, t, (x - cxp) / f, (y - cyp) / f, h))
          throw std::runtime_error("scene " + spec.scene_id +
                                   " does not cover the full field of view");
        Shade s = shade_point(spec, h);
        img.at(0, 0, y, x) = s.r;
        img.at(0, 1, y, x) = s.g;
        img.at(0, 2, y, x) = s.b;
        if (cam == 0) left_hits[static_cast<size_t>(y) * W + x] = h;
      }
  }

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Hit& h = left_hits[static_cast<size_t>(y) * W + x];
      double d_px = f * B / h.z;
      double d = d_px / W;
      if (d > spec.d_max)
        throw std::invalid_argument("scene " + spec.scene_id + " disparity " +
                                    std::to_string(d) + " exceeds d_max " +
                                    std::to_string(spec.d_max));
      out.gt_disparity.at(0, 0, y, x) = d;
      out.mask.at(y, x) = spec.primitives[static_cast<size_t>(h.prim)].class_label;

      // visibility: the same point must be the nearest hit on the right ray
      double ur = x + d_px;
      bool vis = ur >= 0.0 && ur <= W - 1.0;
      if (vis) {
        Hit hr;
        vis = intersect(spec, -B, (ur - cxp) / f, (y - cyp) / f, hr) &&
              std::abs(hr.z - h.z) <= 0.005 * h.z + 1e-9;
      }
      out.valid.at(0, 0, y, x) = vis ? 1.0 : 0.0;
    }

  for (Tensor* img : {&out.stereo.left, &out.stereo.right}) {
    apply_vignette(*img, spec.vignette);
    apply_degradation(*img, spec.degrade);
    quantize_8bit(*img);
  }
  return out;
}

SceneSpec make_scene(const std::string& scene_id, int size, uint64_t seed, int frame) {
  Rng master(seed);
  Rng rng = master.fork(static_cast<uint64_t>(frame));

  SceneSpec spec;
  spec.scene_id = scene_id;
  spec.width = spec.height = size;
  spec.focal_px = 1.25 * size;
  spec.baseline_m = 0.08;

  auto albedo = [&](Primitive& p, double r, double g, double b) {
    p.albedo_r = r;
    p.albedo_g = g;
    p.albedo_b = b;
  };

  // background plane, class 0
  Primitive bg;
  bg.kind = Primitive::Kind::FrontoPlane;
  bg.class_label = 0;
  bg.z0 = rng.uniform(1.8, 2.2);
  bg.texture_seed = rng.fork(100).engine()();
  albedo(bg, 0.45, 0.4, 0.5);
  spec.primitives.push_back(bg);

  // lateral placement scaled by the frustum half-width at depth z
  auto place = [&](double z) { return rng.uniform(-0.45, 0.45) * z * (size / 2.0) / spec.focal_px; };

  struct Band {
    uint8_t label;
    double z_lo, z_hi, r_lo, r_hi;
    double ar, ag, ab;
  };
  // nearer structures keep systematically larger disparity (ACL nearest)
  const Band bands[] = {
      {4, 0.50, 0.60, 0.050, 0.075, 0.85, 0.75, 0.55},  // ACL
      {1, 0.70, 0.85, 0.110, 0.150, 0.90, 0.85, 0.75},  // Femur
      {3, 0.95, 1.10, 0.090, 0.130, 0.65, 0.45, 0.45},  // Meniscus
  };
  for (const Band& b : bands) {
    Primitive p;
    p.kind = Primitive::Kind::Sphere;
    p.class_label = b.label;
    p.cz = rng.uniform(b.z_lo, b.z_hi);
    p.radius = rng.uniform(b.r_lo, b.r_hi);
    p.cx = place(p.cz);
    p.cy = place(p.cz);
    p.texture_seed = rng.fork(b.label).engine()();
    albedo(p, b.ar, b.ag, b.ab);
    spec.primitives.push_back(p);
  }

  // tibia: slanted square patch between meniscus band and background
  Primitive tibia;
  tibia.kind = Primitive::Kind::SlantedPlane;
  tibia.class_label = 2;
  double z = rng.uniform(1.25, 1.45);
  tibia.ax = rng.uniform(-0.15, 0.15);
  tibia.ay = rng.uniform(0.1, 0.3);
  tibia.cx = place(z);
  tibia.cy = place(z);
  tibia.z0 = z - tibia.ax * tibia.cx - tibia.ay * tibia.cy;
  tibia.radius = rng.uniform(0.25, 0.4);  // patch half-extent
  tibia.texture_seed = rng.fork(2).engine()();
  albedo(tibia, 0.8, 0.8, 0.7);
  spec.primitives.push_back(tibia);

  return spec;
}

data::DatasetManifest emit_dataset(const std::vector<SceneSpec>& specs,
                                   const std::string& root, double train_fraction) {
  if (specs.empty()) throw std::invalid_argument("emit_dataset: no scenes");
  if (train_fraction < 0.0 || train_fraction > 1.0)
    throw std::invalid_argument("emit_dataset: train_fraction out of [0,1]");

  data::DatasetManifest m;
  m.root = root;
  const size_t n_train = static_cast<size_t>(std::lround(train_fraction * specs.size()));
  std::map<std::string, int> frame_counter;

  for (size_t i = 0; i < specs.size(); ++i) {
    const SceneSpec& spec = specs[i];
    SyntheticSample s = render(spec);
    const int frame = frame_counter[spec.scene_id]++;
    const std::string split = i < n_train ? "train" : "test";
    const std::string fstem = std::to_string(frame);

    data::StereoRecord sr;
    sr.scene_id = spec.scene_id;
    sr.frame = frame;
    sr.split = split;
    sr.left = "stereo/" + spec.scene_id + "/" + fstem + "_L.png";
    sr.right = "stereo/" + spec.scene_id + "/" + fstem + "_R.png";
    sr.gt_disparity = "stereo/" + spec.scene_id + "/" + fstem + "_gtdisp.bin";
    sr.valid_mask = "stereo/" + spec.scene_id + "/" + fstem + "_valid.bin";
    data::save_png_rgb(root + "/" + sr.left, s.stereo.left);
    data::save_png_rgb(root + "/" + sr.right, s.stereo.right);
    data::save_gt_disparity(root + "/" + sr.gt_disparity, s.gt_disparity);
    data::save_gt_disparity(root + "/" + sr.valid_mask, s.valid);
    m.stereo.push_back(std::move(sr));

    data::SegRecord gr;
    gr.knee_id = spec.scene_id;
    gr.frame = frame;
    gr.split = split;
    gr.image = "seg/" + spec.scene_id + "/" + fstem + ".png";
    gr.mask = "seg/" + spec.scene_id + "/" + fstem + "_mask.png";
    data::save_png_rgb(root + "/" + gr.image, s.stereo.left);
    data::save_png_mask(root + "/" + gr.mask, s.mask);
    m.seg.push_back(std::move(gr));
  }
  data::save_manifest(m);
  return m;
}

}  // namespace arthro::synth
