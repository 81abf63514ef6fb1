#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arthro/data.hpp"
#include "arthro/types.hpp"

// Built-in synthetic stereo scene generator. Scenes are rendered by ray
// casting from a rectified pair of pinhole cameras (left at the origin,
// right shifted by -baseline along X), so a point at depth Z appears at
// x_r = x_l + f*B/Z exactly. Every sample carries its ground-truth left
// disparity (normalised by image width), the left class mask, and a
// validity mask flagging pixels occluded or out of view in the right image.
namespace arthro::synth {

struct Primitive {
  enum class Kind { FrontoPlane, SlantedPlane, Sphere };
  Kind kind = Kind::FrontoPlane;
  uint8_t class_label = 0;

  // planes: Z = z0 + ax*X + ay*Y (metres); spheres: centre + radius
  double z0 = 1.0, ax = 0.0, ay = 0.0;
  double cx = 0.0, cy = 0.0, cz = 1.0, radius = 0.2;

  uint64_t texture_seed = 0;
  double albedo_r = 0.8, albedo_g = 0.6, albedo_b = 0.5;
};

struct Degradation {
  bool overexpose = false;   // x1.8 gain with clipping
  int blur_passes = 0;       // repeated 3x3 box blur
  double detexture = 0.0;    // 0..1 blend towards the per-image mean
};

struct SceneSpec {
  std::string scene_id;
  int width = 64, height = 64;
  double focal_px = 80.0;
  double baseline_m = 0.05;
  double d_max = 0.3;        // normalised disparity cap the model assumes
  double vignette = 0.0;     // 0..1 edge falloff strength
  std::vector<Primitive> primitives;
  Degradation degrade;
};

struct SyntheticSample {
  StereoSample stereo;
  Tensor gt_disparity;  // (1,1,H,W), left view, normalised by width
  LabelMask mask;       // left view
  Tensor valid;         // (1,1,H,W), 1 = usable for photometric checks
};

SyntheticSample render(const SceneSpec& spec);

// Random scene around a far background plane with one primitive per
// foreground class, each inside its own depth band (nearer structures keep
// systematically larger disparity). `frame` perturbs the poses.
SceneSpec make_scene(const std::string& scene_id, int size, uint64_t seed, int frame = 0);

// Renders one frame per spec into the data-module layout (stereo pair +
// gt sidecar + left seg image/mask) and writes manifest.json. The first
// round(train_fraction * n) specs become the train split, the rest "test".
data::DatasetManifest emit_dataset(const std::vector<SceneSpec>& specs,
                                   const std::string& root, double train_fraction);

}  // namespace arthro::synth
