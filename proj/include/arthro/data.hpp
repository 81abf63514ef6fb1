#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "arthro/types.hpp"

// On-disk dataset contracts, image containers, preprocessing and the
// augmentation pipelines for both training stages.
//
// Dataset root layout:
//   stereo/<scene_id>/<frame>_L.png, <frame>_R.png        8-bit RGB
//   stereo/<scene_id>/<frame>_gtdisp.bin                  optional eval sidecar
//   seg/<knee_id>/<frame>.png, <frame>_mask.png           mask values 0..4
//   manifest.json                                         ids, splits, checksums
namespace arthro::data {

struct StereoRecord {
  std::string scene_id;
  int frame = 0;
  std::string left, right;       // paths relative to the dataset root
  std::string gt_disparity;      // empty when absent
  std::string valid_mask;        // 0/1 float sidecar, empty when absent
  std::string split = "train";
};

struct SegRecord {
  std::string knee_id;
  int frame = 0;
  std::string image, mask;
  std::string split = "train";
};

struct DatasetManifest {
  std::string root;
  std::vector<StereoRecord> stereo;
  std::vector<SegRecord> seg;
  // per knee: fraction of frames containing each class
  std::map<std::string, std::array<double, kNumClasses>> class_presence_stats;
};

// ---- image containers ----
Tensor load_png_rgb(const std::string& path);                // (1,3,H,W) in [0,1]
void save_png_rgb(const std::string& path, const Tensor& image);
LabelMask load_png_mask(const std::string& path);            // values 0..4 enforced
void save_png_mask(const std::string& path, const LabelMask& mask);
// Flat binary disparity: uint32 H, uint32 W, then float32 row-major (LE).
Tensor load_gt_disparity(const std::string& path);           // (1,1,H,W)
void save_gt_disparity(const std::string& path, const Tensor& disparity);

// ---- preprocessing ----
enum class SourceKind { Endoscope1280x720, Stereo384 };

// Endoscope frames: centre-crop 720x720, bilinear downsample to 384x384.
// Stereo frames: validated pass-through.
Tensor preprocess_raw(const Tensor& image, SourceKind kind);

// ---- augmentation ----
struct DepthAugParams {
  double gamma = 1.0;
  double brightness = 1.0;
  std::array<double, 3> color = {1.0, 1.0, 1.0};
  bool hflip = false;
  bool vflip = false;

  static DepthAugParams sample(Rng& rng);
};
StereoSample augment_depth(const StereoSample& sample, const DepthAugParams& p);
StereoSample augment_depth(const StereoSample& sample, Rng& rng);

struct ElasticConfig {
  double grid_spacing = 64.0;  // px between displacement-field control points
  double amplitude = 10.0;     // px
  double sigma = 8.0;          // gaussian smoothing of the field, px
};

struct SegAugParams {
  bool hflip = false;
  bool vflip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  Tensor disp_x, disp_y;  // (1,1,H,W) pixel displacements; empty = identity

  static SegAugParams sample(Rng& rng, int H, int W, const ElasticConfig& elastic);
};
LabeledSample augment_seg(const LabeledSample& sample, const SegAugParams& p);
LabeledSample augment_seg(const LabeledSample& sample, Rng& rng,
                          const ElasticConfig& elastic);

// ---- manifest / iteration ----
void save_manifest(const DatasetManifest& manifest);  // writes root/manifest.json
DatasetManifest load_manifest(const std::string& root);

// Deterministic shuffled batch order for (seed, epoch); the last partial
// batch is kept. Worker count never enters the ordering.
std::vector<std::vector<size_t>> batch_order(size_t n, int batch_size,
                                             uint64_t seed, int epoch);

StereoSample load_stereo_sample(const DatasetManifest& m, const StereoRecord& rec);
LabeledSample load_seg_sample(const DatasetManifest& m, const SegRecord& rec);

std::string fnv1a_file_checksum(const std::string& path);

}  // namespace arthro::data
