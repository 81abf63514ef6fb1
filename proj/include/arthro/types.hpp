#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arthro/tensor.hpp"

namespace arthro {

inline constexpr int kNumClasses = 5;
inline const char* kClassNames[kNumClasses] = {"Background", "Femur", "Tibia",
                                               "Meniscus", "ACL"};

// Hard per-pixel class annotation, values in {0..4}.
struct LabelMask {
  int H = 0, W = 0;
  std::vector<uint8_t> v;

  LabelMask() = default;
  LabelMask(int h, int w) : H(h), W(w), v(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * W + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * W + x]; }

  // (1, kNumClasses, H, W) one-hot tensor.
  Tensor onehot() const {
    Tensor t({1, kNumClasses, H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) t.at(0, at(y, x), y, x) = 1.0;
    return t;
  }
};

// Rectified stereo pair; images are (1,C,H,W) in [0,1].
struct StereoSample {
  Tensor left, right;
  std::string scene_id;
  int frame_index = 0;
};

// Image + annotation pair for supervised segmentation.
struct LabeledSample {
  Tensor image;  // (1,C,H,W)
  LabelMask mask;
  std::string knee_id;
  int frame_index = 0;
};

}  // namespace arthro
