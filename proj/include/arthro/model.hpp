#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "arthro/losses.hpp"
#include "arthro/nn.hpp"
#include "arthro/types.hpp"

// Nested dense-skip encoder-decoder with four full-resolution segmentation
// heads and four left/right disparity head pairs at scales H/2^i, i=0..3.
// Decoder node (i,j) consumes all same-row predecessors, the upsampled
// coarser node, and — on the head diagonal — the upsampled coarser-scale
// disparity pair.
namespace arthro::model {

using ag::Var;
using nn::ParamList;

struct ModelConfig {
  int input_h = 384;
  int input_w = 384;
  int num_classes = kNumClasses;
  int encoder_depth = 5;
  std::string encoder_kind = "resnet50";  // or "tiny"
  double d_max = 0.3;
  int base_channels = 8;  // tiny encoder width

  void validate() const;
  bool compatible_encoder(const ModelConfig& o) const {
    return encoder_kind == o.encoder_kind && base_channels == o.base_channels &&
           encoder_depth == o.encoder_depth;
  }
};

struct ModelOutput {
  std::vector<Var> seg_heads;  // 4 heads, each (N,classes,H,W)
  losses::DisparityPyramid pyramid;
};

// (H/2^i, W/2^i) for i = 0..3, fixed by the architecture.
std::vector<std::pair<int, int>> disparity_scales(const ModelConfig& cfg);

namespace detail {

struct Bottleneck {
  nn::Conv2d c1, c2, c3;
  nn::BatchNorm2d b1, b2, b3;
  std::optional<nn::Conv2d> proj;
  std::optional<nn::BatchNorm2d> proj_bn;

  Bottleneck() = default;
  Bottleneck(int in_ch, int mid_ch, int out_ch, int stride, Rng& rng);
  Var operator()(const Var& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_buffers(nn::BufferList& out, const std::string& prefix);
};

struct EncoderStage {
  bool pool_first = false;  // 2x2 max pool before the convs
  bool pool_after = false;  // 2x2 max pool after the convs
  std::vector<nn::ConvBnRelu> convs;
  std::vector<Bottleneck> blocks;

  Var operator()(const Var& x, bool training);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_buffers(nn::BufferList& out, const std::string& prefix);
};

struct DecoderNode {
  nn::ConvBnRelu c1, c2;
  Var operator()(const Var& x, bool training) { return c2(c1(x, training), training); }
  void collect(ParamList& out, const std::string& prefix) const {
    c1.collect(out, prefix + ".c1");
    c2.collect(out, prefix + ".c2");
  }
  void collect_buffers(nn::BufferList& out, const std::string& prefix) {
    c1.collect_buffers(out, prefix + ".c1");
    c2.collect_buffers(out, prefix + ".c2");
  }
};

struct DisparityHeadPair {
  nn::Conv2d left, right;
  void collect(ParamList& out, const std::string& prefix) const {
    left.collect(out, prefix + ".left");
    right.collect(out, prefix + ".right");
  }
};

}  // namespace detail

class Model {
 public:
  Model() = default;  // empty shell; assign from build() before use
  static Model build(const ModelConfig& cfg, uint64_t init_seed);

  // image: (N,3,H,W) matching the configured input size.
  ModelOutput forward(const Var& image, bool training);
  ModelOutput forward(const Tensor& image, bool training) {
    return forward(ag::constant(image), training);
  }

  // Argmax of the last segmentation head; ties resolve to the lowest index.
  LabelMask infer_segmentation(const Tensor& image);
  // Finest-scale left disparity map, (N,1,H,W).
  Tensor infer_depth(const Tensor& image);

  const ModelConfig& config() const { return cfg_; }

  ParamList encoder_params() const;
  ParamList decoder_params() const;
  ParamList seg_head_params() const;
  ParamList disp_head_params() const;
  ParamList all_params() const;
  // batch-norm running stats, in the same walk order as all_params()
  nn::BufferList named_buffers();

  // Fresh decoder and head parameters; encoder untouched.
  void reinit_decoder_and_heads(uint64_t seed);

  std::vector<detail::DisparityHeadPair>& disparity_heads() { return disp_heads_; }
  std::vector<nn::Conv2d>& seg_head_convs() { return seg_heads_; }

 private:
  void build_decoder_and_heads(Rng& rng);

  ModelConfig cfg_;
  std::vector<int> enc_ch_, dec_ch_;
  std::vector<detail::EncoderStage> encoder_;                 // rows 0..4
  std::vector<std::vector<std::optional<detail::DecoderNode>>> nodes_;  // [i][j]
  std::vector<nn::Conv2d> seg_heads_;                         // j = 1..4
  std::vector<detail::DisparityHeadPair> disp_heads_;         // scale i = 0..3
};

}  // namespace arthro::model
