#include "arthro/model.hpp"

#include <stdexcept>

namespace arthro::model {

namespace {

// Nodes receiving upsampled coarser-scale disparity feedback.
bool has_disparity_feedback(int i, int j) {
  return (i == 2 && j == 2) || (i == 1 && j == 3) || (i == 0 && j == 4);
}

// Disparity heads sit on the diagonal nodes (3,1),(2,2),(1,3),(0,4).
bool has_disparity_head(int i, int j) { return i + j == 4 && j >= 1; }

}  // namespace

void ModelConfig::validate() const {
  if (input_h % 16 || input_w % 16)
    throw std::invalid_argument("ModelConfig: input size must be divisible by 16");
  if (input_h < 16 || input_w < 16) throw std::invalid_argument("ModelConfig: input too small");
  if (d_max <= 0.0 || d_max > 1.0) throw std::invalid_argument("ModelConfig: d_max out of (0,1]");
  if (d_max * input_w < 1.0)
    throw std::invalid_argument("ModelConfig: d_max*W must cover at least one pixel");
  if (encoder_kind != "tiny" && encoder_kind != "resnet50")
    throw std::invalid_argument("ModelConfig: unknown encoder '" + encoder_kind + "'");
  if (encoder_depth != 5) throw std::invalid_argument("ModelConfig: encoder_depth must be 5");
  if (encoder_kind == "tiny" && base_channels < 2)
    throw std::invalid_argument("ModelConfig: base_channels too small");
}

std::vector<std::pair<int, int>> disparity_scales(const ModelConfig& cfg) {
  std::vector<std::pair<int, int>> s;
  for (int i = 0; i < losses::kPyramidScales; ++i)
    s.emplace_back(cfg.input_h >> i, cfg.input_w >> i);
  return s;
}

namespace detail {

Bottleneck::Bottleneck(int in_ch, int mid_ch, int out_ch, int stride, Rng& rng)
    : c1(in_ch, mid_ch, 1, 1, 0, rng),
      c2(mid_ch, mid_ch, 3, stride, 1, rng),
      c3(mid_ch, out_ch, 1, 1, 0, rng),
      b1(mid_ch),
      b2(mid_ch),
      b3(out_ch) {
  if (in_ch != out_ch || stride != 1) {
    proj.emplace(in_ch, out_ch, 1, stride, 0, rng);
    proj_bn.emplace(out_ch);
  }
}

Var Bottleneck::operator()(const Var& x, bool training) {
  Var h = ag::relu_v(b1(c1(x), training));
  h = ag::relu_v(b2(c2(h), training));
  h = b3(c3(h), training);
  Var skip = proj ? (*proj_bn)((*proj)(x), training) : x;
  return ag::relu_v(ag::add(h, skip));
}

void Bottleneck::collect(ParamList& out, const std::string& prefix) const {
  c1.collect(out, prefix + ".c1");
  b1.collect(out, prefix + ".b1");
  c2.collect(out, prefix + ".c2");
  b2.collect(out, prefix + ".b2");
  c3.collect(out, prefix + ".c3");
  b3.collect(out, prefix + ".b3");
  if (proj) {
    proj->collect(out, prefix + ".proj");
    proj_bn->collect(out, prefix + ".proj_bn");
  }
}

Var EncoderStage::operator()(const Var& x, bool training) {
  Var h = x;
  if (pool_first) h = ag::maxpool2x2(h);
  for (auto& c : convs) h = c(h, training);
  for (auto& b : blocks) h = b(h, training);
  if (pool_after) h = ag::maxpool2x2(h);
  return h;
}

void EncoderStage::collect(ParamList& out, const std::string& prefix) const {
  for (size_t k = 0; k < convs.size(); ++k)
    convs[k].collect(out, prefix + ".conv" + std::to_string(k));
  for (size_t k = 0; k < blocks.size(); ++k)
    blocks[k].collect(out, prefix + ".block" + std::to_string(k));
}

void Bottleneck::collect_buffers(nn::BufferList& out, const std::string& prefix) {
  b1.collect_buffers(out, prefix + ".b1");
  b2.collect_buffers(out, prefix + ".b2");
  b3.collect_buffers(out, prefix + ".b3");
  if (proj_bn) proj_bn->collect_buffers(out, prefix + ".proj_bn");
}

void EncoderStage::collect_buffers(nn::BufferList& out, const std::string& prefix) {
  for (size_t k = 0; k < convs.size(); ++k)
    convs[k].collect_buffers(out, prefix + ".conv" + std::to_string(k));
  for (size_t k = 0; k < blocks.size(); ++k)
    blocks[k].collect_buffers(out, prefix + ".block" + std::to_string(k));
}

}  // namespace detail

Model Model::build(const ModelConfig& cfg, uint64_t init_seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Rng rng(init_seed);

  const int rows = cfg.encoder_depth;
  m.encoder_.resize(rows);
  if (cfg.encoder_kind == "tiny") {
    m.enc_ch_.resize(rows);
    for (int i = 0; i < rows; ++i) m.enc_ch_[i] = cfg.base_channels << i;
    for (int i = 0; i < rows; ++i) {
      // 3x3 conv block followed by max pooling (no pooling on the stem row)
      detail::EncoderStage& st = m.encoder_[i];
      st.pool_after = i > 0;
      st.convs.emplace_back(i == 0 ? 3 : m.enc_ch_[i - 1], m.enc_ch_[i], 3, 1, rng);
    }
    m.dec_ch_.resize(rows);
    for (int i = 0; i < rows; ++i) m.dec_ch_[i] = cfg.base_channels << i;
  } else {  // resnet50 stages 0-3 under a full-resolution stem row
    m.enc_ch_ = {64, 64, 256, 512, 1024};
    m.encoder_[0].convs.emplace_back(3, 64, 3, 1, rng);
    m.encoder_[1].convs.emplace_back(64, 64, 7, 2, rng);
    auto add_stage = [&](int row, int in_ch, int mid, int out, int blocks, int stride,
                         bool pool) {
      detail::EncoderStage& st = m.encoder_[row];
      st.pool_first = pool;
      st.blocks.emplace_back(in_ch, mid, out, stride, rng);
      for (int b = 1; b < blocks; ++b) st.blocks.emplace_back(out, mid, out, 1, rng);
    };
    add_stage(2, 64, 64, 256, 3, 1, true);
    add_stage(3, 256, 128, 512, 4, 2, false);
    add_stage(4, 512, 256, 1024, 6, 2, false);
    m.dec_ch_ = {32, 64, 128, 256, 256};
  }

  m.build_decoder_and_heads(rng);
  return m;
}

void Model::build_decoder_and_heads(Rng& rng) {
  const int rows = cfg_.encoder_depth;
  nodes_.assign(rows, std::vector<std::optional<detail::DecoderNode>>(rows));
  for (int j = 1; j < rows; ++j)
    for (int i = 0; i + j < rows; ++i) {
      int in_ch = enc_ch_[i];                       // x_{i,0}
      for (int l = 1; l < j; ++l) in_ch += dec_ch_[i];  // x_{i,1..j-1}
      in_ch += (j - 1 == 0) ? enc_ch_[i + 1] : dec_ch_[i + 1];  // U(x_{i+1,j-1})
      if (has_disparity_feedback(i, j)) in_ch += 2;  // U(d^l), U(d^r)
      detail::DecoderNode node;
      node.c1 = nn::ConvBnRelu(in_ch, dec_ch_[i], 3, 1, rng);
      node.c2 = nn::ConvBnRelu(dec_ch_[i], dec_ch_[i], 3, 1, rng);
      nodes_[i][j] = std::move(node);
    }

  seg_heads_.clear();
  for (int j = 1; j <= 4; ++j)
    seg_heads_.emplace_back(dec_ch_[0], cfg_.num_classes, 1, 1, 0, rng);

  disp_heads_.clear();
  for (int i = 0; i < losses::kPyramidScales; ++i) {
    detail::DisparityHeadPair pair;
    pair.left = nn::Conv2d(dec_ch_[i], 1, 3, 1, 1, rng);
    pair.right = nn::Conv2d(dec_ch_[i], 1, 3, 1, 1, rng);
    disp_heads_.push_back(std::move(pair));
  }
}

void Model::reinit_decoder_and_heads(uint64_t seed) {
  Rng rng(seed);
  build_decoder_and_heads(rng);
}

ModelOutput Model::forward(const Var& image, bool training) {
  const Tensor& t = image->value;
  if (t.ndim() != 4 || t.shape[1] != 3 || t.shape[2] != cfg_.input_h ||
      t.shape[3] != cfg_.input_w)
    throw std::invalid_argument("Model::forward: expected (N,3," +
                                std::to_string(cfg_.input_h) + "," +
                                std::to_string(cfg_.input_w) + "), got " + t.shape_str());

  const int rows = cfg_.encoder_depth;
  std::vector<std::vector<Var>> x(rows, std::vector<Var>(rows));
  std::vector<Var> d_left(losses::kPyramidScales), d_right(losses::kPyramidScales);

  x[0][0] = encoder_[0](image, training);
  for (int i = 1; i < rows; ++i) x[i][0] = encoder_[i](x[i - 1][0], training);

  for (int j = 1; j < rows; ++j)
    for (int i = rows - 1 - j; i >= 0; --i) {
      const Var& coarser = x[i + 1][j - 1];
      const int h = cfg_.input_h >> i, w = cfg_.input_w >> i;
      std::vector<Var> inputs;
      for (int l = 0; l < j; ++l) inputs.push_back(x[i][l]);
      inputs.push_back(ag::resize_bilinear(coarser, h, w));
      if (has_disparity_feedback(i, j)) {
        inputs.push_back(ag::resize_bilinear(d_left[i + 1], h, w));
        inputs.push_back(ag::resize_bilinear(d_right[i + 1], h, w));
      }
      x[i][j] = (*nodes_[i][j])(ag::concat_channels(inputs), training);
      if (has_disparity_head(i, j)) {
        d_left[i] = ag::scale(ag::sigmoid_v(disp_heads_[i].left(x[i][j])), cfg_.d_max);
        d_right[i] = ag::scale(ag::sigmoid_v(disp_heads_[i].right(x[i][j])), cfg_.d_max);
      }
    }

  ModelOutput out;
  for (int j = 1; j <= 4; ++j)
    out.seg_heads.push_back(ag::softmax_channels(seg_heads_[j - 1](x[0][j])));
  out.pyramid.left = std::move(d_left);
  out.pyramid.right = std::move(d_right);
  return out;
}

LabelMask Model::infer_segmentation(const Tensor& image) {
  ModelOutput out = forward(image, false);
  const Tensor& p = out.seg_heads[3]->value;
  LabelMask mask(p.shape[2], p.shape[3]);
  for (int y = 0; y < p.shape[2]; ++y)
    for (int x = 0; x < p.shape[3]; ++x) {
      int best = 0;
      double best_v = p.at(0, 0, y, x);
      for (int c = 1; c < p.shape[1]; ++c)
        if (p.at(0, c, y, x) > best_v) {
          best_v = p.at(0, c, y, x);
          best = c;
        }
      mask.at(y, x) = static_cast<uint8_t>(best);
    }
  return mask;
}

Tensor Model::infer_depth(const Tensor& image) {
  return forward(image, false).pyramid.left[0]->value;
}

ParamList Model::encoder_params() const {
  ParamList out;
  for (size_t i = 0; i < encoder_.size(); ++i)
    encoder_[i].collect(out, "enc." + std::to_string(i));
  return out;
}

ParamList Model::decoder_params() const {
  ParamList out;
  for (size_t i = 0; i < nodes_.size(); ++i)
    for (size_t j = 0; j < nodes_[i].size(); ++j)
      if (nodes_[i][j])
        nodes_[i][j]->collect(out, "dec." + std::to_string(i) + "." + std::to_string(j));
  return out;
}

ParamList Model::seg_head_params() const {
  ParamList out;
  for (size_t j = 0; j < seg_heads_.size(); ++j)
    seg_heads_[j].collect(out, "seg_head." + std::to_string(j + 1));
  return out;
}

ParamList Model::disp_head_params() const {
  ParamList out;
  for (size_t i = 0; i < disp_heads_.size(); ++i)
    disp_heads_[i].collect(out, "disp_head." + std::to_string(i));
  return out;
}

ParamList Model::all_params() const {
  ParamList out = encoder_params();
  for (auto& p : decoder_params()) out.push_back(p);
  for (auto& p : seg_head_params()) out.push_back(p);
  for (auto& p : disp_head_params()) out.push_back(p);
  return out;
}

nn::BufferList Model::named_buffers() {
  nn::BufferList out;
  for (size_t i = 0; i < encoder_.size(); ++i)
    encoder_[i].collect_buffers(out, "enc." + std::to_string(i));
  for (size_t i = 0; i < nodes_.size(); ++i)
    for (size_t j = 0; j < nodes_[i].size(); ++j)
      if (nodes_[i][j])
        nodes_[i][j]->collect_buffers(out, "dec." + std::to_string(i) + "." + std::to_string(j));
  return out;
}

}  // namespace arthro::model
