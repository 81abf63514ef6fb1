#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arthro/data.hpp"
#include "arthro/losses.hpp"
#include "arthro/model.hpp"
#include "arthro/nn.hpp"

// Two-stage training: self-supervised depth pretraining on stereo pairs,
// then supervised fine-tuning of segmentation with the depth task kept as a
// regulariser. Every run is reproducible from (config, seed); checkpoints
// carry everything needed to resume bit-for-bit at epoch granularity.
namespace arthro::pipeline {

struct PretrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr = 1e-4;
  std::vector<int> lr_milestones = {80, 120};  // lr halves at each
  double weight_decay = 0.0;
};

struct FinetuneConfig {
  int epochs = 120;
  int batch_size = 12;
  double lr = 1e-4;
  double poly_power = 0.9;  // lr * (1 - epoch/epochs)^power
  double weight_decay = 1e-5;
};

struct AugmentConfig {
  bool enabled = true;
  data::ElasticConfig elastic;
};

struct RunConfig {
  uint64_t seed = 1;
  model::ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  losses::SegLossWeights seg_w;
  losses::DepthLossWeights depth_w;
  // scales the whole depth objective during fine-tuning; 0 turns the model
  // into a pure segmentation network (the ablation arm)
  double depth_task_weight = 1.0;
  AugmentConfig augment;

  // "section.key=value" override; unknown keys or bad values throw.
  void set(const std::string& key, const std::string& value);
  std::string to_ini() const;
  static RunConfig from_ini_text(const std::string& text);
  static RunConfig from_ini_file(const std::string& path);
};

double pretrain_lr(const PretrainConfig& c, int epoch);
double finetune_lr(const FinetuneConfig& c, int epoch);

// ---- checkpoints ----
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  int epochs_done = 0;
  model::Model model;  // rebuilt from config with weights and buffers loaded
  std::vector<std::string> opt_param_names;
  std::vector<Tensor> adam_m, adam_v;
  int64_t adam_t = 0;
  std::string trainer_rng;  // serialized augmentation stream
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, model::Model& m,
                     const nn::ParamList& opt_params, const nn::Adam& opt,
                     int epochs_done, const Rng& trainer_rng);
Checkpoint load_checkpoint(const std::string& path);

// Copies encoder weights and running stats from a pretraining checkpoint
// into `dst`; encoder architectures must match.
void load_encoder_from(model::Model& dst, const std::string& checkpoint_path);

// ---- training ----
struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  model::Model model;
  std::vector<EpochLog> log;
  std::string checkpoint_path;
};

// Stage 1: depth objective only; segmentation heads stay frozen and out of
// the optimizer. Writes config.ini, pretrain_log.jsonl and
// pretrain_last.ckpt under out_dir. `resume_from` continues an interrupted
// run and must carry an identical config. `session_epochs` bounds how many
// epochs this call trains (-1 = to completion), for time-budgeted sessions.
TrainResult pretrain(const RunConfig& cfg, const data::DatasetManifest& manifest,
                     const std::string& out_dir, const std::string& resume_from = "",
                     int session_epochs = -1);

// Stage 2: joint seg + depth objective over paired batches; the shorter of
// the two datasets cycles. `encoder_ckpt` seeds the encoder (empty = train
// from scratch); decoder and heads always restart fresh.
TrainResult finetune(const RunConfig& cfg, const data::DatasetManifest& manifest,
                     const std::string& encoder_ckpt, const std::string& out_dir,
                     const std::string& resume_from = "", int session_epochs = -1);

}  // namespace arthro::pipeline
