#pragma once

#include <array>
#include <string>
#include <vector>

#include "arthro/data.hpp"
#include "arthro/model.hpp"
#include "arthro/pipeline.hpp"

// Evaluation: per-class Dice, leave-one-knee-out cross-validation, depth
// accuracy against ground-truth disparity, Wilcoxon signed-rank testing,
// and report/chart emission.
namespace arthro::eval {

// Per-class Dice overlap. Convention for classes absent from the
// annotation: 1.0 when the prediction is also empty, 0.0 otherwise.
std::array<double, kNumClasses> dice_per_class(const LabelMask& pred, const LabelMask& gt);

struct DiceStats {
  double mean = 0.0;
  double sd = 0.0;
  int n = 0;
};

// one Dice row per record, in record order
std::vector<std::array<double, kNumClasses>> per_image_dice(
    model::Model& m, const data::DatasetManifest& manifest,
    const std::vector<data::SegRecord>& records);

// mean/sd of per-image Dice for each class over a record set
std::array<DiceStats, kNumClasses> evaluate_segmentation(
    model::Model& m, const data::DatasetManifest& manifest,
    const std::vector<data::SegRecord>& records);

struct FoldReport {
  std::string held_out;  // knee id
  int n_images = 0;
  std::array<DiceStats, kNumClasses> per_class{};
};

struct LoocvReport {
  std::vector<FoldReport> folds;
  // grand mean/sd taken over fold means
  std::array<DiceStats, kNumClasses> grand{};
};

// One fold per distinct knee id: fine-tune on the others, evaluate Dice on
// the held-out knee. Fold seeds derive from cfg.seed. Writes per-fold run
// directories, loocv_table.txt and loocv_chart.png under out_dir.
LoocvReport loocv(const pipeline::RunConfig& cfg, const data::DatasetManifest& manifest,
                  const std::string& encoder_ckpt, const std::string& out_dir);

struct DepthAccuracy {
  double mae_px = 0.0;   // mean |pred - gt| in pixels
  double rel_err = 0.0;  // mean |pred - gt| / gt
  int64_t n_valid = 0;
};

// Pixels with valid == 0 (occluded / out of view) are skipped; pass an
// empty tensor to use every pixel.
DepthAccuracy depth_accuracy(const Tensor& pred, const Tensor& gt, const Tensor& valid);

// Pooled accuracy of m over the stereo records of `split` that carry
// ground-truth sidecars.
DepthAccuracy evaluate_depth(model::Model& m, const data::DatasetManifest& manifest,
                             const std::string& split);

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-) over nonzero differences
  int n_effective = 0;     // pairs left after dropping zero differences
  double p_value = 1.0;    // two-sided
  bool exact = false;      // exact distribution (n <= 25) vs normal approx
  bool all_zero = false;   // no nonzero differences: p fixed at 1
  int direction = 0;       // sign of W+ - W-: +1 favours a, -1 favours b
};

enum class WilcoxonMode { Auto, Exact, Normal };

// Paired two-sided test on a[i] - b[i]. Zero differences are dropped; ties
// take midranks. Exact tail probabilities for n <= 25, otherwise a normal
// approximation with continuity and tie corrections.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b,
                                    WilcoxonMode mode = WilcoxonMode::Auto);

struct CompareReport {
  std::array<DiceStats, kNumClasses> joint{}, ablation{};  // pooled over seeds
  double joint_mean = 0.0;     // grand mean of per-image mean Dice
  double ablation_mean = 0.0;
  WilcoxonResult overall;      // paired per-image mean Dice, joint vs ablation
};

// Fine-tunes the joint model and a depth_task_weight = 0 ablation with
// identical seeds, evaluates both on the test split, and pairs per-image
// Dice for the Wilcoxon test. Writes comparison_table.txt and
// comparison_chart.png plus per-arm run directories under out_dir.
CompareReport compare_depth_ablation(const pipeline::RunConfig& cfg,
                                     const data::DatasetManifest& manifest,
                                     const std::string& encoder_ckpt,
                                     const std::vector<uint64_t>& seeds,
                                     const std::string& out_dir);

// One line per (fold, class):  fold_id  class  n_images  dice_mean  dice_sd
void write_fold_table(const std::string& path, const LoocvReport& report);

struct ComparisonRow {
  std::string class_name;
  DiceStats baseline, variant;
  double p_value = 1.0;
};
// One line per class:  class  base_mean  base_sd  var_mean  var_sd  p
void write_comparison_table(const std::string& path,
                            const std::vector<ComparisonRow>& rows);

// Grouped-bar chart of per-class Dice; one group per class, one bar per
// series. Values are clipped to [0,1].
void write_dice_chart(const std::string& path, const std::vector<std::string>& series,
                      const std::vector<std::array<double, kNumClasses>>& values);

}  // namespace arthro::eval
