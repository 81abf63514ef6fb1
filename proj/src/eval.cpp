#include "arthro/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace arthro::eval {

namespace {

DiceStats stats_of(const std::vector<double>& xs) {
  DiceStats s;
  s.n = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / s.n;
  double acc = 0.0;
  for (double x : xs) acc += (x - s.mean) * (x - s.mean);
  s.sd = s.n > 1 ? std::sqrt(acc / (s.n - 1)) : 0.0;
  return s;
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

std::array<double, kNumClasses> dice_per_class(const LabelMask& pred, const LabelMask& gt) {
  if (pred.H != gt.H || pred.W != gt.W)
    throw std::invalid_argument("dice: mask sizes differ");
  std::array<int64_t, kNumClasses> np{}, ng{}, ni{};
  for (size_t i = 0; i < gt.v.size(); ++i) {
    ++np[pred.v[i]];
    ++ng[gt.v[i]];
    if (pred.v[i] == gt.v[i]) ++ni[gt.v[i]];
  }
  std::array<double, kNumClasses> out{};
  for (int c = 0; c < kNumClasses; ++c) {
    if (ng[c] + np[c] == 0)
      out[c] = 1.0;  // absent and not hallucinated
    else
      out[c] = 2.0 * ni[c] / static_cast<double>(ng[c] + np[c]);
  }
  return out;
}

std::vector<std::array<double, kNumClasses>> per_image_dice(
    model::Model& m, const data::DatasetManifest& manifest,
    const std::vector<data::SegRecord>& records) {
  std::vector<std::array<double, kNumClasses>> rows;
  rows.reserve(records.size());
  for (const auto& rec : records) {
    LabeledSample s = data::load_seg_sample(manifest, rec);
    LabelMask pred = m.infer_segmentation(s.image);
    rows.push_back(dice_per_class(pred, s.mask));
  }
  return rows;
}

std::array<DiceStats, kNumClasses> evaluate_segmentation(
    model::Model& m, const data::DatasetManifest& manifest,
    const std::vector<data::SegRecord>& records) {
  auto rows = per_image_dice(m, manifest, records);
  std::array<std::vector<double>, kNumClasses> per_class;
  for (const auto& d : rows)
    for (int c = 0; c < kNumClasses; ++c) per_class[c].push_back(d[c]);
  std::array<DiceStats, kNumClasses> out;
  for (int c = 0; c < kNumClasses; ++c) out[c] = stats_of(per_class[c]);
  return out;
}

LoocvReport loocv(const pipeline::RunConfig& cfg, const data::DatasetManifest& manifest,
                  const std::string& encoder_ckpt, const std::string& out_dir) {
  std::set<std::string> knees;
  for (const auto& r : manifest.seg) knees.insert(r.knee_id);
  if (knees.size() < 2) throw std::invalid_argument("loocv needs at least two knees");

  LoocvReport report;
  Rng seed_rng(cfg.seed);
  int fold_idx = 0;
  for (const std::string& held : knees) {
    data::DatasetManifest fold = manifest;
    std::vector<data::SegRecord> held_recs;
    for (auto& r : fold.seg) {
      r.split = r.knee_id == held ? "test" : "train";
      if (r.knee_id == held) held_recs.push_back(r);
    }
    pipeline::RunConfig fold_cfg = cfg;
    fold_cfg.seed = seed_rng.fork(static_cast<uint64_t>(fold_idx)).engine()();

    auto trained = pipeline::finetune(fold_cfg, fold, encoder_ckpt,
                                      out_dir + "/fold_" + held);
    FoldReport fr;
    fr.held_out = held;
    fr.n_images = static_cast<int>(held_recs.size());
    fr.per_class = evaluate_segmentation(trained.model, fold, held_recs);
    report.folds.push_back(std::move(fr));
    ++fold_idx;
  }

  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> fold_means;
    for (const auto& f : report.folds) fold_means.push_back(f.per_class[c].mean);
    report.grand[c] = stats_of(fold_means);
  }

  write_fold_table(out_dir + "/loocv_table.txt", report);
  std::vector<std::string> series;
  std::vector<std::array<double, kNumClasses>> values;
  for (const auto& f : report.folds) {
    series.push_back(f.held_out);
    std::array<double, kNumClasses> v{};
    for (int c = 0; c < kNumClasses; ++c) v[c] = f.per_class[c].mean;
    values.push_back(v);
  }
  write_dice_chart(out_dir + "/loocv_chart.png", series, values);
  return report;
}

CompareReport compare_depth_ablation(const pipeline::RunConfig& cfg,
                                     const data::DatasetManifest& manifest,
                                     const std::string& encoder_ckpt,
                                     const std::vector<uint64_t>& seeds,
                                     const std::string& out_dir) {
  std::vector<data::SegRecord> test_recs;
  for (const auto& r : manifest.seg)
    if (r.split == "test") test_recs.push_back(r);
  if (test_recs.empty()) throw std::invalid_argument("compare: empty test split");
  if (seeds.empty()) throw std::invalid_argument("compare: need at least one seed");

  // pooled per-image rows over all seeds, paired by (seed, image)
  std::vector<std::array<double, kNumClasses>> joint_rows, abl_rows;
  for (uint64_t seed : seeds) {
    pipeline::RunConfig jc = cfg;
    jc.seed = seed;
    pipeline::RunConfig ac = jc;
    ac.depth_task_weight = 0.0;
    const std::string tag = std::to_string(seed);
    auto jr = pipeline::finetune(jc, manifest, encoder_ckpt, out_dir + "/joint_" + tag);
    auto ar = pipeline::finetune(ac, manifest, encoder_ckpt, out_dir + "/ablation_" + tag);
    for (auto& row : per_image_dice(jr.model, manifest, test_recs))
      joint_rows.push_back(row);
    for (auto& row : per_image_dice(ar.model, manifest, test_recs))
      abl_rows.push_back(row);
  }

  CompareReport rep;
  std::vector<double> joint_img, abl_img;  // per-image mean Dice
  for (size_t i = 0; i < joint_rows.size(); ++i) {
    double js = 0.0, as = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
      js += joint_rows[i][c];
      as += abl_rows[i][c];
    }
    joint_img.push_back(js / kNumClasses);
    abl_img.push_back(as / kNumClasses);
  }
  rep.joint_mean = stats_of(joint_img).mean;
  rep.ablation_mean = stats_of(abl_img).mean;
  rep.overall = wilcoxon_signed_rank(joint_img, abl_img);

  std::vector<ComparisonRow> rows;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<double> jv, av;
    for (size_t i = 0; i < joint_rows.size(); ++i) {
      jv.push_back(joint_rows[i][c]);
      av.push_back(abl_rows[i][c]);
    }
    rep.joint[c] = stats_of(jv);
    rep.ablation[c] = stats_of(av);
    rows.push_back({kClassNames[c], rep.ablation[c], rep.joint[c],
                    wilcoxon_signed_rank(jv, av).p_value});
  }
  write_comparison_table(out_dir + "/comparison_table.txt", rows);

  std::array<double, kNumClasses> jm{}, am{};
  for (int c = 0; c < kNumClasses; ++c) {
    jm[c] = rep.joint[c].mean;
    am[c] = rep.ablation[c].mean;
  }
  write_dice_chart(out_dir + "/comparison_chart.png", {"ablation", "joint"}, {am, jm});
  return rep;
}

DepthAccuracy depth_accuracy(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  if (pred.shape != gt.shape)
    throw std::invalid_argument("depth_accuracy: shape mismatch " + pred.shape_str() +
                                " vs " + gt.shape_str());
  const bool use_valid = valid.numel() > 0;
  if (use_valid && valid.shape != gt.shape)
    throw std::invalid_argument("depth_accuracy: valid mask shape mismatch");
  const int W = gt.dim(3);
  DepthAccuracy out;
  double mae = 0.0, rel = 0.0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    if (use_valid && valid.data[static_cast<size_t>(i)] < 0.5) continue;
    const double g = gt.data[static_cast<size_t>(i)];
    if (g <= 0.0) continue;
    const double err = std::abs(pred.data[static_cast<size_t>(i)] - g);
    mae += err * W;
    rel += err / g;
    ++out.n_valid;
  }
  if (out.n_valid > 0) {
    out.mae_px = mae / static_cast<double>(out.n_valid);
    out.rel_err = rel / static_cast<double>(out.n_valid);
  }
  return out;
}

DepthAccuracy evaluate_depth(model::Model& m, const data::DatasetManifest& manifest,
                             const std::string& split) {
  double mae = 0.0, rel = 0.0;
  int64_t n = 0;
  for (const auto& rec : manifest.stereo) {
    if (rec.split != split || rec.gt_disparity.empty()) continue;
    StereoSample s = data::load_stereo_sample(manifest, rec);
    Tensor pred = m.infer_depth(s.left);
    Tensor gt = data::load_gt_disparity(manifest.root + "/" + rec.gt_disparity);
    Tensor valid;
    if (!rec.valid_mask.empty())
      valid = data::load_gt_disparity(manifest.root + "/" + rec.valid_mask);
    DepthAccuracy a = depth_accuracy(pred, gt, valid);
    mae += a.mae_px * static_cast<double>(a.n_valid);
    rel += a.rel_err * static_cast<double>(a.n_valid);
    n += a.n_valid;
  }
  if (n == 0) throw std::runtime_error("no ground-truth disparity in split " + split);
  return {mae / static_cast<double>(n), rel / static_cast<double>(n), n};
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b, WilcoxonMode mode) {
  if (a.size() != b.size())
    throw std::invalid_argument("wilcoxon: paired samples must have equal size");
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (diff != 0.0) d.push_back(diff);
  }

  WilcoxonResult res;
  res.n_effective = static_cast<int>(d.size());
  if (d.empty()) {
    res.all_zero = true;
    return res;
  }
  const int n = res.n_effective;

  // midranks of |d|, doubled so that tied half-ranks stay integral
  std::vector<size_t> order(d.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t i, size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<int64_t> rank2(d.size());
  double tie_sum = 0.0;  // sum of t^3 - t over tie groups
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && std::abs(d[order[j]]) == std::abs(d[order[i]])) ++j;
    const int64_t doubled = static_cast<int64_t>(i + 1 + j) ;  // 2 * mean rank
    for (size_t k = i; k < j; ++k) rank2[order[k]] = doubled;
    const double t = static_cast<double>(j - i);
    tie_sum += t * t * t - t;
    i = j;
  }

  int64_t w_plus2 = 0, total2 = 0;
  for (size_t i = 0; i < d.size(); ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  const double w_plus = w_plus2 / 2.0;
  const double w_minus = (total2 - w_plus2) / 2.0;
  res.statistic = std::min(w_plus, w_minus);
  res.direction = w_plus > w_minus ? 1 : (w_plus < w_minus ? -1 : 0);

  const bool exact = mode == WilcoxonMode::Exact ||
                     (mode == WilcoxonMode::Auto && n <= 25);
  if (exact) {
    // distribution of W+ (doubled units) over all 2^n sign assignments
    std::vector<double> count(static_cast<size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    for (size_t i = 0; i < d.size(); ++i) {
      const auto r = static_cast<size_t>(rank2[i]);
      for (size_t s = count.size(); s-- > r;) count[s] += count[s - r];
    }
    const double denom = std::pow(2.0, n);
    double le = 0.0, ge = 0.0;
    for (size_t s = 0; s < count.size(); ++s) {
      if (static_cast<int64_t>(s) <= w_plus2) le += count[s];
      if (static_cast<int64_t>(s) >= w_plus2) ge += count[s];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / denom);
    res.exact = true;
  } else {
    const double mean = n * (n + 1) / 4.0;
    const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_sum / 48.0;
    if (var <= 0.0) {
      res.p_value = 1.0;
      return res;
    }
    double dev = w_plus - mean;
    dev -= dev > 0 ? 0.5 : (dev < 0 ? -0.5 : 0.0);  // continuity correction
    const double z = dev / std::sqrt(var);
    res.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(z)));
  }
  return res;
}

void write_fold_table(const std::string& path, const LoocvReport& report) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  out << "fold_id\tclass\tn_images\tdice_mean\tdice_sd\n";
  for (const auto& f : report.folds)
    for (int c = 0; c < kNumClasses; ++c)
      out << f.held_out << "\t" << kClassNames[c] << "\t" << f.n_images << "\t"
          << f.per_class[c].mean << "\t" << f.per_class[c].sd << "\n";
  for (int c = 0; c < kNumClasses; ++c)
    out << "grand\t" << kClassNames[c] << "\t" << report.folds.size() << "\t"
        << report.grand[c].mean << "\t" << report.grand[c].sd << "\n";
  if (!out) throw std::runtime_error("cannot write " + path);
}

void write_comparison_table(const std::string& path,
                            const std::vector<ComparisonRow>& rows) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  out << "class\tbase_mean\tbase_sd\tvariant_mean\tvariant_sd\tp_value\n";
  for (const auto& r : rows)
    out << r.class_name << "\t" << r.baseline.mean << "\t" << r.baseline.sd << "\t"
        << r.variant.mean << "\t" << r.variant.sd << "\t" << r.p_value << "\n";
  if (!out) throw std::runtime_error("cannot write " + path);
}

void write_dice_chart(const std::string& path, const std::vector<std::string>& series,
                      const std::vector<std::array<double, kNumClasses>>& values) {
  if (series.size() != values.size())
    throw std::invalid_argument("chart: one value row per series required");
  const int W = 900, H = 480, margin = 60;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));

  const int plot_w = W - 2 * margin, plot_h = H - 2 * margin;
  cv::line(img, {margin, H - margin}, {W - margin, H - margin}, {0, 0, 0}, 1);
  cv::line(img, {margin, margin}, {margin, H - margin}, {0, 0, 0}, 1);
  for (int tick = 0; tick <= 10; ++tick) {
    int y = H - margin - tick * plot_h / 10;
    cv::line(img, {margin - 4, y}, {margin, y}, {0, 0, 0}, 1);
    cv::putText(img, cv::format("%.1f", tick / 10.0), {8, y + 4},
                cv::FONT_HERSHEY_SIMPLEX, 0.35, {0, 0, 0});
  }

  const std::vector<cv::Scalar> palette = {
      {180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214}, {189, 103, 148}};
  const int group_w = plot_w / kNumClasses;
  const int bar_w = std::max(2, static_cast<int>(
      group_w * 0.8 / static_cast<double>(std::max<size_t>(series.size(), 1))));
  for (int c = 0; c < kNumClasses; ++c) {
    const int gx = margin + c * group_w + group_w / 10;
    for (size_t s = 0; s < series.size(); ++s) {
      const double v = std::clamp(values[s][static_cast<size_t>(c)], 0.0, 1.0);
      const int h = static_cast<int>(v * plot_h);
      const int x0 = gx + static_cast<int>(s) * bar_w;
      cv::rectangle(img, {x0, H - margin - h}, {x0 + bar_w - 2, H - margin},
                    palette[s % palette.size()], cv::FILLED);
    }
    cv::putText(img, kClassNames[c], {gx, H - margin + 18}, cv::FONT_HERSHEY_SIMPLEX,
                0.45, {0, 0, 0});
  }
  for (size_t s = 0; s < series.size(); ++s) {
    const int y = margin + static_cast<int>(s) * 18;
    cv::rectangle(img, {W - margin - 110, y - 8}, {W - margin - 96, y + 4},
                  palette[s % palette.size()], cv::FILLED);
    cv::putText(img, series[s], {W - margin - 90, y + 2}, cv::FONT_HERSHEY_SIMPLEX,
                0.4, {0, 0, 0});
  }

  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  if (!cv::imwrite(path, img)) throw std::runtime_error("cannot write chart " + path);
}

}  // namespace arthro::eval
