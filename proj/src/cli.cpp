#include "arthro/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "arthro/eval.hpp"
#include "arthro/losses.hpp"
#include "arthro/pipeline.hpp"
#include "arthro/synthgen.hpp"

namespace fs = std::filesystem;

namespace arthro::cli {

namespace {

// thrown for problems the user must fix in flags/config (exit 2)
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

pipeline::RunConfig resolve_config(const std::string& config_path,
                                   const std::vector<std::string>& overrides,
                                   uint64_t seed, bool seed_given) {
  pipeline::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = pipeline::RunConfig::from_ini_file(config_path);
    for (const auto& kv : overrides) {
      size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
  } catch (const std::exception& ex) {
    throw UsageError(ex.what());
  }
  if (seed_given) cfg.seed = seed;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

// jet-style coloring of disparity relative to d_max
Tensor colorize_disparity(const Tensor& disp, double d_max) {
  const int H = disp.dim(2), W = disp.dim(3);
  Tensor rgb({1, 3, H, W});
  auto band = [](double t, double center) {
    return std::clamp(1.5 - std::abs(4.0 * t - center), 0.0, 1.0);
  };
  for (int i = 0; i < H * W; ++i) {
    const double t = std::clamp(disp.data[i] / d_max, 0.0, 1.0);
    rgb.data[i] = band(t, 3.0);
    rgb.data[H * W + i] = band(t, 2.0);
    rgb.data[2 * H * W + i] = band(t, 1.0);
  }
  return rgb;
}

int cmd_synth(const std::string& out, int scenes, int frames, int size,
              uint64_t seed, double train_fraction) {
  if (scenes < 1 || frames < 1) throw UsageError("need at least one scene and frame");
  if (train_fraction < 0.0 || train_fraction > 1.0)
    throw UsageError("--train-fraction must lie in [0,1]");
  Rng master(seed);
  std::vector<synth::SceneSpec> specs;
  for (int s = 0; s < scenes; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "scene%03d", s);
    const uint64_t scene_seed = master.fork(static_cast<uint64_t>(s)).engine()();
    for (int f = 0; f < frames; ++f)
      specs.push_back(synth::make_scene(id, size, scene_seed, f));
  }
  auto manifest = synth::emit_dataset(specs, out, train_fraction);

  std::ostringstream snap;
  snap << "[synth]\n"
       << "scenes = " << scenes << "\n"
       << "frames = " << frames << "\n"
       << "size = " << size << "\n"
       << "seed = " << seed << "\n"
       << "train_fraction = " << train_fraction << "\n";
  write_text(out + "/synth_config.ini", snap.str());
  std::cout << "wrote " << manifest.stereo.size() << " stereo pairs, "
            << manifest.seg.size() << " labelled frames to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split, const std::string& out) {
  auto ck = pipeline::load_checkpoint(ckpt_path);
  auto manifest = data::load_manifest(data_dir);
  std::vector<data::SegRecord> recs;
  for (const auto& r : manifest.seg)
    if (r.split == split) recs.push_back(r);
  if (recs.empty()) throw std::runtime_error("no labelled images in split " + split);

  auto seg = eval::evaluate_segmentation(ck.model, manifest, recs);
  std::ostringstream rep;
  rep << "class\tn_images\tdice_mean\tdice_sd\n";
  for (int c = 0; c < kNumClasses; ++c)
    rep << kClassNames[c] << "\t" << seg[c].n << "\t" << seg[c].mean << "\t"
        << seg[c].sd << "\n";
  try {
    auto d = eval::evaluate_depth(ck.model, manifest, split);
    rep << "depth_mae_px\t" << d.mae_px << "\n";
    rep << "depth_rel_err\t" << d.rel_err << "\n";
    rep << "depth_n_valid\t" << d.n_valid << "\n";
  } catch (const std::runtime_error&) {
    rep << "depth\tno ground-truth disparity in split\n";
  }
  std::cout << rep.str();
  if (!out.empty()) {
    write_text(out + "/eval.txt", rep.str());
    write_text(out + "/resolved_config.ini", ck.config.to_ini());
  }
  return 0;
}

int cmd_gradcheck(uint64_t seed, int instances) {
  auto rows = losses::gradient_suite(seed, instances);
  bool all_pass = true;
  std::printf("%-24s %10s %14s %6s\n", "term", "instances", "max_rel_err", "status");
  for (const auto& r : rows) {
    std::printf("%-24s %10d %14.3e %6s\n", r.name.c_str(), r.instances,
                r.max_rel_err, r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) throw std::runtime_error("gradient check failed");
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& out, const std::string& preprocess) {
  auto ck = pipeline::load_checkpoint(ckpt_path);
  Tensor img = data::load_png_rgb(image_path);
  if (preprocess == "endoscope")
    img = data::preprocess_raw(img, data::SourceKind::Endoscope1280x720);
  if (img.dim(2) != ck.config.model.input_h || img.dim(3) != ck.config.model.input_w)
    throw std::runtime_error("image is " + std::to_string(img.dim(2)) + "x" +
                             std::to_string(img.dim(3)) + " but the model expects " +
                             std::to_string(ck.config.model.input_h) + "x" +
                             std::to_string(ck.config.model.input_w));
  LabelMask mask = ck.model.infer_segmentation(img);
  Tensor disp = ck.model.infer_depth(img);
  fs::create_directories(out);
  data::save_png_mask(out + "/mask.png", mask);
  data::save_gt_disparity(out + "/disparity.bin", disp);
  data::save_png_rgb(out + "/disparity.png",
                     colorize_disparity(disp, ck.config.model.d_max));
  write_text(out + "/resolved_config.ini", ck.config.to_ini());
  std::cout << "wrote mask.png, disparity.bin, disparity.png to " << out << "\n";
  return 0;
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      size_t used = 0;
      seeds.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("--seeds expects a comma-separated integer list");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds list is empty");
  return seeds;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"multi-task segmentation + self-supervised depth"};
  app.require_subcommand(1);

  // shared training/eval options, bound per subcommand below
  struct {
    std::string config, data, out, encoder, resume;
    std::vector<std::string> sets;
    uint64_t seed = 1;
    int session_epochs = -1;
  } o;

  auto add_config_flags = [&](CLI::App* c) {
    c->add_option("--config", o.config, "config file (ini)");
    c->add_option("--set", o.sets, "override, section.key=value")->take_all();
    c->add_option("--seed", o.seed, "master seed (overrides config)");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic stereo dataset");
  int scenes = 20, frames = 1, size = 384;
  double train_fraction = 0.8;
  uint64_t synth_seed = 1;
  synth->add_option("--out", o.out, "dataset directory")->required();
  synth->add_option("--scenes", scenes, "number of scenes");
  synth->add_option("--frames", frames, "frames per scene");
  synth->add_option("--size", size, "image side in pixels");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--train-fraction", train_fraction, "share of scenes in train split");

  auto* pre = app.add_subcommand("pretrain", "stage 1: self-supervised depth");
  add_config_flags(pre);
  pre->add_option("--data", o.data, "dataset directory")->required();
  pre->add_option("--out", o.out, "run directory")->required();
  pre->add_option("--resume", o.resume, "checkpoint to continue from");
  pre->add_option("--session-epochs", o.session_epochs, "epoch budget for this call");

  auto* fin = app.add_subcommand("finetune", "stage 2: joint segmentation + depth");
  add_config_flags(fin);
  fin->add_option("--data", o.data, "dataset directory")->required();
  fin->add_option("--out", o.out, "run directory")->required();
  fin->add_option("--encoder", o.encoder, "pretraining checkpoint for the encoder");
  fin->add_option("--resume", o.resume, "checkpoint to continue from");
  fin->add_option("--session-epochs", o.session_epochs, "epoch budget for this call");

  auto* ev = app.add_subcommand("eval", "Dice and depth accuracy of a checkpoint");
  std::string ckpt, split = "test", image, preprocess = "none";
  ev->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  ev->add_option("--data", o.data, "dataset directory")->required();
  ev->add_option("--split", split, "dataset split to score");
  ev->add_option("--out", o.out, "report directory (optional)");

  auto* lo = app.add_subcommand("loocv", "leave-one-knee-out cross-validation");
  add_config_flags(lo);
  lo->add_option("--data", o.data, "dataset directory")->required();
  lo->add_option("--out", o.out, "run directory")->required();
  lo->add_option("--encoder", o.encoder, "pretraining checkpoint for the encoder");

  auto* cmp = app.add_subcommand("compare", "joint model vs depth-free ablation");
  add_config_flags(cmp);
  std::string seeds_arg = "1,2,3";
  cmp->add_option("--data", o.data, "dataset directory")->required();
  cmp->add_option("--out", o.out, "run directory")->required();
  cmp->add_option("--encoder", o.encoder, "pretraining checkpoint for the encoder");
  cmp->add_option("--seeds", seeds_arg, "comma-separated fine-tuning seeds");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  uint64_t gc_seed = 7;
  int gc_instances = 20;
  gc->add_option("--seed", gc_seed, "instance seed");
  gc->add_option("--instances", gc_instances, "random instances per loss term");

  auto* inf = app.add_subcommand("infer", "segment + estimate depth for one image");
  inf->add_option("--checkpoint", ckpt, "trained checkpoint")->required();
  inf->add_option("--image", image, "input PNG")->required();
  inf->add_option("--out", o.out, "output directory")->required();
  inf->add_option("--preprocess", preprocess, "none | endoscope")
      ->check(CLI::IsMember({"none", "endoscope"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(o.out, scenes, frames, size, synth_seed, train_fraction);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_instances);
    if (ev->parsed()) return cmd_eval(ckpt, o.data, split, o.out);
    if (inf->parsed()) return cmd_infer(ckpt, image, o.out, preprocess);

    const bool seed_given = app.get_subcommands().front()->count("--seed") > 0;
    pipeline::RunConfig cfg = resolve_config(o.config, o.sets, o.seed, seed_given);
    if (pre->parsed()) {
      auto manifest = data::load_manifest(o.data);
      auto r = pipeline::pretrain(cfg, manifest, o.out, o.resume, o.session_epochs);
      std::cout << "pretrain done: " << r.log.size() << " epochs this session, "
                << "checkpoint " << r.checkpoint_path << "\n";
      return 0;
    }
    if (fin->parsed()) {
      auto manifest = data::load_manifest(o.data);
      auto r = pipeline::finetune(cfg, manifest, o.encoder, o.out, o.resume,
                                  o.session_epochs);
      std::cout << "finetune done: " << r.log.size() << " epochs this session, "
                << "checkpoint " << r.checkpoint_path << "\n";
      return 0;
    }
    if (lo->parsed()) {
      auto manifest = data::load_manifest(o.data);
      write_text(o.out + "/resolved_config.ini", cfg.to_ini());
      auto rep = eval::loocv(cfg, manifest, o.encoder, o.out);
      std::cout << "loocv over " << rep.folds.size() << " knees; grand Dice:";
      for (int c = 0; c < kNumClasses; ++c)
        std::cout << " " << kClassNames[c] << "=" << rep.grand[c].mean;
      std::cout << "\n";
      return 0;
    }
    if (cmp->parsed()) {
      auto manifest = data::load_manifest(o.data);
      write_text(o.out + "/resolved_config.ini", cfg.to_ini());
      auto rep = eval::compare_depth_ablation(cfg, manifest, o.encoder,
                                              parse_seed_list(seeds_arg), o.out);
      std::cout << "joint mean Dice " << rep.joint_mean << " vs ablation "
                << rep.ablation_mean << " (p = " << rep.overall.p_value << ")\n";
      return 0;
    }
  } catch (const UsageError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}

}  // namespace arthro::cli
