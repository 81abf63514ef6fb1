#include "arthro/pipeline.hpp"

#include <cmath>
#include <algorithm>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace arthro::pipeline {

using ag::Var;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  double d = parse_double(key, v);
  int i = static_cast<int>(d);
  if (d != i) throw std::invalid_argument("config: " + key + " must be an integer");
  return i;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    if (pos == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: " + key + " must be true/false");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_int(key, item));
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// single dispatch point shared by the parser and --set overrides
void apply_key(RunConfig& c, const std::string& section, const std::string& key,
               const std::string& value) {
  const std::string full = section + "." + key;
  if (section == "run") {
    if (key == "seed") return void(c.seed = parse_u64(full, value));
  } else if (section == "model") {
    if (key == "input_h") return void(c.model.input_h = parse_int(full, value));
    if (key == "input_w") return void(c.model.input_w = parse_int(full, value));
    if (key == "num_classes") return void(c.model.num_classes = parse_int(full, value));
    if (key == "encoder_depth") return void(c.model.encoder_depth = parse_int(full, value));
    if (key == "encoder_kind") return void(c.model.encoder_kind = value);
    if (key == "d_max") return void(c.model.d_max = parse_double(full, value));
    if (key == "base_channels") return void(c.model.base_channels = parse_int(full, value));
  } else if (section == "pretrain") {
    if (key == "epochs") return void(c.pretrain.epochs = parse_int(full, value));
    if (key == "batch_size") return void(c.pretrain.batch_size = parse_int(full, value));
    if (key == "lr") return void(c.pretrain.lr = parse_double(full, value));
    if (key == "lr_milestones")
      return void(c.pretrain.lr_milestones = parse_int_list(full, value));
    if (key == "weight_decay")
      return void(c.pretrain.weight_decay = parse_double(full, value));
  } else if (section == "finetune") {
    if (key == "epochs") return void(c.finetune.epochs = parse_int(full, value));
    if (key == "batch_size") return void(c.finetune.batch_size = parse_int(full, value));
    if (key == "lr") return void(c.finetune.lr = parse_double(full, value));
    if (key == "poly_power") return void(c.finetune.poly_power = parse_double(full, value));
    if (key == "weight_decay")
      return void(c.finetune.weight_decay = parse_double(full, value));
  } else if (section == "loss") {
    if (key == "alpha_ce") return void(c.seg_w.alpha_ce = parse_double(full, value));
    if (key == "alpha_ap") return void(c.depth_w.alpha_ap = parse_double(full, value));
    if (key == "alpha_lr") return void(c.depth_w.alpha_lr = parse_double(full, value));
    if (key == "alpha_ds") return void(c.depth_w.alpha_ds = parse_double(full, value));
    if (key == "gamma") return void(c.depth_w.gamma = parse_double(full, value));
    if (key == "depth_task_weight")
      return void(c.depth_task_weight = parse_double(full, value));
  } else if (section == "augment") {
    if (key == "enabled") return void(c.augment.enabled = parse_bool(full, value));
    if (key == "elastic_grid_spacing")
      return void(c.augment.elastic.grid_spacing = parse_double(full, value));
    if (key == "elastic_amplitude")
      return void(c.augment.elastic.amplitude = parse_double(full, value));
    if (key == "elastic_sigma")
      return void(c.augment.elastic.sigma = parse_double(full, value));
  } else {
    throw std::invalid_argument("config: unknown section [" + section + "]");
  }
  throw std::invalid_argument("config: unknown key " + full);
}

void atomic_write(const std::string& path, const std::string& bytes) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + tmp);
  }
  fs::rename(tmp, path);
}

// ---- checkpoint serialization helpers ----

void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<char*>(&v), 4); }
void put_i64(std::string& s, int64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }
void put_str(std::string& s, const std::string& v) {
  put_i64(s, static_cast<int64_t>(v.size()));
  s.append(v);
}
void put_tensor(std::string& s, const Tensor& t) {
  put_u32(s, static_cast<uint32_t>(t.shape.size()));
  for (int d : t.shape) put_u32(s, static_cast<uint32_t>(d));
  s.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
}

struct Reader {
  const std::string& s;
  size_t pos = 0;
  explicit Reader(const std::string& bytes) : s(bytes) {}
  void need(size_t n) {
    if (pos + n > s.size()) throw std::runtime_error("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, s.data() + pos, 4);
    pos += 4;
    return v;
  }
  int64_t i64() {
    need(8);
    int64_t v;
    std::memcpy(&v, s.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    int64_t n = i64();
    if (n < 0) throw std::runtime_error("corrupt checkpoint string");
    need(static_cast<size_t>(n));
    std::string v = s.substr(pos, static_cast<size_t>(n));
    pos += static_cast<size_t>(n);
    return v;
  }
  Tensor tensor() {
    uint32_t nd = u32();
    if (nd == 0 || nd > 8) throw std::runtime_error("corrupt checkpoint tensor");
    std::vector<int> shape(nd);
    for (auto& d : shape) d = static_cast<int>(u32());
    Tensor t(shape);
    need(t.data.size() * 8);
    std::memcpy(t.data.data(), s.data() + pos, t.data.size() * 8);
    pos += t.data.size() * 8;
    return t;
  }
};

constexpr char kCkptMagic[8] = {'A', 'R', 'C', 'K', 'P', 'T', '0', '\n'};

[[noreturn]] void abort_diverged(const std::string& stage, int epoch, size_t batch,
                                 const std::string& sample_id, double lr,
                                 const std::string& reason, const nn::ParamList& params) {
  double pnorm = 0.0;
  bool finite_params = true;
  for (const auto& [name, p] : params)
    for (double v : p->value.data) {
      pnorm += v * v;
      finite_params = finite_params && std::isfinite(v);
    }
  std::ostringstream os;
  os << stage << ": non-finite training state at epoch " << epoch << " batch "
     << batch << " sample " << sample_id << " lr " << lr << " param_l2 "
     << std::sqrt(pnorm) << (finite_params ? "" : " (non-finite parameters)")
     << ": " << reason;
  throw std::runtime_error(os.str());
}

std::vector<Var> param_vars(const nn::ParamList& named) {
  std::vector<Var> out;
  out.reserve(named.size());
  for (const auto& [name, p] : named) out.push_back(p);
  return out;
}

void append_log(const std::string& path, const EpochLog& e) {
  std::ofstream out(path, std::ios::app);
  out << "{\"epoch\": " << e.epoch << ", \"loss\": " << fmt_double(e.loss)
      << ", \"lr\": " << fmt_double(e.lr) << "}\n";
}

}  // namespace

// ---- RunConfig ----

void RunConfig::set(const std::string& key, const std::string& value) {
  size_t dot = key.find('.');
  if (dot == std::string::npos)
    throw std::invalid_argument("config: override key must be section.key, got '" + key + "'");
  apply_key(*this, key.substr(0, dot), key.substr(dot + 1), trim(value));
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  os << "[run]\n";
  os << "seed = " << seed << "\n";
  os << "\n[model]\n";
  os << "input_h = " << model.input_h << "\n";
  os << "input_w = " << model.input_w << "\n";
  os << "num_classes = " << model.num_classes << "\n";
  os << "encoder_depth = " << model.encoder_depth << "\n";
  os << "encoder_kind = " << model.encoder_kind << "\n";
  os << "d_max = " << fmt_double(model.d_max) << "\n";
  os << "base_channels = " << model.base_channels << "\n";
  os << "\n[pretrain]\n";
  os << "epochs = " << pretrain.epochs << "\n";
  os << "batch_size = " << pretrain.batch_size << "\n";
  os << "lr = " << fmt_double(pretrain.lr) << "\n";
  os << "lr_milestones = ";
  for (size_t i = 0; i < pretrain.lr_milestones.size(); ++i)
    os << (i ? "," : "") << pretrain.lr_milestones[i];
  os << "\n";
  os << "weight_decay = " << fmt_double(pretrain.weight_decay) << "\n";
  os << "\n[finetune]\n";
  os << "epochs = " << finetune.epochs << "\n";
  os << "batch_size = " << finetune.batch_size << "\n";
  os << "lr = " << fmt_double(finetune.lr) << "\n";
  os << "poly_power = " << fmt_double(finetune.poly_power) << "\n";
  os << "weight_decay = " << fmt_double(finetune.weight_decay) << "\n";
  os << "\n[loss]\n";
  os << "alpha_ce = " << fmt_double(seg_w.alpha_ce) << "\n";
  os << "alpha_ap = " << fmt_double(depth_w.alpha_ap) << "\n";
  os << "alpha_lr = " << fmt_double(depth_w.alpha_lr) << "\n";
  os << "alpha_ds = " << fmt_double(depth_w.alpha_ds) << "\n";
  os << "gamma = " << fmt_double(depth_w.gamma) << "\n";
  os << "depth_task_weight = " << fmt_double(depth_task_weight) << "\n";
  os << "\n[augment]\n";
  os << "enabled = " << (augment.enabled ? "true" : "false") << "\n";
  os << "elastic_grid_spacing = " << fmt_double(augment.elastic.grid_spacing) << "\n";
  os << "elastic_amplitude = " << fmt_double(augment.elastic.amplitude) << "\n";
  os << "elastic_sigma = " << fmt_double(augment.elastic.sigma) << "\n";
  return os.str();
}

RunConfig RunConfig::from_ini_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      section = t.substr(1, t.size() - 2);
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    if (section.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": key outside any section");
    apply_key(c, section, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  c.model.validate();
  return c;
}

RunConfig RunConfig::from_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_ini_text(ss.str());
}

double pretrain_lr(const PretrainConfig& c, int epoch) {
  double lr = c.lr;
  for (int m : c.lr_milestones)
    if (epoch >= m) lr *= 0.5;
  return lr;
}

double finetune_lr(const FinetuneConfig& c, int epoch) {
  double t = static_cast<double>(epoch) / c.epochs;
  return c.lr * std::pow(1.0 - t, c.poly_power);
}

// ---- checkpoints ----

void save_checkpoint(const std::string& path, const RunConfig& cfg, model::Model& m,
                     const nn::ParamList& opt_params, const nn::Adam& opt,
                     int epochs_done, const Rng& trainer_rng) {
  std::string s;
  s.append(kCkptMagic, 8);
  put_u32(s, kCheckpointVersion);
  put_str(s, cfg.to_ini());
  put_i64(s, epochs_done);

  nn::ParamList params = m.all_params();
  put_i64(s, static_cast<int64_t>(params.size()));
  for (const auto& [name, p] : params) {
    put_str(s, name);
    put_tensor(s, p->value);
  }
  nn::BufferList buffers = m.named_buffers();
  put_i64(s, static_cast<int64_t>(buffers.size()));
  for (const auto& [name, t] : buffers) {
    put_str(s, name);
    put_tensor(s, *t);
  }
  put_i64(s, static_cast<int64_t>(opt_params.size()));
  for (const auto& [name, p] : opt_params) put_str(s, name);
  put_i64(s, opt.step_count());
  for (const Tensor& t : opt.moment1()) put_tensor(s, t);
  for (const Tensor& t : opt.moment2()) put_tensor(s, t);
  put_str(s, trainer_rng.serialize());
  atomic_write(path, s);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  Reader r(bytes);

  r.need(8);
  if (std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
    throw std::runtime_error(path + " is not a checkpoint");
  r.pos = 8;
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                             " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");

  Checkpoint ck;
  ck.config = RunConfig::from_ini_text(r.str());
  ck.epochs_done = static_cast<int>(r.i64());
  ck.model = model::Model::build(ck.config.model, 0);

  std::map<std::string, Var> by_name;
  for (const auto& [name, p] : ck.model.all_params()) by_name[name] = p;
  int64_t n_params = r.i64();
  if (n_params != static_cast<int64_t>(by_name.size()))
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (int64_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    Tensor t = r.tensor();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint has unknown parameter " + name);
    if (it->second->value.shape != t.shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    it->second->value = std::move(t);
  }
  std::map<std::string, Tensor*> buf_by_name;
  for (const auto& [name, t] : ck.model.named_buffers()) buf_by_name[name] = t;
  int64_t n_buffers = r.i64();
  if (n_buffers != static_cast<int64_t>(buf_by_name.size()))
    throw std::runtime_error("checkpoint buffer count mismatch");
  for (int64_t i = 0; i < n_buffers; ++i) {
    std::string name = r.str();
    Tensor t = r.tensor();
    auto it = buf_by_name.find(name);
    if (it == buf_by_name.end())
      throw std::runtime_error("checkpoint has unknown buffer " + name);
    *it->second = std::move(t);
  }

  int64_t n_opt = r.i64();
  for (int64_t i = 0; i < n_opt; ++i) ck.opt_param_names.push_back(r.str());
  ck.adam_t = r.i64();
  for (int64_t i = 0; i < n_opt; ++i) ck.adam_m.push_back(r.tensor());
  for (int64_t i = 0; i < n_opt; ++i) ck.adam_v.push_back(r.tensor());
  ck.trainer_rng = r.str();
  return ck;
}

void load_encoder_from(model::Model& dst, const std::string& checkpoint_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  if (!dst.config().compatible_encoder(ck.config.model))
    throw std::runtime_error("encoder architecture in " + checkpoint_path +
                             " does not match the model being fine-tuned");
  std::map<std::string, Var> src;
  for (const auto& [name, p] : ck.model.encoder_params()) src[name] = p;
  for (auto& [name, p] : dst.encoder_params()) {
    auto it = src.find(name);
    if (it == src.end()) throw std::runtime_error("missing encoder parameter " + name);
    p->value = it->second->value;
  }
  std::map<std::string, Tensor*> src_buf;
  for (const auto& [name, t] : ck.model.named_buffers()) src_buf[name] = t;
  for (auto& [name, t] : dst.named_buffers()) {
    if (name.rfind("enc.", 0) != 0) continue;
    auto it = src_buf.find(name);
    if (it == src_buf.end()) throw std::runtime_error("missing encoder buffer " + name);
    *t = *it->second;
  }
}

// ---- training ----

TrainResult pretrain(const RunConfig& cfg, const data::DatasetManifest& manifest,
                     const std::string& out_dir, const std::string& resume_from,
                     int session_epochs) {
  cfg.model.validate();
  std::vector<data::StereoRecord> recs;
  for (const auto& r : manifest.stereo)
    if (r.split == "train") recs.push_back(r);
  if (recs.empty()) throw std::runtime_error("pretrain: no training stereo pairs");

  model::Model m = model::Model::build(cfg.model, cfg.seed);
  Rng trainer_rng = Rng(cfg.seed).fork(17);
  int start_epoch = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    if (ck.config.to_ini() != cfg.to_ini())
      throw std::runtime_error("resume config differs from checkpoint config");
    m = ck.model;
    start_epoch = ck.epochs_done;
    trainer_rng.deserialize(ck.trainer_rng);
  }

  // segmentation heads stay out of the optimizer during pretraining
  nn::ParamList opt_params = m.encoder_params();
  for (auto& p : m.decoder_params()) opt_params.push_back(p);
  for (auto& p : m.disp_head_params()) opt_params.push_back(p);
  nn::Adam opt(param_vars(opt_params));
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    std::vector<std::string> names;
    for (const auto& [name, p] : opt_params) names.push_back(name);
    if (names != ck.opt_param_names)
      throw std::runtime_error("checkpoint optimizer state does not match pretraining");
    opt.restore(std::move(ck.adam_m), std::move(ck.adam_v), ck.adam_t);
  }

  fs::create_directories(out_dir);
  atomic_write(out_dir + "/config.ini", cfg.to_ini());
  const std::string ckpt_path = out_dir + "/pretrain_last.ckpt";
  const std::string log_path = out_dir + "/pretrain_log.jsonl";

  TrainResult result;
  int end_epoch = cfg.pretrain.epochs;
  if (session_epochs >= 0) end_epoch = std::min(end_epoch, start_epoch + session_epochs);
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const double lr = pretrain_lr(cfg.pretrain, epoch);
    auto batches = data::batch_order(recs.size(), cfg.pretrain.batch_size, cfg.seed, epoch);
    double loss_sum = 0.0;
    int n = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      opt.zero_grad();
      for (size_t idx : batches[b]) {
        StereoSample s = data::load_stereo_sample(manifest, recs[idx]);
        if (cfg.augment.enabled) s = data::augment_depth(s, trainer_rng);
        Var loss;
        try {
          model::ModelOutput out = m.forward(s.left, true);
          loss = losses::depth_loss(s, out.pyramid, cfg.depth_w);
        } catch (const std::exception& ex) {
          abort_diverged("pretrain", epoch, b,
                         s.scene_id + "/" + std::to_string(s.frame_index), lr,
                         ex.what(), opt_params);
        }
        const double lv = loss->value.data[0];
        if (!std::isfinite(lv))
          abort_diverged("pretrain", epoch, b, s.scene_id + "/" +
                         std::to_string(s.frame_index), lr,
                         "loss = " + std::to_string(lv), opt_params);
        ag::backward(ag::scale(loss, 1.0 / static_cast<double>(batches[b].size())));
        loss_sum += lv;
        ++n;
      }
      opt.step(lr, cfg.pretrain.weight_decay);
    }
    EpochLog e{epoch, loss_sum / std::max(n, 1), lr};
    append_log(log_path, e);
    result.log.push_back(e);
    save_checkpoint(ckpt_path, cfg, m, opt_params, opt, epoch + 1, trainer_rng);
  }
  result.model = m;
  result.checkpoint_path = ckpt_path;
  return result;
}

TrainResult finetune(const RunConfig& cfg, const data::DatasetManifest& manifest,
                     const std::string& encoder_ckpt, const std::string& out_dir,
                     const std::string& resume_from, int session_epochs) {
  cfg.model.validate();
  std::vector<data::SegRecord> seg_recs;
  for (const auto& r : manifest.seg)
    if (r.split == "train") seg_recs.push_back(r);
  std::vector<data::StereoRecord> st_recs;
  for (const auto& r : manifest.stereo)
    if (r.split == "train") st_recs.push_back(r);
  if (seg_recs.empty()) throw std::runtime_error("finetune: no labelled training frames");
  if (st_recs.empty()) throw std::runtime_error("finetune: no training stereo pairs");

  model::Model m = model::Model::build(cfg.model, cfg.seed);
  Rng trainer_rng = Rng(cfg.seed).fork(23);
  int start_epoch = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    if (ck.config.to_ini() != cfg.to_ini())
      throw std::runtime_error("resume config differs from checkpoint config");
    m = ck.model;
    start_epoch = ck.epochs_done;
    trainer_rng.deserialize(ck.trainer_rng);
  } else if (!encoder_ckpt.empty()) {
    load_encoder_from(m, encoder_ckpt);
    m.reinit_decoder_and_heads(Rng(cfg.seed).fork(29).engine()());
  }

  nn::ParamList opt_params = m.all_params();
  nn::Adam opt(param_vars(opt_params));
  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    std::vector<std::string> names;
    for (const auto& [name, p] : opt_params) names.push_back(name);
    if (names != ck.opt_param_names)
      throw std::runtime_error("checkpoint optimizer state does not match fine-tuning");
    opt.restore(std::move(ck.adam_m), std::move(ck.adam_v), ck.adam_t);
  }

  fs::create_directories(out_dir);
  atomic_write(out_dir + "/config.ini", cfg.to_ini());
  const std::string ckpt_path = out_dir + "/finetune_last.ckpt";
  const std::string log_path = out_dir + "/finetune_log.jsonl";

  TrainResult result;
  int end_epoch = cfg.finetune.epochs;
  if (session_epochs >= 0) end_epoch = std::min(end_epoch, start_epoch + session_epochs);
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const double lr = finetune_lr(cfg.finetune, epoch);
    // an epoch is one pass over the labelled set; stereo pairs cycle
    auto batches = data::batch_order(seg_recs.size(), cfg.finetune.batch_size, cfg.seed, epoch);
    std::vector<size_t> st_order;
    for (const auto& batch : data::batch_order(st_recs.size(), cfg.finetune.batch_size,
                                               cfg.seed ^ 0x5bd1e995u, epoch))
      st_order.insert(st_order.end(), batch.begin(), batch.end());

    double loss_sum = 0.0;
    int n = 0;
    size_t k = 0;  // position in the cycling stereo stream
    for (size_t b = 0; b < batches.size(); ++b) {
      opt.zero_grad();
      for (size_t idx : batches[b]) {
        LabeledSample ls = data::load_seg_sample(manifest, seg_recs[idx]);
        StereoSample ss =
            data::load_stereo_sample(manifest, st_recs[st_order[k % st_order.size()]]);
        ++k;
        if (cfg.augment.enabled) {
          ls = data::augment_seg(ls, trainer_rng, cfg.augment.elastic);
          ss = data::augment_depth(ss, trainer_rng);
        }

        Var loss;
        try {
          model::ModelOutput seg_out = m.forward(ls.image, true);
          Var seg = losses::seg_loss(
              ls.mask.onehot(), losses::average_seg_heads(seg_out.seg_heads), cfg.seg_w);
          if (cfg.depth_task_weight != 0.0) {
            model::ModelOutput dep_out = m.forward(ss.left, true);
            Var dep = losses::depth_loss(ss, dep_out.pyramid, cfg.depth_w);
            loss = ag::add(seg, ag::scale(dep, cfg.depth_task_weight));
          } else {
            loss = seg;
          }
        } catch (const std::exception& ex) {
          abort_diverged("finetune", epoch, b,
                         ls.knee_id + "/" + std::to_string(ls.frame_index), lr,
                         ex.what(), opt_params);
        }
        const double lv = loss->value.data[0];
        if (!std::isfinite(lv))
          abort_diverged("finetune", epoch, b, ls.knee_id + "/" +
                         std::to_string(ls.frame_index), lr,
                         "loss = " + std::to_string(lv), opt_params);
        ag::backward(ag::scale(loss, 1.0 / static_cast<double>(batches[b].size())));
        loss_sum += lv;
        ++n;
      }
      opt.step(lr, cfg.finetune.weight_decay);
    }
    EpochLog e{epoch, loss_sum / std::max(n, 1), lr};
    append_log(log_path, e);
    result.log.push_back(e);
    save_checkpoint(ckpt_path, cfg, m, opt_params, opt, epoch + 1, trainer_rng);
  }
  result.model = m;
  result.checkpoint_path = ckpt_path;
  return result;
}

}  // namespace arthro::pipeline

