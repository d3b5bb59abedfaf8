// Experiment orchestration: key=value config files, dataset/episode assembly,
// the full stage-1 -> selection -> stage-2 -> evaluation pipeline, and the
// JSON metrics report. Every report embeds its resolved config and seed.
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/selection.hpp"
#include "mgvit/synthdata.hpp"
#include "mgvit/trainer.hpp"

namespace mgvit::train {

// ---------------------------------------------------------------------------
// key=value config files. '#' starts a comment; later assignments win;
// --set overrides are applied after the file.
// ---------------------------------------------------------------------------

class KvConfig {
 public:
  static KvConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config file: " + path);
    KvConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw InputError("config line " + std::to_string(line_no) + " is not key=value: " + trimmed);
      }
      cfg.values_[trim(trimmed.substr(0, eq))] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  void apply_override(const std::string& kv) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw InputError("override is not key=value: " + kv);
    values_[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw InputError("bad numeric value for " + key + ": " + it->second);
    }
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    if (v < 0.0 || v != std::floor(v)) throw InputError("expected a non-negative integer for " + key);
    return static_cast<std::size_t>(v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw InputError("bad integer value for " + key + ": " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw InputError("bad boolean value for " + key + ": " + it->second);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Experiment configuration.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  synth::TaskKind task = synth::TaskKind::classification;
  std::uint64_t seed = 1;
  synth::SyntheticSpec data;  // used when dataset_dir is empty
  std::string dataset_dir;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 2;
  std::size_t num_layers = 4;
  std::size_t det_tokens = 8;
  double mlp_ratio = 4.0;
  double init_sigma = 0.0;
  TrainConfig train;
};

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "task", "seed", "out",
      "data.dir", "data.image", "data.patch", "data.channels", "data.base_classes",
      "data.novel_classes", "data.region_patches", "data.noise_sigma", "data.samples_per_class",
      "data.color_jitter", "data.modes_per_class", "data.min_instances", "data.max_instances",
      "data.novel_scale",
      "model.embed_dim", "model.heads", "model.layers", "model.det_tokens", "model.mlp_ratio",
      "model.init_sigma",
      "train.stage1_epochs", "train.batch_size", "train.base_lr", "train.weight_decay",
      "train.warmup_epochs", "train.initial_ft_epochs", "train.joint_epochs", "train.finetune_lr",
      "train.label_smoothing", "train.topk", "train.mask_kind", "train.k_shot",
      "train.neighborhood_size", "train.use_mask", "train.use_neighborhood",
      "train.use_active_selection", "train.flow", "train.ft_scope", "train.det_class_weight",
      "train.det_box_weight", "train.det_noobj_weight"};
  return keys;
}

inline ExperimentConfig experiment_from_kv(const KvConfig& kv) {
  for (const auto& [key, value] : kv.values()) {
    if (!known_config_keys().count(key)) throw InputError("unknown config key: " + key);
  }
  ExperimentConfig cfg;
  cfg.task = synth::task_kind_from_string(kv.get_str("task", "classification"));
  cfg.seed = kv.get_u64("seed", 1);

  cfg.dataset_dir = kv.get_str("data.dir", "");
  synth::SyntheticSpec& d = cfg.data;
  d.image_h = d.image_w = kv.get_size("data.image", 32);
  d.patch = kv.get_size("data.patch", 4);
  d.channels = kv.get_size("data.channels", 3);
  d.num_base_classes = kv.get_size("data.base_classes", 4);
  d.num_novel_classes = kv.get_size("data.novel_classes", 4);
  d.region_patches_h = d.region_patches_w = kv.get_size("data.region_patches", 2);
  d.noise_sigma = kv.get_double("data.noise_sigma", 0.1);
  d.samples_per_class = kv.get_size("data.samples_per_class", 48);
  d.color_jitter = kv.get_double("data.color_jitter", 0.1);
  d.modes_per_class = kv.get_size("data.modes_per_class", 1);
  d.min_instances = kv.get_size("data.min_instances", 1);
  d.max_instances = kv.get_size("data.max_instances", 3);
  d.novel_scale = kv.get_double("data.novel_scale", 1.5);
  d.seed = mix_seed(cfg.seed, tag_hash("data"));

  cfg.embed_dim = kv.get_size("model.embed_dim", 32);
  cfg.num_heads = kv.get_size("model.heads", 2);
  cfg.num_layers = kv.get_size("model.layers", 4);
  cfg.det_tokens = kv.get_size("model.det_tokens", 8);
  cfg.mlp_ratio = kv.get_double("model.mlp_ratio", 4.0);
  cfg.init_sigma = kv.get_double("model.init_sigma", 0.0);

  TrainConfig& t = cfg.train;
  t.stage1_epochs = kv.get_size("train.stage1_epochs", 24);
  t.batch_size = kv.get_size("train.batch_size", 16);
  t.base_lr = kv.get_double("train.base_lr", 1e-3);
  t.weight_decay = kv.get_double("train.weight_decay", 1e-4);
  t.warmup_epochs = kv.get_size("train.warmup_epochs", 2);
  t.initial_finetune_epochs = kv.get_size("train.initial_ft_epochs", 3);
  t.joint_epochs = kv.get_size("train.joint_epochs", 10);
  t.finetune_lr = kv.get_double("train.finetune_lr", 0.0);
  t.label_smoothing = kv.get_double("train.label_smoothing", 0.1);
  t.topk = kv.get_size("train.topk", 16);
  t.mask_kind = mask::mask_kind_from_string(kv.get_str("train.mask_kind", "discrete"));
  t.k_shot = kv.get_size("train.k_shot", 5);
  t.neighborhood_size = kv.get_size("train.neighborhood_size", 0);
  t.use_mask = kv.get_bool("train.use_mask", true);
  t.use_neighborhood = kv.get_bool("train.use_neighborhood", true);
  t.use_active_selection = kv.get_bool("train.use_active_selection", true);
  t.flow = flow_from_string(kv.get_str("train.flow", "mgvit"));
  t.ft_scope = scope_from_string(kv.get_str("train.ft_scope", "full"));
  t.seed = cfg.seed;
  t.det_loss.class_weight = kv.get_double("train.det_class_weight", 1.0);
  t.det_loss.box_l1_weight = kv.get_double("train.det_box_weight", 5.0);
  t.det_loss.no_object_weight = kv.get_double("train.det_noobj_weight", 0.1);
  t.validate();
  return cfg;
}

inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  return nlohmann::json{
      {"task", synth::to_string(cfg.task)},
      {"seed", cfg.seed},
      {"dataset_dir", cfg.dataset_dir},
      {"data", synth::spec_to_json(cfg.data)},
      {"model",
       {{"embed_dim", cfg.embed_dim},
        {"heads", cfg.num_heads},
        {"layers", cfg.num_layers},
        {"det_tokens", cfg.det_tokens},
        {"mlp_ratio", cfg.mlp_ratio},
        {"init_sigma", cfg.init_sigma}}},
      {"train",
       {{"stage1_epochs", t.stage1_epochs},
        {"batch_size", t.batch_size},
        {"base_lr", t.base_lr},
        {"weight_decay", t.weight_decay},
        {"warmup_epochs", t.warmup_epochs},
        {"initial_ft_epochs", t.initial_finetune_epochs},
        {"joint_epochs", t.joint_epochs},
        {"finetune_lr", t.effective_finetune_lr()},
        {"label_smoothing", t.label_smoothing},
        {"topk", t.topk},
        {"mask_kind", mask::to_string(t.mask_kind)},
        {"k_shot", t.k_shot},
        {"neighborhood_size", t.neighborhood_size},
        {"use_mask", t.use_mask},
        {"use_neighborhood", t.use_neighborhood},
        {"use_active_selection", t.use_active_selection},
        {"flow", to_string(t.flow)},
        {"ft_scope", to_string(t.ft_scope)},
        {"det_class_weight", t.det_loss.class_weight},
        {"det_box_weight", t.det_loss.box_l1_weight},
        {"det_noobj_weight", t.det_loss.no_object_weight}}}};
}

// ---------------------------------------------------------------------------
// Episode plumbing.
// ---------------------------------------------------------------------------

struct DataSplits {
  std::vector<int> base_train, base_val, base_test, novel_pool;
};

inline DataSplits make_splits(const synth::Dataset& ds, std::uint64_t seed) {
  DataSplits sp;
  const std::vector<int> base = ds.base_ids();
  if (ds.kind == synth::TaskKind::detection) {
    auto parts = synth::split_indices(base, {0.64, 0.16, 0.20}, mix_seed(seed, tag_hash("base-split")));
    sp.base_train = parts[0];
    sp.base_val = parts[1];
    sp.base_test = parts[2];
  } else {
    auto parts = synth::split_indices(base, {0.75, 0.25}, mix_seed(seed, tag_hash("base-split")));
    sp.base_train = parts[0];
    sp.base_test = parts[1];
  }
  sp.novel_pool = ds.novel_ids();
  return sp;
}

inline synth::Dataset obtain_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset_dir.empty()) return synth::load_dataset(cfg.dataset_dir);
  return cfg.task == synth::TaskKind::detection ? synth::generate_detection(cfg.data)
                                                : synth::generate_classification(cfg.data);
}

inline vit::ModelConfig model_config_of(const ExperimentConfig& cfg, const synth::Dataset& ds) {
  return model_config_for(ds, cfg.embed_dim, cfg.num_heads, cfg.num_layers, cfg.det_tokens,
                          cfg.mlp_ratio, cfg.init_sigma);
}

// Selects the episode: shots per novel class (active or random), the held-out
// novel test split, and bookkeeping for the task file.
inline select::FewShotTask build_task(const ExperimentConfig& cfg, const synth::Dataset& ds,
                                      const ModelState& stage1) {
  select::FewShotTask task;
  task.n_way = ds.novel_classes.size();
  task.k_shot = cfg.train.k_shot;
  task.seed = cfg.seed;
  if (cfg.train.use_active_selection) {
    std::map<int, std::vector<std::pair<int, const Tensor*>>> by_class;
    for (int cls : ds.novel_classes) {
      for (int id : ds.ids_of_class(cls)) by_class[cls].push_back({id, &ds.by_id(id).image});
    }
    task.shot_ids = select::select_shots(stage1.params, stage1.config, by_class, cfg.train.k_shot,
                                         mix_seed(cfg.seed, tag_hash("select")));
  } else {
    std::map<int, std::vector<int>> ids_by_class;
    for (int cls : ds.novel_classes) ids_by_class[cls] = ds.ids_of_class(cls);
    task.shot_ids =
        select::random_shots(ids_by_class, cfg.train.k_shot, mix_seed(cfg.seed, tag_hash("select")));
  }
  std::set<int> chosen;
  for (const auto& [cls, ids] : task.shot_ids) chosen.insert(ids.begin(), ids.end());
  for (int id : ds.novel_ids()) {
    if (!chosen.count(id)) task.test_ids.push_back(id);
  }
  return task;
}

inline nlohmann::json task_to_json(const select::FewShotTask& task) {
  nlohmann::json shots = nlohmann::json::object();
  for (const auto& [cls, ids] : task.shot_ids) shots[std::to_string(cls)] = ids;
  return nlohmann::json{{"n_way", task.n_way},
                        {"k_shot", task.k_shot},
                        {"seed", task.seed},
                        {"shots", shots},
                        {"neighborhood", task.neighborhood_ids},
                        {"test", task.test_ids}};
}

inline select::FewShotTask task_from_json(const nlohmann::json& j) {
  select::FewShotTask task;
  task.n_way = j.at("n_way");
  task.k_shot = j.at("k_shot");
  task.seed = j.at("seed");
  for (const auto& [key, ids] : j.at("shots").items()) {
    task.shot_ids[std::stoi(key)] = ids.get<std::vector<int>>();
  }
  task.neighborhood_ids = j.at("neighborhood").get<std::vector<int>>();
  task.test_ids = j.at("test").get<std::vector<int>>();
  return task;
}

inline void save_task(const std::string& path, const select::FewShotTask& task) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write task file: " + path);
  os << task_to_json(task).dump(2) << "\n";
}

inline select::FewShotTask load_task(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read task file: " + path);
  return task_from_json(nlohmann::json::parse(is));
}

// ---------------------------------------------------------------------------
// Full pipeline.
// ---------------------------------------------------------------------------

struct Stage1Result {
  ModelState state;
  std::vector<double> trace;
};

inline Stage1Result run_stage1(const ExperimentConfig& cfg, const synth::Dataset& ds) {
  const DataSplits sp = make_splits(ds, cfg.seed);
  Stage1Result out;
  out.state = make_model(model_config_of(cfg, ds), cfg.train);
  out.trace = train_stage1(out.state, ds, sp.base_train, cfg.train);
  return out;
}

struct ExperimentResult {
  nlohmann::json report;
  double metric = 0.0;
  ModelState state;
  select::FewShotTask task;
};

// Stage 2 from a finished stage 1 (pass a cached one to share it across
// ablation rows with the same seed).
inline ExperimentResult run_stage2(const ExperimentConfig& cfg, const synth::Dataset& ds,
                                   const Stage1Result& stage1,
                                   const PhaseObserver& observe = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const DataSplits sp = make_splits(ds, cfg.seed);
  ExperimentResult out;
  out.state = stage1.state.clone();
  out.task = build_task(cfg, ds, out.state);

  const std::vector<int> shots = out.task.all_shot_ids();
  const TrainConfig& tc = cfg.train;
  const std::size_t union_n =
      shots.size() + (tc.use_neighborhood ? tc.effective_neighborhood(shots.size()) : 0);
  const Stage2Schedule sch = stage2_schedule(tc, sp.base_train.size(), union_n);

  std::vector<double> initial_trace, joint_trace;
  std::vector<std::vector<int>> neighborhoods;
  std::size_t global_step = 0;
  out.state.opt = AdamW({sch.lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  if (tc.flow == Flow::mgvit) {
    initial_trace = initial_finetune(out.state, ds, sp.base_train, tc, tc.initial_finetune_epochs,
                                     sch, &global_step);
  }
  out.state.stage = "joint_ft";
  out.state.epoch = 0;
  for (std::size_t e = 0; e < tc.joint_epochs; ++e) {
    const JointEpochResult jr =
        joint_finetune_epoch(out.state, ds, out.task, sp.base_train, tc, sch, &global_step, observe);
    joint_trace.push_back(jr.loss);
    neighborhoods.push_back(jr.neighborhood_ids);
  }
  if (!neighborhoods.empty()) out.task.neighborhood_ids = neighborhoods.back();

  if (ds.kind == synth::TaskKind::detection) {
    out.metric = evaluate_detection(out.state.params, out.state.config, ds, out.task.test_ids);
  } else {
    out.metric = evaluate_classification(out.state.params, out.state.config, ds, out.task.test_ids);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json shots_json = nlohmann::json::object();
  for (const auto& [cls, ids] : out.task.shot_ids) shots_json[std::to_string(cls)] = ids;
  out.report = nlohmann::json{
      {"config", config_echo(cfg)},
      {"seed", cfg.seed},
      {"task", synth::to_string(cfg.task)},
      {"stage1", {{"loss_trace", stage1.trace}}},
      {"initial_finetune", {{"loss_trace", initial_trace}}},
      {"joint", {{"loss_trace", joint_trace}, {"neighborhood_per_epoch", neighborhoods}}},
      {"shots", shots_json},
      {"test_ids", out.task.test_ids},
      {"metrics",
       {{ds.kind == synth::TaskKind::detection ? "novel_test_ap" : "novel_test_accuracy",
         out.metric}}},
      {"wallclock", {{"stage2_seconds", seconds}}}};
  return out;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const synth::Dataset& ds,
                                       const PhaseObserver& observe = {}) {
  const Stage1Result s1 = run_stage1(cfg, ds);
  return run_stage2(cfg, ds, s1, observe);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const synth::Dataset ds = obtain_dataset(cfg);
  return run_experiment(cfg, ds);
}

// The four-row switch grid of the classification ablation: rows toggle active
// learning, neighborhood mining, and masking.
inline std::vector<std::pair<std::string, ExperimentConfig>> ablation_grid(
    const ExperimentConfig& base) {
  auto with = [&](bool al, bool nb, bool m) {
    ExperimentConfig cfg = base;
    cfg.train.use_active_selection = al;
    cfg.train.use_neighborhood = nb;
    cfg.train.use_mask = m;
    return cfg;
  };
  return {
      {"nb_mask", with(false, true, true)},
      {"al_only", with(true, false, false)},
      {"al_nb", with(true, true, false)},
      {"full", with(true, true, true)},
  };
}

}  // namespace mgvit::train
