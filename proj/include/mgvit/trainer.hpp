// Two-stage training: stage 1 trains the vanilla ViT on the base set; stage 2
// adapts the model to the mask-guided flow on the base set (initial
// fine-tuning), then jointly fine-tunes on the selected novel shots plus a
// per-epoch re-mined, per-sample-masked base neighborhood. Also: evaluation,
// experiment orchestration, reports, and training checkpoints.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/detection.hpp"
#include "mgvit/maskgen.hpp"
#include "mgvit/optim.hpp"
#include "mgvit/selection.hpp"
#include "mgvit/synthdata.hpp"
#include "mgvit/tensor.hpp"
#include "mgvit/vit.hpp"

namespace mgvit::train {

enum class Flow { vanilla, mgvit };
enum class FtScope { full, part };

inline const char* to_string(Flow f) { return f == Flow::vanilla ? "vanilla" : "mgvit"; }
inline const char* to_string(FtScope s) { return s == FtScope::full ? "full" : "part"; }

inline Flow flow_from_string(const std::string& s) {
  if (s == "vanilla") return Flow::vanilla;
  if (s == "mgvit") return Flow::mgvit;
  throw InputError("unknown flow: " + s);
}

inline FtScope scope_from_string(const std::string& s) {
  if (s == "full") return FtScope::full;
  if (s == "part") return FtScope::part;
  throw InputError("unknown fine-tune scope: " + s);
}

struct TrainConfig {
  // stage 1
  std::size_t stage1_epochs = 24;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t warmup_epochs = 2;
  // stage 2
  std::size_t initial_finetune_epochs = 3;
  std::size_t joint_epochs = 10;
  double finetune_lr = 0.0;  // 0 selects 10x base_lr, the paper's ratio
  double label_smoothing = 0.1;
  std::size_t topk = 16;
  mask::MaskKind mask_kind = mask::MaskKind::discrete;
  std::size_t k_shot = 5;
  std::size_t neighborhood_size = 0;  // 0 selects 4x the total shot count
  // ablation switches
  bool use_mask = true;
  bool use_neighborhood = true;
  bool use_active_selection = true;
  Flow flow = Flow::mgvit;
  FtScope ft_scope = FtScope::full;

  std::uint64_t seed = 1;
  det::DetectionLossConfig det_loss{};

  double effective_finetune_lr() const { return finetune_lr > 0.0 ? finetune_lr : 10.0 * base_lr; }

  std::size_t effective_neighborhood(std::size_t total_shots) const {
    return neighborhood_size > 0 ? neighborhood_size : 4 * total_shots;
  }

  void validate() const {
    if (stage1_epochs == 0 || batch_size == 0 || k_shot == 0) {
      throw InputError("epochs, batch size and k_shot must be positive");
    }
    if (base_lr <= 0.0 || effective_finetune_lr() <= 0.0) throw InputError("learning rates must be > 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw InputError("smoothing must be in [0,1)");
    if (weight_decay < 0.0) throw InputError("weight decay must be >= 0");
    det_loss.validate();
  }
};

// Model + optimizer + RNG; checkpointing this state and resuming reproduces
// the remaining training bit-exactly.
struct ModelState {
  vit::ModelConfig config;
  vit::ParameterStore params;
  AdamW opt;
  Rng rng;
  std::size_t epoch = 0;
  std::string stage = "init";

  ModelState clone() const {
    ModelState out;
    out.config = config;
    out.params = params.clone();
    out.opt = opt;
    out.rng = rng;
    out.epoch = epoch;
    out.stage = stage;
    return out;
  }
};

inline ModelState make_model(const vit::ModelConfig& cfg, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  ModelState st;
  st.config = cfg;
  Rng init_rng(mix_seed(tc.seed, tag_hash("init")));
  st.params = vit::init_params(cfg, init_rng);
  st.opt = AdamW({tc.base_lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  st.rng = Rng(mix_seed(tc.seed, tag_hash("train")));
  return st;
}

// ---------------------------------------------------------------------------
// Label spaces. Model logits are ordered base classes first (dataset order),
// then novel classes.
// ---------------------------------------------------------------------------

inline int joint_label_index(const synth::Dataset& ds, int label) {
  const auto bi = std::find(ds.base_classes.begin(), ds.base_classes.end(), label);
  if (bi != ds.base_classes.end()) return static_cast<int>(bi - ds.base_classes.begin());
  const auto ni = std::find(ds.novel_classes.begin(), ds.novel_classes.end(), label);
  if (ni != ds.novel_classes.end()) {
    return static_cast<int>(ds.base_classes.size() + (ni - ds.novel_classes.begin()));
  }
  throw InputError("label " + std::to_string(label) + " not in dataset label space");
}

inline int base_label_index(const synth::Dataset& ds, int label) {
  const auto bi = std::find(ds.base_classes.begin(), ds.base_classes.end(), label);
  if (bi == ds.base_classes.end()) throw InputError("label is not a base class");
  return static_cast<int>(bi - ds.base_classes.begin());
}

inline vit::ModelConfig model_config_for(const synth::Dataset& ds, std::size_t embed_dim,
                                         std::size_t heads, std::size_t layers,
                                         std::size_t det_tokens, double mlp_ratio = 4.0,
                                         double init_sigma = 0.0) {
  vit::ModelConfig cfg;
  cfg.image_h = ds.height;
  cfg.image_w = ds.width;
  cfg.patch = ds.patch;
  cfg.channels = ds.channels;
  cfg.embed_dim = embed_dim;
  cfg.num_heads = heads;
  cfg.num_layers = layers;
  cfg.num_classes = ds.base_classes.size() + ds.novel_classes.size();
  cfg.num_base_classes = ds.base_classes.size();
  cfg.num_det_tokens = ds.kind == synth::TaskKind::detection ? det_tokens : 0;
  cfg.mlp_ratio = mlp_ratio;
  cfg.init_sigma = init_sigma;
  cfg.validate();
  return cfg;
}

// Base-head logits only; the novel head stays out of the graph entirely, so
// its parameters receive no gradient (and no optimizer update) in stage 1.
inline Tensor classify_head_base(const vit::TokenSequence& z, const vit::ParameterStore& params) {
  const Tensor x = slice_rows(z.tokens, z.layout.cls_index(), z.layout.cls_index() + 1);
  return vit::linear(x, params.at("head.cls.w"), params.at("head.cls.b"));
}

// ---------------------------------------------------------------------------
// Per-sample losses.
// ---------------------------------------------------------------------------

enum class LossScope { base_subset, joint };

struct SampleFlow {
  Flow flow = Flow::vanilla;
  const mask::MaskSpec* mask = nullptr;  // mgvit flow only; nullptr = all-ones
  bool inject_residual = true;
};

inline vit::TokenSequence forward_for(const vit::ParameterStore& params,
                                      const vit::ModelConfig& cfg, const Tensor& image,
                                      const SampleFlow& sf) {
  if (sf.flow == Flow::vanilla) return vit::forward_vanilla(image, params, cfg);
  static thread_local std::map<std::size_t, mask::MaskSpec> ones_cache;
  const mask::MaskSpec* m = sf.mask;
  if (m == nullptr) {
    auto [it, inserted] = ones_cache.try_emplace(cfg.num_patches());
    if (inserted) it->second = mask::MaskSpec::all_ones(cfg.num_patches());
    m = &it->second;
  }
  return vit::forward_masked(image, *m, params, cfg, {sf.inject_residual});
}

inline det::GroundTruth ground_truth_of(const synth::SampleRecord& s, const synth::Dataset& ds) {
  det::GroundTruth gt;
  gt.boxes = s.boxes;
  for (int label : s.box_labels) gt.labels.push_back(joint_label_index(ds, label));
  return gt;
}

inline Tensor sample_loss(const vit::ParameterStore& params, const vit::ModelConfig& cfg,
                          const synth::Dataset& ds, const synth::SampleRecord& s,
                          const SampleFlow& sf, const TrainConfig& tc, LossScope scope) {
  const vit::TokenSequence z = forward_for(params, cfg, s.image, sf);
  if (ds.kind == synth::TaskKind::detection) {
    const vit::DetectOutput out = vit::detect_head(z, params, cfg);
    return det::detection_loss(out.class_logits, out.boxes, ground_truth_of(s, ds), tc.det_loss);
  }
  if (scope == LossScope::base_subset) {
    return cross_entropy(classify_head_base(z, params), {base_label_index(ds, s.label)},
                         tc.label_smoothing);
  }
  return cross_entropy(vit::classify_head(z, params, cfg), {joint_label_index(ds, s.label)},
                       tc.label_smoothing);
}

// ---------------------------------------------------------------------------
// Epoch runner.
// ---------------------------------------------------------------------------

struct TrainItem {
  int sample_id = -1;
  SampleFlow flow;
};

inline std::vector<std::pair<std::string, Tensor>> trainable_params(
    const vit::ParameterStore& params, FtScope scope) {
  std::vector<std::pair<std::string, Tensor>> items = params.items();
  if (scope == FtScope::part) {
    std::erase_if(items, [](const auto& kv) { return kv.first.rfind("head.", 0) != 0; });
  }
  return items;
}

// One pass over `items`: shuffle, batch, mean loss per batch, backward,
// AdamW step at the scheduled rate. Returns the mean per-sample loss.
inline double run_epoch(ModelState& st, const synth::Dataset& ds, std::vector<TrainItem> items,
                        const TrainConfig& tc, LossScope scope,
                        const std::function<double(std::size_t)>& lr_at_step,
                        std::size_t* global_step) {
  st.rng.shuffle(items);
  const auto trainables = trainable_params(st.params, tc.ft_scope);
  double epoch_loss = 0.0;
  std::size_t seen = 0;
  for (std::size_t begin = 0; begin < items.size(); begin += tc.batch_size) {
    const std::size_t end = std::min(items.size(), begin + tc.batch_size);
    Tape tape;
    Tensor batch_loss;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& rec = ds.by_id(items[i].sample_id);
      const Tensor li = sample_loss(st.params, st.config, ds, rec, items[i].flow, tc, scope);
      batch_loss = batch_loss.defined() ? add(batch_loss, li) : li;
    }
    batch_loss = scale(batch_loss, 1.0 / static_cast<double>(end - begin));
    const double loss_value = batch_loss.item();
    if (!std::isfinite(loss_value)) {
      throw InternalError("non-finite loss in " + st.stage + " epoch " + std::to_string(st.epoch) +
                          " batch at item " + std::to_string(begin));
    }
    tape.backward(batch_loss);
    st.opt.step(trainables, lr_at_step(*global_step));
    ++*global_step;
    st.params.zero_grads();
    epoch_loss += loss_value * static_cast<double>(end - begin);
    seen += end - begin;
  }
  return seen > 0 ? epoch_loss / static_cast<double>(seen) : 0.0;
}

// ---------------------------------------------------------------------------
// Stage 1: vanilla supervised training on the base split.
// ---------------------------------------------------------------------------

// Runs stage-1 epochs up to target_epoch (default: the configured count). The
// learning-rate schedule always spans the full configured run, so a training
// run interrupted at a checkpoint and resumed finishes bit-identically.
inline std::vector<double> train_stage1(ModelState& st, const synth::Dataset& ds,
                                        const std::vector<int>& base_train_ids,
                                        const TrainConfig& tc, std::size_t target_epoch = 0) {
  if (base_train_ids.empty()) throw InputError("stage 1 needs a nonempty base dataset");
  tc.validate();
  if (target_epoch == 0 || target_epoch > tc.stage1_epochs) target_epoch = tc.stage1_epochs;
  st.stage = "stage1";
  const std::size_t steps_per_epoch =
      (base_train_ids.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = tc.stage1_epochs * steps_per_epoch;
  const std::size_t warmup = std::min(tc.warmup_epochs * steps_per_epoch, total - 1);
  std::vector<double> trace;
  std::size_t global_step = st.epoch * steps_per_epoch;
  const LossScope scope =
      ds.kind == synth::TaskKind::detection ? LossScope::joint : LossScope::base_subset;
  for (; st.epoch < target_epoch; ++st.epoch) {
    std::vector<TrainItem> items;
    items.reserve(base_train_ids.size());
    for (int id : base_train_ids) items.push_back({id, SampleFlow{Flow::vanilla, nullptr, true}});
    trace.push_back(run_epoch(st, ds, std::move(items), tc, scope,
                              [&](std::size_t s) { return cosine_lr(s, total, warmup, tc.base_lr); },
                              &global_step));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Stage 2.
// ---------------------------------------------------------------------------

struct Stage2Schedule {
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;
  double lr = 1e-3;

  double at(std::size_t step) const { return cosine_lr(step, total_steps, warmup_steps, lr); }
};

// Warmup spans the first stage-2 epoch (initial fine-tuning when the masked
// flow is active, otherwise the first joint epoch).
inline Stage2Schedule stage2_schedule(const TrainConfig& tc, std::size_t base_n,
                                      std::size_t union_n) {
  const auto steps = [&](std::size_t n) { return (n + tc.batch_size - 1) / tc.batch_size; };
  const bool has_initial = tc.flow == Flow::mgvit && tc.initial_finetune_epochs > 0;
  Stage2Schedule sch;
  sch.total_steps = (has_initial ? tc.initial_finetune_epochs * steps(base_n) : 0) +
                    tc.joint_epochs * steps(union_n);
  if (sch.total_steps == 0) sch.total_steps = 1;
  const std::size_t first_epoch = has_initial ? steps(base_n) : steps(union_n);
  sch.warmup_steps = std::min(std::max<std::size_t>(1, first_epoch), sch.total_steps - 1);
  sch.lr = tc.effective_finetune_lr();
  return sch;
}

// Adapts the model to the mask-guided computational flow: trains on the base
// set with the masked path active but the mask all-ones.
inline std::vector<double> initial_finetune(ModelState& st, const synth::Dataset& ds,
                                            const std::vector<int>& base_train_ids,
                                            const TrainConfig& tc, std::size_t epochs,
                                            const Stage2Schedule& sch, std::size_t* global_step,
                                            bool inject_residual = true) {
  st.stage = "initial_ft";
  st.epoch = 0;
  std::vector<double> trace;
  for (std::size_t e = 0; e < epochs; ++e, ++st.epoch) {
    std::vector<TrainItem> items;
    items.reserve(base_train_ids.size());
    for (int id : base_train_ids) {
      items.push_back({id, SampleFlow{Flow::mgvit, nullptr, inject_residual}});
    }
    trace.push_back(run_epoch(st, ds, std::move(items), tc, LossScope::joint,
                              [&](std::size_t s) { return sch.at(s); }, global_step));
  }
  return trace;
}

using PhaseObserver = std::function<void(std::string_view phase)>;

struct JointEpochResult {
  double loss = 0.0;
  std::vector<int> neighborhood_ids;
};

// One Algorithm-1 epoch: score base-sample similarity under the current model,
// keep the top-k neighborhood, regenerate per-sample masks from current
// salience, then train one epoch on shots (all-ones mask) plus the masked
// neighborhood.
inline JointEpochResult joint_finetune_epoch(ModelState& st, const synth::Dataset& ds,
                                             const select::FewShotTask& task,
                                             const std::vector<int>& base_train_ids,
                                             const TrainConfig& tc, const Stage2Schedule& sch,
                                             std::size_t* global_step,
                                             const PhaseObserver& observe = {}) {
  if (task.shot_ids.empty()) throw InputError("joint fine-tuning needs selected shots");
  st.stage = "joint_ft";
  const std::vector<int> shots = task.all_shot_ids();
  JointEpochResult result;

  std::vector<TrainItem> items;
  for (int id : shots) {
    items.push_back({id, SampleFlow{tc.flow, nullptr, true}});
  }

  std::vector<mask::MaskSpec> nb_masks;  // stable storage for item pointers
  if (tc.use_neighborhood && !base_train_ids.empty()) {
    if (observe) observe("similarity");
    std::vector<std::pair<int, double>> sims(base_train_ids.size());
    parallel_for(base_train_ids.size(), [&](std::size_t i) {
      NoGrad eval;
      const auto& rec = ds.by_id(base_train_ids[i]);
      const Tensor loss = sample_loss(st.params, st.config, ds, rec,
                                      SampleFlow{Flow::vanilla, nullptr, true}, tc, LossScope::joint);
      sims[i] = {base_train_ids[i], -loss.item()};
    });

    if (observe) observe("topk");
    const std::size_t nb_size =
        std::min(tc.effective_neighborhood(shots.size()), base_train_ids.size());
    result.neighborhood_ids = select::select_neighborhood(sims, nb_size);

    if (observe) observe("mask");
    nb_masks.reserve(result.neighborhood_ids.size());
    for (int id : result.neighborhood_ids) {
      const auto& rec = ds.by_id(id);
      if (tc.use_mask && tc.flow == Flow::mgvit) {
        maskgen::SalienceMap sal =
            maskgen::compute_salience(st.params, st.config, rec.image, [&](const vit::TokenSequence& z) {
              if (ds.kind == synth::TaskKind::detection) {
                const vit::DetectOutput out = vit::detect_head(z, st.params, st.config);
                return det::detection_loss(out.class_logits, out.boxes, ground_truth_of(rec, ds),
                                           tc.det_loss);
              }
              return cross_entropy(vit::classify_head(z, st.params, st.config),
                                   {joint_label_index(ds, rec.label)}, tc.label_smoothing);
            });
        sal.sample_id = id;
        nb_masks.push_back(maskgen::make_mask(sal, std::min(tc.topk, st.config.num_patches()),
                                              tc.mask_kind, st.config.grid_h(), st.config.grid_w()));
      } else {
        nb_masks.push_back(mask::MaskSpec::all_ones(st.config.num_patches()));
      }
    }
    for (std::size_t i = 0; i < result.neighborhood_ids.size(); ++i) {
      items.push_back({result.neighborhood_ids[i], SampleFlow{tc.flow, &nb_masks[i], true}});
    }
  }

  if (observe) observe("train");
  result.loss = run_epoch(st, ds, std::move(items), tc, LossScope::joint,
                          [&](std::size_t s) { return sch.at(s); }, global_step);
  ++st.epoch;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

// Top-1 accuracy over novel-class test samples, vanilla forward path, argmax
// restricted to the novel logit columns.
inline double evaluate_classification(const vit::ParameterStore& params,
                                      const vit::ModelConfig& cfg, const synth::Dataset& ds,
                                      const std::vector<int>& test_ids) {
  if (test_ids.empty()) throw InputError("empty test split");
  const std::size_t cb = cfg.num_base_classes, c = cfg.num_classes;
  if (cb == c) throw UsageError("model has no novel classes to evaluate");
  std::vector<int> correct(test_ids.size(), 0);
  parallel_for(test_ids.size(), [&](std::size_t i) {
    NoGrad eval;
    const auto& rec = ds.by_id(test_ids[i]);
    const vit::TokenSequence z = vit::forward_vanilla(rec.image, params, cfg);
    const Tensor logits = vit::classify_head(z, params, cfg);
    std::size_t best = cb;
    for (std::size_t j = cb; j < c; ++j) {
      if (logits(0, j) > logits(0, best)) best = j;
    }
    const int predicted = ds.novel_classes[best - cb];
    correct[i] = predicted == rec.label ? 1 : 0;
  });
  std::size_t right = 0;
  for (int v : correct) right += static_cast<std::size_t>(v);
  return static_cast<double>(right) / static_cast<double>(test_ids.size());
}

// AP at the given IoU over novel-class boxes; every detect token contributes a
// prediction scored by its novel-class probability.
inline double evaluate_detection(const vit::ParameterStore& params, const vit::ModelConfig& cfg,
                                 const synth::Dataset& ds, const std::vector<int>& test_ids,
                                 double iou_threshold = 0.5) {
  if (test_ids.empty()) throw InputError("empty test split");
  if (cfg.num_det_tokens == 0) throw UsageError("model has no detect tokens");
  if (ds.novel_classes.size() != 1) throw InputError("detection expects one novel class");
  const int novel_joint = joint_label_index(ds, ds.novel_classes[0]);
  std::vector<std::vector<det::ScoredDetection>> per_image(test_ids.size());
  std::vector<std::vector<det::Box>> gts(test_ids.size());
  parallel_for(test_ids.size(), [&](std::size_t i) {
    NoGrad eval;
    const auto& rec = ds.by_id(test_ids[i]);
    gts[i] = rec.boxes;
    const vit::TokenSequence z = vit::forward_vanilla(rec.image, params, cfg);
    const vit::DetectOutput out = vit::detect_head(z, params, cfg);
    const Tensor probs = softmax(out.class_logits, 1);
    for (std::size_t t = 0; t < cfg.num_det_tokens; ++t) {
      det::ScoredDetection d;
      d.image = i;
      d.score = probs(t, static_cast<std::size_t>(novel_joint));
      d.box = det::Box{out.boxes(t, 0), out.boxes(t, 1), out.boxes(t, 2), out.boxes(t, 3)};
      per_image[i].push_back(d);
    }
  });
  std::vector<det::ScoredDetection> all;
  for (const auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  return det::average_precision(std::move(all), gts, iou_threshold);
}

// ---------------------------------------------------------------------------
// Training checkpoints (model + optimizer + RNG + position in the schedule).
// ---------------------------------------------------------------------------

inline void save_train_checkpoint(const std::string& path, const ModelState& st) {
  vit::CheckpointData ckpt;
  ckpt.config = st.config;
  ckpt.params = st.params.clone();
  for (const auto& [name, slot] : st.opt.slots()) {
    ckpt.extra["opt.m." + name] = slot.m;
    ckpt.extra["opt.v." + name] = slot.v;
  }
  ckpt.extra["opt.step"] = {static_cast<double>(st.opt.step_count())};
  const AdamWConfig& oc = st.opt.config();
  ckpt.extra["opt.cfg"] = {oc.lr, oc.beta1, oc.beta2, oc.eps, oc.weight_decay};
  ckpt.blobs["rng"] = st.rng.save_state();
  ckpt.blobs["stage"] = st.stage;
  ckpt.blobs["epoch"] = std::to_string(st.epoch);
  vit::save_checkpoint(path, ckpt);
}

inline ModelState load_train_checkpoint(const std::string& path) {
  vit::CheckpointData ckpt = vit::load_checkpoint(path);
  ModelState st;
  st.config = ckpt.config;
  st.params = std::move(ckpt.params);
  AdamWConfig oc;
  if (auto it = ckpt.extra.find("opt.cfg"); it != ckpt.extra.end() && it->second.size() == 5) {
    oc = AdamWConfig{it->second[0], it->second[1], it->second[2], it->second[3], it->second[4]};
  }
  st.opt = AdamW(oc);
  std::map<std::string, AdamW::Slot> slots;
  for (const auto& [name, vals] : ckpt.extra) {
    if (name.rfind("opt.m.", 0) == 0) slots[name.substr(6)].m = vals;
    if (name.rfind("opt.v.", 0) == 0) slots[name.substr(6)].v = vals;
  }
  std::uint64_t step = 0;
  if (auto it = ckpt.extra.find("opt.step"); it != ckpt.extra.end() && !it->second.empty()) {
    step = static_cast<std::uint64_t>(it->second[0]);
  }
  st.opt.restore(std::move(slots), step);
  if (auto it = ckpt.blobs.find("rng"); it != ckpt.blobs.end()) st.rng.load_state(it->second);
  if (auto it = ckpt.blobs.find("stage"); it != ckpt.blobs.end()) st.stage = it->second;
  if (auto it = ckpt.blobs.find("epoch"); it != ckpt.blobs.end()) {
    st.epoch = static_cast<std::size_t>(std::stoull(it->second));
  }
  return st;
}

}  // namespace mgvit::train
