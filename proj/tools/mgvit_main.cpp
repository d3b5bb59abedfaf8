// mgvit: command-line front end for the mask-guided ViT few-shot pipeline.
//
// Subcommands: gen-data, pretrain, select-shots, finetune, evaluate, salience,
// ablate. Configuration comes from a key=value file plus repeatable --set
// overrides; every artifact embeds the resolved config and seed. Progress goes
// to stderr, machine-readable results to files under --output-dir only.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mgvit/experiment.hpp"
#include "mgvit/maskgen.hpp"

namespace fs = std::filesystem;
using namespace mgvit;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key=value config file");
  cmd->add_option("--set", args.overrides, "config override key=value (repeatable)");
  cmd->add_option("--output-dir", args.output_dir, "directory for all outputs");
  cmd->add_option("--seed", args.seed, "experiment seed (overrides the config)")
      ->each([&args](const std::string&) { args.seed_set = true; });
}

train::KvConfig resolve_kv(const CommonArgs& args) {
  train::KvConfig kv;
  if (!args.config_path.empty()) kv = train::KvConfig::parse_file(args.config_path);
  for (const std::string& kvs : args.overrides) kv.apply_override(kvs);
  if (args.seed_set) kv.apply_override("seed=" + std::to_string(args.seed));
  return kv;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

synth::Dataset dataset_for(const train::ExperimentConfig& cfg) {
  if (!cfg.dataset_dir.empty()) {
    std::cerr << "loading dataset from " << cfg.dataset_dir << "\n";
    return synth::load_dataset(cfg.dataset_dir);
  }
  std::cerr << "generating synthetic " << synth::to_string(cfg.task) << " dataset (seed "
            << cfg.data.seed << ")\n";
  return cfg.task == synth::TaskKind::detection ? synth::generate_detection(cfg.data)
                                                : synth::generate_classification(cfg.data);
}

int cmd_gen_data(const CommonArgs& args) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = cfg.task == synth::TaskKind::detection
                                ? synth::generate_detection(cfg.data)
                                : synth::generate_classification(cfg.data);
  const fs::path dir = fs::path(args.output_dir) / "dataset";
  synth::save_dataset(ds, dir.string());
  write_json(fs::path(args.output_dir) / "gen-data.json",
             {{"config", train::config_echo(cfg)},
              {"seed", cfg.seed},
              {"samples", ds.samples.size()},
              {"dataset_dir", dir.string()}});
  std::cerr << "wrote " << ds.samples.size() << " samples to " << dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  std::cerr << "stage 1: " << cfg.train.stage1_epochs << " epochs\n";
  const train::Stage1Result s1 = train::run_stage1(cfg, ds);
  fs::create_directories(args.output_dir);
  const fs::path ckpt = fs::path(args.output_dir) / "stage1.ckpt";
  train::save_train_checkpoint(ckpt.string(), s1.state);
  write_json(fs::path(args.output_dir) / "pretrain.json",
             {{"config", train::config_echo(cfg)},
              {"seed", cfg.seed},
              {"loss_trace", s1.trace},
              {"checkpoint", ckpt.string()}});
  std::cerr << "final stage-1 loss " << s1.trace.back() << ", checkpoint at " << ckpt << "\n";
  return 0;
}

int cmd_select_shots(const CommonArgs& args, const std::string& checkpoint) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  train::ModelState state = train::load_train_checkpoint(checkpoint);
  const select::FewShotTask task = train::build_task(cfg, ds, state);
  fs::create_directories(args.output_dir);
  const fs::path path = fs::path(args.output_dir) / "task.json";
  nlohmann::json j = train::task_to_json(task);
  j["config"] = train::config_echo(cfg);
  write_json(path, j);
  std::cerr << "task file at " << path << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& checkpoint) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  train::Stage1Result s1;
  if (checkpoint.empty()) {
    std::cerr << "no stage-1 checkpoint given; running stage 1 first\n";
    s1 = train::run_stage1(cfg, ds);
  } else {
    s1.state = train::load_train_checkpoint(checkpoint);
  }
  const train::ExperimentResult res = train::run_stage2(cfg, ds, s1);
  fs::create_directories(args.output_dir);
  write_json(fs::path(args.output_dir) / "report.json", res.report);
  train::save_train_checkpoint((fs::path(args.output_dir) / "final.ckpt").string(), res.state);
  write_json(fs::path(args.output_dir) / "task.json", train::task_to_json(res.task));
  std::cerr << "final metric " << res.metric << "; report under " << args.output_dir << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& checkpoint,
                 const std::string& task_path) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  train::ModelState state = train::load_train_checkpoint(checkpoint);
  std::vector<int> test_ids;
  if (!task_path.empty()) {
    test_ids = train::load_task(task_path).test_ids;
  } else {
    test_ids = ds.novel_ids();
  }
  double metric = 0.0;
  const char* key = "novel_test_accuracy";
  if (ds.kind == synth::TaskKind::detection) {
    metric = train::evaluate_detection(state.params, state.config, ds, test_ids);
    key = "novel_test_ap";
  } else {
    metric = train::evaluate_classification(state.params, state.config, ds, test_ids);
  }
  write_json(fs::path(args.output_dir) / "eval.json",
             {{"config", train::config_echo(cfg)},
              {"seed", cfg.seed},
              {"checkpoint", checkpoint},
              {"test_size", test_ids.size()},
              {"metrics", {{key, metric}}}});
  std::cerr << key << " = " << metric << "\n";
  return 0;
}

int cmd_salience(const CommonArgs& args, const std::string& checkpoint, int sample_id) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  train::ModelState state = train::load_train_checkpoint(checkpoint);
  const auto& rec = ds.by_id(sample_id);

  maskgen::SalienceMap sal;
  if (ds.kind == synth::TaskKind::detection) {
    sal = maskgen::compute_salience(state.params, state.config, rec.image,
                                    [&](const vit::TokenSequence& z) {
                                      const vit::DetectOutput out =
                                          vit::detect_head(z, state.params, state.config);
                                      return det::detection_loss(out.class_logits, out.boxes,
                                                                 train::ground_truth_of(rec, ds),
                                                                 cfg.train.det_loss);
                                    });
  } else {
    sal = maskgen::compute_salience_classification(state.params, state.config, rec.image,
                                                   train::joint_label_index(ds, rec.label),
                                                   cfg.train.label_smoothing);
  }
  sal.sample_id = sample_id;
  const std::size_t k = std::min(cfg.train.topk, state.config.num_patches());
  const mask::MaskSpec m = maskgen::make_mask(sal, k, cfg.train.mask_kind, state.config.grid_h(),
                                              state.config.grid_w());
  fs::create_directories(args.output_dir);
  const fs::path base = fs::path(args.output_dir) / std::to_string(sample_id);
  maskgen::write_salience_pgm(base.string() + ".salience.pgm", sal, state.config.grid_h(),
                              state.config.grid_w());
  maskgen::write_mask_csv(base.string() + ".mask.csv", m, state.config.grid_h(),
                          state.config.grid_w());
  write_json(fs::path(args.output_dir) / (std::to_string(sample_id) + ".salience.json"),
             {{"config", train::config_echo(cfg)},
              {"seed", cfg.seed},
              {"sample", sample_id},
              {"label", rec.label},
              {"topk", k},
              {"mask_kind", mask::to_string(cfg.train.mask_kind)}});
  std::cerr << "wrote " << base << ".salience.pgm and " << base << ".mask.csv\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  const train::ExperimentConfig cfg = train::experiment_from_kv(resolve_kv(args));
  const synth::Dataset ds = dataset_for(cfg);
  std::cerr << "ablation grid: shared stage 1 (seed " << cfg.seed << ")\n";
  const train::Stage1Result s1 = train::run_stage1(cfg, ds);
  fs::create_directories(args.output_dir);
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [row, row_cfg] : train::ablation_grid(cfg)) {
    std::cerr << "row " << row << "\n";
    const train::ExperimentResult res = train::run_stage2(row_cfg, ds, s1);
    write_json(fs::path(args.output_dir) / ("report_" + row + ".json"), res.report);
    summary[row] = res.metric;
  }
  write_json(fs::path(args.output_dir) / "ablate_summary.json",
             {{"config", train::config_echo(cfg)}, {"seed", cfg.seed}, {"metrics", summary}});
  std::cerr << "ablation summary under " << args.output_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mask-guided ViT few-shot learning pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args, pre_args, sel_args, ft_args, eval_args, sal_args, abl_args;
  std::string sel_ckpt, ft_ckpt, eval_ckpt, eval_task, sal_ckpt;
  int sal_sample = 0;

  add_common(app.add_subcommand("gen-data", "generate and save a synthetic dataset"), gen_args);
  add_common(app.add_subcommand("pretrain", "stage-1 training on the base split"), pre_args);
  CLI::App* sel = app.add_subcommand("select-shots", "active few-shot selection, writes task.json");
  add_common(sel, sel_args);
  sel->add_option("--checkpoint", sel_ckpt, "stage-1 checkpoint")->required();
  CLI::App* ft = app.add_subcommand("finetune", "stage-2 fine-tuning and evaluation");
  add_common(ft, ft_args);
  ft->add_option("--checkpoint", ft_ckpt, "stage-1 checkpoint (otherwise stage 1 runs first)");
  CLI::App* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the novel test split");
  add_common(ev, eval_args);
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  ev->add_option("--task", eval_task, "task.json restricting the test split");
  CLI::App* sa = app.add_subcommand("salience", "export salience map and mask for one sample");
  add_common(sa, sal_args);
  sa->add_option("--checkpoint", sal_ckpt, "model checkpoint")->required();
  sa->add_option("--sample", sal_sample, "sample id")->required();
  add_common(app.add_subcommand("ablate", "run the switch-grid ablation matrix"), abl_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 1;
  }

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_args);
    if (app.got_subcommand("pretrain")) return cmd_pretrain(pre_args);
    if (app.got_subcommand("select-shots")) return cmd_select_shots(sel_args, sel_ckpt);
    if (app.got_subcommand("finetune")) return cmd_finetune(ft_args, ft_ckpt);
    if (app.got_subcommand("evaluate")) return cmd_evaluate(eval_args, eval_ckpt, eval_task);
    if (app.got_subcommand("salience")) return cmd_salience(sal_args, sal_ckpt, sal_sample);
    if (app.got_subcommand("ablate")) return cmd_ablate(abl_args);
  } catch (const InternalError& e) {
    std::cerr << "mgvit: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "mgvit: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "mgvit: unexpected error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
