#include <catch2/catch_amalgamated.hpp>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef MGVIT_CLI_PATH
#error "MGVIT_CLI_PATH must be defined by the build"
#endif

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MGVIT_CLI_PATH) + " " + args + " >" + log.string() +
                          ".out 2>" + log.string() + ".err";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json load_json(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  return nlohmann::json::parse(is);
}

struct TempTree {
  fs::path root;
  TempTree() : root(fs::temp_directory_path() / "mgvit_cli_test") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
};

void write_tiny_config(const fs::path& path) {
  std::ofstream os(path);
  os << "task = classification\n"
        "seed = 5\n"
        "data.image = 16\n"
        "data.patch = 4\n"
        "data.samples_per_class = 12\n"
        "data.noise_sigma = 0.08\n"
        "model.embed_dim = 16\n"
        "model.heads = 2\n"
        "model.layers = 2\n"
        "train.stage1_epochs = 6\n"
        "train.batch_size = 16\n"
        "train.warmup_epochs = 1\n"
        "train.initial_ft_epochs = 1\n"
        "train.joint_epochs = 3\n"
        "train.finetune_lr = 0.003\n"
        "train.topk = 4\n"
        "train.k_shot = 2\n";
}

}  // namespace

TEST_CASE("unknown subcommands and bad flags exit with code 1") {
  TempTree t;
  REQUIRE(run_cli("frobnicate", t.root / "a") == 1);
  REQUIRE(run_cli("pretrain --no-such-flag", t.root / "b") == 1);
  const std::string err = slurp((t.root / "b").string() + ".err");
  REQUIRE(err.find("Usage") != std::string::npos);
}

TEST_CASE("missing config file is an input error, not a crash") {
  TempTree t;
  REQUIRE(run_cli("pretrain --config /nonexistent.cfg --output-dir " + (t.root / "o").string(),
                  t.root / "c") == 1);
}

TEST_CASE("full pipeline through the CLI", "[cli]") {
  TempTree t;
  const fs::path cfg = t.root / "toy.cfg";
  write_tiny_config(cfg);
  const std::string base = " --config " + cfg.string();

  // gen-data
  const fs::path gen_out = t.root / "gen";
  REQUIRE(run_cli("gen-data" + base + " --output-dir " + gen_out.string(), t.root / "g") == 0);
  REQUIRE(fs::exists(gen_out / "dataset" / "manifest.jsonl"));
  REQUIRE(fs::exists(gen_out / "gen-data.json"));
  const std::string data_dir = " --set data.dir=" + (gen_out / "dataset").string();

  // pretrain on the saved dataset
  const fs::path pre_out = t.root / "pre";
  REQUIRE(run_cli("pretrain" + base + data_dir + " --output-dir " + pre_out.string(),
                  t.root / "p") == 0);
  REQUIRE(fs::exists(pre_out / "stage1.ckpt"));
  const nlohmann::json pre = load_json(pre_out / "pretrain.json");
  REQUIRE(pre.contains("config"));
  REQUIRE(pre["seed"] == 5);

  // select-shots
  const fs::path sel_out = t.root / "sel";
  REQUIRE(run_cli("select-shots" + base + data_dir + " --checkpoint " +
                      (pre_out / "stage1.ckpt").string() + " --output-dir " + sel_out.string(),
                  t.root / "s") == 0);
  const nlohmann::json task = load_json(sel_out / "task.json");
  REQUIRE(task["k_shot"] == 2);
  REQUIRE(task["shots"].size() == 4);

  // salience export for sample 7
  const fs::path sal_out = t.root / "sal";
  REQUIRE(run_cli("salience" + base + data_dir + " --checkpoint " +
                      (pre_out / "stage1.ckpt").string() + " --sample 7 --output-dir " +
                      sal_out.string(),
                  t.root / "m") == 0);
  REQUIRE(fs::exists(sal_out / "7.salience.pgm"));
  REQUIRE(fs::exists(sal_out / "7.mask.csv"));

  // finetune from the checkpoint
  const fs::path ft_out = t.root / "ft";
  REQUIRE(run_cli("finetune" + base + data_dir + " --checkpoint " +
                      (pre_out / "stage1.ckpt").string() + " --output-dir " + ft_out.string(),
                  t.root / "f") == 0);
  REQUIRE(fs::exists(ft_out / "report.json"));
  REQUIRE(fs::exists(ft_out / "final.ckpt"));
  const nlohmann::json report = load_json(ft_out / "report.json");
  REQUIRE(report["metrics"].contains("novel_test_accuracy"));
  REQUIRE(report["config"]["train"]["use_mask"] == true);

  // evaluate the fine-tuned checkpoint on the task's test split
  const fs::path ev_out = t.root / "ev";
  REQUIRE(run_cli("evaluate" + base + data_dir + " --checkpoint " +
                      (ft_out / "final.ckpt").string() + " --task " +
                      (ft_out / "task.json").string() + " --output-dir " + ev_out.string(),
                  t.root / "e") == 0);
  const nlohmann::json eval = load_json(ev_out / "eval.json");
  REQUIRE(eval["metrics"]["novel_test_accuracy"] ==
          report["metrics"]["novel_test_accuracy"]);
}

TEST_CASE("finetune is deterministic apart from wall-clock fields", "[cli]") {
  TempTree t;
  const fs::path cfg = t.root / "toy.cfg";
  write_tiny_config(cfg);
  const std::string base = " --config " + cfg.string() + " --seed 1";
  REQUIRE(run_cli("finetune" + base + " --output-dir " + (t.root / "r1").string(),
                  t.root / "f1") == 0);
  REQUIRE(run_cli("finetune" + base + " --output-dir " + (t.root / "r2").string(),
                  t.root / "f2") == 0);
  nlohmann::json a = load_json(t.root / "r1" / "report.json");
  nlohmann::json b = load_json(t.root / "r2" / "report.json");
  REQUIRE(a["seed"] == 1);
  a.erase("wallclock");
  b.erase("wallclock");
  REQUIRE(a == b);
}

TEST_CASE("ablate writes one report per switch-grid row", "[cli]") {
  TempTree t;
  const fs::path cfg = t.root / "toy.cfg";
  write_tiny_config(cfg);
  const fs::path out = t.root / "abl";
  REQUIRE(run_cli("ablate --config " + cfg.string() + " --output-dir " + out.string(),
                  t.root / "a") == 0);
  for (const char* row : {"nb_mask", "al_only", "al_nb", "full"}) {
    REQUIRE(fs::exists(out / ("report_" + std::string(row) + ".json")));
  }
  const nlohmann::json summary = load_json(out / "ablate_summary.json");
  REQUIRE(summary["metrics"].size() == 4);
}
