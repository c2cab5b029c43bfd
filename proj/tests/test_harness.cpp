#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "metaaug/harness.hpp"

using namespace metaaug;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

std::string strip_wall(const MetricsRow& r) {
  std::string s = metrics_row_csv(r);
  return s.substr(0, s.rfind(','));
}

MetricsRow eval_row(long step, const std::string& split, double pre_acc,
                    double post_acc, int seed = 0) {
  MetricsRow r;
  r.step = step;
  r.split = split;
  r.seed = seed;
  r.pre_update_loss = 1.0 - pre_acc;
  r.post_update_loss = 1.0 - post_acc;
  r.pre_update_acc = pre_acc;
  r.post_update_acc = post_acc;
  return r;
}

std::vector<MetricsRow> trace(double train_pre, double train_post,
                              double val_post, int points = 12) {
  std::vector<MetricsRow> rows;
  for (int i = 0; i < points; ++i) {
    rows.push_back(eval_row(i * 100, "train", train_pre, train_post));
    rows.push_back(eval_row(i * 100, "val", val_post, val_post));
  }
  return rows;
}

ExperimentConfig tiny_sinusoid_config(const std::string& dir_name) {
  ExperimentConfig cfg;
  cfg.learner = LearnerKind::maml;
  cfg.task = TaskKind::sinusoid;
  cfg.seeds = {0, 1};
  cfg.total_steps = 20;
  cfg.eval_every = 10;
  cfg.eval_episodes = 3;
  cfg.k_shot = 3;
  cfg.n_query = 3;
  cfg.maml.meta_batch = 2;
  cfg.maml.inner_steps_eval = 4;
  cfg.out_dir = fresh_dir(dir_name).string();
  return cfg;
}

}  // namespace

TEST_CASE("config text parses the documented key set") {
  const std::string text = R"(
# experiment
learner = fomaml
task = synthetic_cls
mode = intrashuffle
seeds = 3, 4, 5
total_steps = 100
eval_every = 50
eval_episodes = 7
k = 1
q = 5
n_way = 5
aug.kind = additive_uniform
aug.alpha = 0.4
aug.wrap_range = 10
maml.inner_lr = 0.02
maml.meta_batch = 4
maml.weight_decay = 0.001
synth.classes = 22
split.train = 12
split.val = 5
split.test = 5
)";
  const ExperimentConfig cfg = parse_config_text(text);
  REQUIRE(cfg.learner == LearnerKind::fomaml);
  REQUIRE(cfg.maml.first_order);
  REQUIRE(cfg.task == TaskKind::synthetic_cls);
  REQUIRE(cfg.mode == SamplerMode::intrashuffle);
  REQUIRE(cfg.seeds == std::vector<int>{3, 4, 5});
  REQUIRE(cfg.aug.kind == AugKind::additive_uniform);
  REQUIRE(cfg.aug.alpha == 0.4);
  REQUIRE(cfg.aug.wrap_range == 10.0);
  REQUIRE(cfg.maml.inner_lr == 0.02);
  REQUIRE(cfg.maml.weight_decay == 0.001);
  REQUIRE(cfg.synth_classes == 22);
}

TEST_CASE("config validation failures") {
  REQUIRE_THROWS_AS(parse_config_text("unknown_key = 1\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("learner = sgd\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("total_steps = 100\neval_every = 33\n"),
                    ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("seeds =\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("total_steps = abc\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("aug.kind = additive_discrete\n"),
                    ConfigError);
}

TEST_CASE("memorization report reproduces the three panel patterns") {
  const DiagnosisReport memorized = memorization_report(trace(0.95, 0.96, 0.40));
  REQUIRE(memorized.verdict == Diagnosis::memorization);

  const DiagnosisReport overfit = memorization_report(trace(0.25, 0.95, 0.45));
  REQUIRE(overfit.verdict == Diagnosis::learner_overfit);

  const DiagnosisReport healthy = memorization_report(trace(0.30, 0.90, 0.85));
  REQUIRE(healthy.verdict == Diagnosis::healthy);
}

TEST_CASE("memorization report thresholds are overridable") {
  // Pre/post gap 0.10 with a 0.30 validation shortfall: healthy under the
  // defaults, memorization once delta is widened.
  const auto rows = trace(0.80, 0.90, 0.60);
  REQUIRE(memorization_report(rows).verdict == Diagnosis::healthy);
  REQUIRE(memorization_report(rows, 0.12, 0.15).verdict ==
          Diagnosis::memorization);
  REQUIRE(memorization_report(rows, 0.05, 0.35).verdict == Diagnosis::healthy);
}

TEST_CASE("memorization report works on loss-only regression rows") {
  std::vector<MetricsRow> rows;
  for (int i = 0; i < 12; ++i) {
    MetricsRow train;
    train.step = i;
    train.split = "train";
    train.pre_update_loss = 0.5;   // performance -0.5
    train.post_update_loss = 0.45; // within delta of pre
    MetricsRow val = train;
    val.split = "val";
    val.post_update_loss = 1.2;    // trails by 0.75
    rows.push_back(train);
    rows.push_back(val);
  }
  REQUIRE(memorization_report(rows).verdict == Diagnosis::memorization);
}

TEST_CASE("memorization report needs ten evaluation points") {
  REQUIRE_THROWS_AS(memorization_report(trace(0.9, 0.9, 0.4, 9)), ConfigError);
}

TEST_CASE("metrics rows round-trip through csv exactly") {
  MetricsRow r;
  r.step = 1234;
  r.split = "val";
  r.pre_update_loss = 0.1 + 0.2;  // not exactly representable sum
  r.post_update_loss = 1e-17;
  r.pre_update_acc = 1.0 / 3.0;
  r.seed = 7;
  r.wall_ms = 99;
  const auto tmp = fresh_dir("metaaug_csv_roundtrip");
  std::filesystem::create_directories(tmp);
  {
    std::ofstream out(tmp / "metrics.csv");
    out << kMetricsHeader << "\n" << metrics_row_csv(r) << "\n";
  }
  const auto rows = parse_metrics_csv(tmp / "metrics.csv");
  REQUIRE(rows.size() == 1);
  REQUIRE(rows[0].step == r.step);
  REQUIRE(rows[0].pre_update_loss == r.pre_update_loss);
  REQUIRE(rows[0].post_update_loss == r.post_update_loss);
  REQUIRE(rows[0].pre_update_acc == r.pre_update_acc);
  REQUIRE_FALSE(rows[0].post_update_acc.has_value());
  std::filesystem::remove_all(tmp);
}

TEST_CASE("zero training steps reports initial-model performance only") {
  ExperimentConfig cfg = tiny_sinusoid_config("metaaug_run_zero");
  cfg.seeds = {0};
  cfg.total_steps = 0;
  const RunResult run = run_experiment(cfg);
  const SeedResult& seed = run.seed_result(0);
  REQUIRE_FALSE(seed.failed);
  REQUIRE(seed.best_step == 0);
  // One train row, one val row, one test row.
  REQUIRE(seed.rows.size() == 3);
  REQUIRE(seed.rows[2].split == "test");
  std::filesystem::remove_all(run.dir);
}

TEST_CASE("runs are deterministic per seed and config") {
  ExperimentConfig cfg = tiny_sinusoid_config("metaaug_run_a");
  const RunResult a = run_experiment(cfg);
  cfg.out_dir = fresh_dir("metaaug_run_b").string();
  cfg.parallel = 1;  // same result regardless of thread count
  const RunResult b = run_experiment(cfg);

  REQUIRE(a.seeds.size() == b.seeds.size());
  for (size_t s = 0; s < a.seeds.size(); ++s) {
    REQUIRE(a.seeds[s].rows.size() == b.seeds[s].rows.size());
    for (size_t i = 0; i < a.seeds[s].rows.size(); ++i) {
      // Identical except the wall-clock column.
      REQUIRE(strip_wall(a.seeds[s].rows[i]) == strip_wall(b.seeds[s].rows[i]));
    }
    REQUIRE(a.seeds[s].adaptation_loss == b.seeds[s].adaptation_loss);
  }
  std::filesystem::remove_all(a.dir);
  std::filesystem::remove_all(b.dir);
}

TEST_CASE("run directory carries metrics, config, checkpoints and summary") {
  ExperimentConfig cfg = tiny_sinusoid_config("metaaug_run_artifacts");
  cfg.seeds = {0};
  const RunResult run = run_experiment(cfg);
  REQUIRE(std::filesystem::exists(run.dir / "metrics.csv"));
  REQUIRE(std::filesystem::exists(run.dir / "adaptation.csv"));
  REQUIRE(std::filesystem::exists(run.dir / "config.cfg"));
  REQUIRE(std::filesystem::exists(run.dir / "summary.json"));
  REQUIRE(std::filesystem::exists(run.dir / "ckpt_seed0.bin"));

  // The config snapshot parses back to the same experiment.
  const ExperimentConfig echo = parse_config_file(run.dir / "config.cfg");
  REQUIRE(echo.total_steps == cfg.total_steps);
  REQUIRE(echo.k_shot == cfg.k_shot);

  // The checkpoint is loadable and matches the model architecture.
  const ParamSet restored = load_checkpoint(run.dir / "ckpt_seed0.bin");
  REQUIRE(restored.count() == 1761);

  // metrics.csv parses and covers train/val/test.
  const auto rows = parse_metrics_csv(run.dir / "metrics.csv");
  bool has_train = false, has_val = false, has_test = false;
  for (const auto& r : rows) {
    has_train = has_train || r.split == "train";
    has_val = has_val || r.split == "val";
    has_test = has_test || r.split == "test";
  }
  REQUIRE(has_train);
  REQUIRE(has_val);
  REQUIRE(has_test);
  std::filesystem::remove_all(run.dir);
}

TEST_CASE("plot data has the adaptation curve shape and exact values") {
  ExperimentConfig cfg = tiny_sinusoid_config("metaaug_run_plot");
  cfg.seeds = {0};
  const RunResult run = run_experiment(cfg);
  const auto written = emit_plot_data(run.dir);
  REQUIRE(written.size() == 2);

  // inner_steps_eval + 1 rows for the single seed, step 0 first.
  std::ifstream in(run.dir / "adaptation_curve.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> data;
  while (std::getline(in, line)) {
    if (!line.empty()) data.push_back(config_detail::split(line, ','));
  }
  REQUIRE(data.size() == static_cast<size_t>(cfg.maml.inner_steps_eval + 1));
  REQUIRE(data[0][1] == "0");

  // Step-0 adaptation loss equals the unadapted test loss, exactly.
  const SeedResult& seed = run.seed_result(0);
  REQUIRE(std::stod(data[0][2]) == seed.test_pre_loss);
  REQUIRE(std::stod(data[0][2]) == seed.adaptation_loss[0]);
  // Re-parsing reproduces the in-memory values bit-exactly.
  for (size_t s = 0; s < seed.adaptation_loss.size(); ++s) {
    REQUIRE(std::stod(data[s][2]) == seed.adaptation_loss[s]);
  }
  std::filesystem::remove_all(run.dir);
}

TEST_CASE("failed seeds record a failure row without aborting the run") {
  ExperimentConfig cfg = tiny_sinusoid_config("metaaug_run_fail");
  cfg.seeds = {0, 1};
  cfg.maml.inner_lr = 1e12;  // guaranteed blow-up
  cfg.maml.outer_lr = 1e12;
  const RunResult run = run_experiment(cfg);
  REQUIRE(run.seeds.size() == 2);
  for (const auto& seed : run.seeds) {
    REQUIRE(seed.failed);
    REQUIRE_FALSE(seed.failure.empty());
    REQUIRE(std::isnan(seed.rows.back().pre_update_loss));
  }
  // The run directory is still written, with the failure rows in place.
  const auto rows = parse_metrics_csv(run.dir / "metrics.csv");
  int nan_rows = 0;
  for (const auto& r : rows) {
    if (std::isnan(r.pre_update_loss)) ++nan_rows;
  }
  REQUIRE(nan_rows == 2);
  std::filesystem::remove_all(run.dir);
}
