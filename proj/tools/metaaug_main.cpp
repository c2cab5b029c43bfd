#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "metaaug/gradcheck.hpp"
#include "metaaug/harness.hpp"
#include "metaaug/infotheory.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvariantFailed = 1;
constexpr int kExitConfigError = 2;

int cmd_train(const std::string& config_path, int seed_override,
              bool has_override) {
  metaaug::ExperimentConfig cfg;
  try {
    cfg = metaaug::parse_config_file(config_path);
    if (has_override) cfg.seeds = {seed_override};
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }

  try {
    metaaug::RunResult run = metaaug::run_experiment(cfg);
    bool any_failed = false;
    for (const auto& seed : run.seeds) {
      if (seed.failed) {
        any_failed = true;
        std::cout << "seed " << seed.seed << ": FAILED (" << seed.failure
                  << ")\n";
        continue;
      }
      std::cout << "seed " << seed.seed << ": best step " << seed.best_step
                << ", test post-update loss "
                << metaaug::format_g17(seed.test_post_loss);
      if (seed.test_post_acc) {
        std::cout << ", acc " << metaaug::format_g17(*seed.test_post_acc);
      }
      std::cout << "\n";
    }
    std::cout << "run directory: " << run.dir.string() << "\n";
    return any_failed ? kExitInvariantFailed : kExitOk;
  } catch (const metaaug::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariantFailed;
  }
}

int cmd_verify_entropy(const std::string& spec_path) {
  metaaug::EntropySpec spec;
  try {
    std::ifstream in(spec_path);
    if (!in) {
      std::cerr << "config error: cannot open " << spec_path << "\n";
      return kExitConfigError;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    spec = metaaug::parse_entropy_spec(buf.str());
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }

  const metaaug::Theorem1Report report =
      metaaug::verify_theorem1(spec.joint, spec.noise, spec.map());
  std::cout << "H(Y|X)   = " << metaaug::format_g17(report.h_y_given_x)
            << " bits\n";
  std::cout << "H(Y'|X)  = " << metaaug::format_g17(report.h_aug_given_x)
            << " bits\n";
  std::cout << "H(eps)   = " << metaaug::format_g17(report.h_eps) << " bits\n";
  std::cout << "increase = " << metaaug::format_g17(report.increase)
            << " bits\n";
  if (report.applicable) {
    std::cout << "injective: yes, gap = " << metaaug::format_g17(report.gap)
              << "\n";
    std::cout << report.status() << "\n";
    return report.pass ? kExitOk : kExitInvariantFailed;
  }
  std::cout << "injective: no (measured increase "
            << metaaug::format_g17(report.increase) << " vs H(eps) "
            << metaaug::format_g17(report.h_eps) << ")\n";
  std::cout << report.status() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& op_filter) {
  std::vector<metaaug::GradCheckResult> results;
  try {
    results = metaaug::check_primitives();
    results.push_back(metaaug::check_second_order());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariantFailed;
  }

  bool matched = false, all_pass = true;
  for (const auto& r : results) {
    if (!op_filter.empty() && r.name != op_filter) continue;
    matched = true;
    std::printf("[%s] %-22s rel err %.3e (tol %.0e)\n",
                r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err,
                r.tolerance);
    all_pass = all_pass && r.pass;
  }
  if (!matched) {
    std::cerr << "config error: unknown op '" << op_filter << "'\n";
    return kExitConfigError;
  }
  return all_pass ? kExitOk : kExitInvariantFailed;
}

int cmd_report(const std::string& run_dir) {
  try {
    const auto rows =
        metaaug::parse_metrics_csv(std::filesystem::path(run_dir) /
                                   "metrics.csv");
    std::map<int, std::vector<metaaug::MetricsRow>> by_seed;
    for (const auto& r : rows) by_seed[r.seed].push_back(r);
    for (const auto& [seed, seed_rows] : by_seed) {
      try {
        const metaaug::DiagnosisReport rep =
            metaaug::memorization_report(seed_rows);
        std::printf(
            "seed %d: %s (train pre %.4f, train post %.4f, val post %.4f)\n",
            seed, metaaug::diagnosis_name(rep.verdict), rep.train_pre,
            rep.train_post, rep.val_post);
      } catch (const std::exception& e) {
        std::printf("seed %d: no diagnosis (%s)\n", seed, e.what());
      }
    }
    for (const auto& p : metaaug::emit_plot_data(run_dir)) {
      std::cout << "wrote " << p.string() << "\n";
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learning laboratory: training, diagnostics and exact "
               "entropy verification"};
  app.require_subcommand(1);

  std::string config_path;
  int seed_override = 0;
  auto* train = app.add_subcommand("train", "run an experiment from a config");
  train->add_option("--config", config_path, "config file")->required();
  auto* override_opt =
      train->add_option("--seed-override", seed_override, "run only this seed");

  std::string entropy_spec;
  auto* verify = app.add_subcommand(
      "verify-entropy", "check the entropy identity on a described instance");
  verify->add_option("--spec", entropy_spec, "instance description file")
      ->required();

  std::string op_filter;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference checks for the autodiff engine");
  gradcheck->add_option("--op", op_filter, "check a single op by name");

  std::string run_dir;
  auto* report = app.add_subcommand(
      "report", "overfitting diagnosis and plot data for a finished run");
  report->add_option("run_dir", run_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    return cmd_train(config_path, seed_override, override_opt->count() > 0);
  }
  if (verify->parsed()) return cmd_verify_entropy(entropy_spec);
  if (gradcheck->parsed()) return cmd_gradcheck(op_filter);
  if (report->parsed()) return cmd_report(run_dir);
  return kExitConfigError;
}
