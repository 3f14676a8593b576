// Command-line driver: run | toy-sim | cluster-eval.
//
// Exit status: 0 success, 2 configuration or input problem, 3 runtime or
// numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "fltac/experiment.hpp"

namespace fs = std::filesystem;
using namespace fltac;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
  std::size_t threads = 1;
};

fs::path resolve_out_dir(const Common& c, const std::string& root, const std::string& prefix) {
  if (!c.out_dir.empty()) return c.out_dir;
  return timestamped_dir(root, prefix);
}

int cmd_run(const Common& c) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  const fs::path dir = resolve_out_dir(c, cfg.output_dir, "run");
  RunOptions opt;
  opt.threads = c.threads;
  if (!c.quiet) opt.log = &std::cerr;
  const RunSummary s = run_experiment(cfg, dir, opt);
  if (!c.quiet) {
    std::cout << "output: " << dir.string() << "\n"
              << "final cluster accuracy: " << s.final_cluster_accuracy << "\n"
              << "final mean eval loss: " << s.mean_final_loss() << "\n"
              << "cumulative bytes: " << s.cumulative_bytes << "\n";
  }
  return kOk;
}

int cmd_toy_sim(const Common& c) {
  SweepConfig cfg = c.config.empty() ? SweepConfig{} : load_sweep_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.threads = c.threads;
  validate(cfg);
  const fs::path dir = resolve_out_dir(c, "runs", "toy");
  fs::create_directories(dir);
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const SweepResult r = run_sweep(cfg);
  std::ostringstream points, summary;
  write_sweep_points_csv(points, r);
  write_sweep_summary_csv(summary, r);
  write_file(dir / "toy_points.csv", points.str());
  write_file(dir / "toy_summary.csv", summary.str());
  if (!c.quiet) {
    std::cout << "output: " << dir.string() << "\n" << summary.str();
  }
  return kOk;
}

int cmd_cluster_eval(const Common& c, const std::string& adapters, const std::string& truth) {
  ClusterEvalOptions opt;
  if (!c.config.empty()) {
    const ExperimentConfig cfg = load_experiment_config(c.config);
    opt.seed = cfg.seed;
    opt.clusters = cfg.shared_adapter ? 1 : cfg.task_count();
    opt.kmeans.restarts = cfg.kmeans_restarts;
    opt.kmeans.max_iters = cfg.kmeans_max_iters;
    opt.kmeans.tol = cfg.kmeans_tol;
  }
  if (c.seed) opt.seed = *c.seed;
  const auto rows = cluster_eval(adapters, truth, opt);
  std::ostringstream csv;
  write_cluster_eval_csv(csv, rows);
  const fs::path dir = resolve_out_dir(c, "runs", "cluster-eval");
  fs::create_directories(dir);
  write_file(dir / "cluster_trend.csv", csv.str());
  if (!c.quiet) std::cout << "output: " << dir.string() << "\n" << csv.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FL-TAC federated simulator"};
  app.require_subcommand(1);

  Common common;
  std::string adapters, truth;
  const auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", common.config, "JSON config file");
    if (config_required) opt->required();
    sub->add_option("--seed", common.seed, "overrides the seed in the config");
    sub->add_option("--out-dir", common.out_dir,
                    "output directory (default: fresh timestamped directory)");
    sub->add_flag("--quiet", common.quiet, "no progress output");
    sub->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "run a federated experiment");
  add_common(run, true);
  auto* toy = app.add_subcommand("toy-sim", "rank sweep: shared vs per-task adapters");
  add_common(toy, false);
  auto* eval = app.add_subcommand("cluster-eval", "re-cluster saved upload vectors offline");
  add_common(eval, false);
  eval->add_option("--adapters", adapters, "directory of round_NNNN.csv files")->required();
  eval->add_option("--truth", truth, "eval_ledger.csv of the run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (run->parsed()) return cmd_run(common);
    if (toy->parsed()) return cmd_toy_sim(common);
    return cmd_cluster_eval(common, adapters, truth);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
