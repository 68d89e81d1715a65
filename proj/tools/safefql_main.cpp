// safefql command line: dataset generation, phased training, conformal
// calibration, evaluation, latency benchmarking and the grid oracle.
#include "safefql/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

using namespace safefql;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitOrdering = 3;
constexpr int kExitInfeasible = 4;

struct CliState {
  std::string config_path;
  std::optional<std::uint64_t> master_seed;
  std::string out_dir = "out";
  std::string checkpoint_dir;
  std::string dataset_path;
  std::map<std::string, std::string> overrides;
};

config::RunConfig resolve_config(const CliState& state) {
  config::RunConfig cfg;
  if (!state.config_path.empty()) cfg = config::load_config(state.config_path);
  if (state.master_seed) config::apply_master_seed(cfg, *state.master_seed);
  config::apply_overrides(cfg, state.overrides);
  cfg.validate();
  return cfg;
}

pipeline::Paths resolve_paths(const CliState& state) {
  return pipeline::Paths::with_defaults(state.out_dir, state.checkpoint_dir,
                                        state.dataset_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SafeFQL: safe offline RL on the boat navigation task"};
  app.require_subcommand(1);

  CliState state;
  app.add_option("--config", state.config_path, "key = value configuration file");
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value,
                                  "master seed; derives every *.seed key");
  app.add_option("--out", state.out_dir, "output directory (reports, metrics, dataset)");
  app.add_option("--checkpoint-dir", state.checkpoint_dir,
                 "checkpoint directory (default <out>/checkpoints)");
  app.add_option("--dataset", state.dataset_path,
                 "dataset path (default <out>/boat_dataset.sfqd)");

  // Every configuration key doubles as a --<dotted.name> override; later
  // occurrences win so command-specific values can extend a shared prefix.
  for (const std::string& key : config::known_keys()) {
    app.add_option_function<std::string>(
        "--" + key, [&state, key](const std::string& v) { state.overrides[key] = v; },
        "override config key " + key)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  auto* gen = app.add_subcommand("gen-data", "generate the offline boat dataset");
  std::string phase_name;
  auto* train = app.add_subcommand("train", "run training phase(s)");
  train->add_option("phase", phase_name, "critics|flow|actor|all")->required();
  auto* calibrate = app.add_subcommand("calibrate", "conformal delta calibration");
  std::string mode_name;
  auto* eval = app.add_subcommand("eval", "evaluate a policy mode over paired episodes");
  eval->add_option("mode", mode_name, "safefql|rejection|random|zero")->required();
  auto* bench = app.add_subcommand("bench", "per-action latency benchmark");
  auto* oracle_cmd =
      app.add_subcommand("oracle", "grid value iteration and critic sign agreement");
  auto* print_cfg = app.add_subcommand("print-config", "print the resolved configuration");

  // Let global flags (including --<key> overrides) appear after the
  // subcommand as well.
  for (auto* sub : {gen, train, calibrate, eval, bench, oracle_cmd, print_cfg})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (seed_opt->count() > 0) state.master_seed = seed_value;
    const config::RunConfig cfg = resolve_config(state);
    const pipeline::Paths paths = resolve_paths(state);

    if (gen->parsed()) {
      pipeline::cmd_gen_data(cfg, paths);
      std::printf("wrote %s (%d trajectories x %d steps)\n", paths.dataset_path.c_str(),
                  cfg.data_n_traj, cfg.env_horizon);
    } else if (train->parsed()) {
      pipeline::cmd_train(cfg, pipeline::parse_phase(phase_name), paths);
      std::printf("checkpoints in %s\n", paths.checkpoint_dir.c_str());
    } else if (calibrate->parsed()) {
      const auto report = pipeline::cmd_calibrate(cfg, paths);
      std::printf("delta_star = %.6f (delta_0 = %.6f, violations %d/%d)\n", report.delta_star,
                  report.delta_0, report.violation_count, report.n_samples);
    } else if (eval->parsed()) {
      const auto report = pipeline::cmd_eval(cfg, pipeline::parse_eval_mode(mode_name), paths);
      std::printf("%s: mean reward %.3f, safety rate %.1f%%, total violations %d\n",
                  pipeline::eval_mode_name(report.mode).c_str(), report.mean_reward,
                  report.safety_rate_pct, report.total_violations);
    } else if (bench->parsed()) {
      const auto report = pipeline::cmd_bench(cfg, paths);
      std::printf("one-step %.2f us, %d-step flow %.2f us (x%.1f)\n", report.one_step_us,
                  report.flow_k, report.flow_k_us, report.flow_over_one_step);
      for (const auto& [n, us] : report.rejection_us)
        std::printf("rejection N=%d: %.2f us\n", n, us);
    } else if (oracle_cmd->parsed()) {
      const auto report = pipeline::cmd_oracle(cfg, paths);
      std::printf("converged in %d iterations; feasible area %.1f%%\n", report.iterations,
                  100.0 * report.feasible_area_fraction);
      if (report.agreement)
        std::printf("critic sign agreement: %.1f%% over %d probes\n",
                    100.0 * report.agreement->fraction, report.agreement->n_compared);
    } else if (print_cfg->parsed()) {
      std::fputs(config::dump_config(cfg).c_str(), stdout);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const OrderingError& e) {
    std::fprintf(stderr, "ordering error: %s\n", e.what());
    return kExitOrdering;
  } catch (const InfeasibleError& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitOk;
}
