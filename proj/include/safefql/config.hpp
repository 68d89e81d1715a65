// Run configuration: one flat key=value file with full defaulting; every key
// can also be set from the command line by its dotted name.
#pragma once

#include "safefql/common.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace safefql::config {

struct RunConfig {
  // environment / dataset
  double env_dt = 0.005;
  int env_horizon = 400;
  int data_n_traj = 2500;
  std::uint64_t data_seed = 1;

  // network shapes (Table-3 defaults: 2 hidden layers for critics, 3 for
  // the policy-class nets, 256 units)
  std::vector<int> net_critic_hidden{256, 256};
  std::vector<int> net_policy_hidden{256, 256, 256};

  // shared training settings
  double train_lr = 3e-4;
  double train_gamma = 0.99;
  double train_tau = 0.9;
  double train_ema_rate = 0.005;
  int train_batch_size = 256;
  std::int64_t train_critic_steps = 500000;
  std::int64_t train_flow_steps = 500000;
  std::int64_t train_actor_steps = 500000;
  double train_lambda = 1.0;
  double train_eta = 5.0;
  std::string train_actor_objective = "gated";  // gated | naive
  bool train_reward_twins = true;
  bool train_distill_full_flow = false;
  bool train_q_norm = false;
  std::string train_next_action_fallback = "behavior";  // behavior | self
  std::string train_safety_bootstrap = "value_net";      // value_net | twin_next_action
  int train_log_every = 1000;
  std::uint64_t train_seed = 2;

  int flow_k_steps = 10;

  // conformal calibration
  double calib_epsilon_s = 0.05;
  double calib_beta_s = 0.05;
  int calib_n_samples = 500;
  int calib_n_levels = 20;
  int calib_rollout_horizon = 400;
  int calib_rollouts_per_state = 1;
  std::uint64_t calib_seed = 3;

  // evaluation
  int eval_n_episodes = 500;
  int eval_rejection_n = 16;
  bool eval_timing = false;
  std::uint64_t eval_seed = 4;

  // benchmark
  int bench_n_calls = 10000;
  std::vector<int> bench_rejection_n{1, 4, 8, 16};

  // grid oracle
  int oracle_resolution = 100;
  int oracle_actions = 17;
  double oracle_gamma = 0.99;
  double oracle_dt = 0.005;
  double oracle_tol = 1e-6;
  int oracle_max_iters = 20000;
  double oracle_dead_band = 0.1;
  int oracle_probes = 2000;
  std::uint64_t oracle_seed = 5;

  void validate() const;
};

// The dotted key names, in declaration order (e.g. "env.dt", "train.tau").
std::vector<std::string> known_keys();

// Sets one key from its string form; throws ConfigError on unknown keys or
// unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses a key=value file ('#' comments, blank lines allowed).
RunConfig load_config(const std::string& path);

// Applies overrides (already split into key/value pairs) on top of cfg.
void apply_overrides(RunConfig& cfg, const std::map<std::string, std::string>& overrides);

// Re-seeds every *.seed key from one master seed.
void apply_master_seed(RunConfig& cfg, std::uint64_t seed);

std::string dump_config(const RunConfig& cfg);

}  // namespace safefql::config
