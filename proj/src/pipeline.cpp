#include "safefql/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace safefql::pipeline {

namespace fs = std::filesystem;

Paths Paths::with_defaults(std::string out, std::string ckpt, std::string data) {
  Paths p;
  p.out_dir = out.empty() ? "out" : std::move(out);
  p.checkpoint_dir = ckpt.empty() ? p.out_dir + "/checkpoints" : std::move(ckpt);
  p.dataset_path = data.empty() ? p.out_dir + "/boat_dataset.sfqd" : std::move(data);
  return p;
}

namespace {

critics::CriticConfig critic_config(const config::RunConfig& cfg) {
  critics::CriticConfig c;
  c.hidden = cfg.net_critic_hidden;
  c.lr = cfg.train_lr;
  c.gamma = cfg.train_gamma;
  c.tau = cfg.train_tau;
  c.ema_rate = cfg.train_ema_rate;
  c.batch_size = cfg.train_batch_size;
  c.steps = cfg.train_critic_steps;
  c.reward_twins = cfg.train_reward_twins;
  c.fallback = cfg.train_next_action_fallback == "self"
                   ? critics::NextActionFallback::kSelf
                   : critics::NextActionFallback::kBehavior;
  c.safety_bootstrap = cfg.train_safety_bootstrap == "twin_next_action"
                           ? critics::SafetyBootstrap::kTwinNextAction
                           : critics::SafetyBootstrap::kValueNet;
  c.seed = cfg.train_seed;
  c.log_every = cfg.train_log_every;
  return c;
}

flow::FlowConfig flow_config(const config::RunConfig& cfg) {
  flow::FlowConfig c;
  c.hidden = cfg.net_policy_hidden;
  c.k_steps = cfg.flow_k_steps;
  c.lr = cfg.train_lr;
  c.batch_size = cfg.train_batch_size;
  c.steps = cfg.train_flow_steps;
  c.seed = cfg.train_seed;
  c.log_every = cfg.train_log_every;
  return c;
}

actor::ActorConfig actor_config(const config::RunConfig& cfg) {
  actor::ActorConfig c;
  c.hidden = cfg.net_policy_hidden;
  c.lr = cfg.train_lr;
  c.lambda = cfg.train_lambda;
  c.eta = cfg.train_eta;
  c.objective = cfg.train_actor_objective == "naive" ? actor::Objective::kNaive
                                                     : actor::Objective::kGated;
  c.distill_full_flow = cfg.train_distill_full_flow;
  c.normalize_q = cfg.train_q_norm;
  c.batch_size = cfg.train_batch_size;
  c.steps = cfg.train_actor_steps;
  c.seed = cfg.train_seed;
  c.log_every = cfg.train_log_every;
  return c;
}

env::TrajectoryDataset require_dataset(const Paths& paths) {
  if (!fs::exists(paths.dataset_path))
    throw OrderingError("dataset missing at " + paths.dataset_path +
                        " (run `gen-data` first)");
  return env::load_dataset(paths.dataset_path);
}

std::string calibration_path(const Paths& paths) { return paths.out_dir + "/calibration.json"; }

}  // namespace

void cmd_gen_data(const config::RunConfig& cfg, const Paths& paths) {
  cfg.validate();
  fs::create_directories(paths.out_dir);
  const auto ds = env::generate_dataset(cfg.data_n_traj, cfg.env_horizon, cfg.env_dt,
                                        cfg.data_seed);
  env::save_dataset(ds, paths.dataset_path);
}

Phase parse_phase(const std::string& name) {
  if (name == "critics") return Phase::kCritics;
  if (name == "flow") return Phase::kFlow;
  if (name == "actor") return Phase::kActor;
  if (name == "all") return Phase::kAll;
  throw ConfigError("unknown train phase '" + name + "' (critics|flow|actor|all)");
}

void cmd_train(const config::RunConfig& cfg, Phase phase, const Paths& paths) {
  cfg.validate();
  fs::create_directories(paths.out_dir);
  fs::create_directories(paths.checkpoint_dir);

  const bool run_all = phase == Phase::kAll;
  const auto ds = require_dataset(paths);

  if (phase == Phase::kCritics || (run_all && !critics::bundle_exists(paths.checkpoint_dir))) {
    const auto bundle =
        critics::train_critics(ds, critic_config(cfg), paths.out_dir + "/critic_metrics.csv");
    critics::save_bundle(bundle, paths.checkpoint_dir);
  }

  if (phase == Phase::kFlow || (run_all && !flow::teacher_exists(paths.checkpoint_dir))) {
    if (!critics::bundle_exists(paths.checkpoint_dir))
      throw OrderingError("`train flow` requires the critics phase (missing critics "
                          "checkpoint in " + paths.checkpoint_dir + ")");
    const auto teacher =
        flow::train_flow_teacher(ds, flow_config(cfg), paths.out_dir + "/flow_metrics.csv");
    flow::save_teacher(teacher, paths.checkpoint_dir);
  }

  if (phase == Phase::kActor || (run_all && !actor::actor_exists(paths.checkpoint_dir))) {
    if (!critics::bundle_exists(paths.checkpoint_dir))
      throw OrderingError("`train actor` requires the critics phase (missing critics "
                          "checkpoint in " + paths.checkpoint_dir + ")");
    if (!flow::teacher_exists(paths.checkpoint_dir))
      throw OrderingError("`train actor` requires the flow phase (missing flow teacher "
                          "checkpoint in " + paths.checkpoint_dir + ")");
    const auto crit = critics::load_bundle(paths.checkpoint_dir);
    const auto teacher = flow::load_teacher(paths.checkpoint_dir);
    const auto a = actor::train_actor(ds, crit, teacher, actor_config(cfg),
                                      paths.out_dir + "/actor_metrics.csv");
    actor::save_actor(a, paths.checkpoint_dir);
  }
}

conformal::CalibrationReport cmd_calibrate(const config::RunConfig& cfg, const Paths& paths) {
  cfg.validate();
  fs::create_directories(paths.out_dir);
  const auto crit = critics::load_bundle(paths.checkpoint_dir);
  const auto a = actor::load_actor(paths.checkpoint_dir);

  conformal::CalibrationConfig cc;
  cc.epsilon_s = cfg.calib_epsilon_s;
  cc.beta_s = cfg.calib_beta_s;
  cc.n_samples = cfg.calib_n_samples;
  cc.n_levels = cfg.calib_n_levels;
  cc.rollout_horizon = cfg.calib_rollout_horizon;
  cc.dt = cfg.env_dt;
  cc.rollouts_per_state = cfg.calib_rollouts_per_state;
  cc.seed = cfg.calib_seed;

  const auto report = conformal::calibrate_boat(a, crit, cc);
  conformal::save_report(report, calibration_path(paths));
  if (!report.feasible)
    throw InfeasibleError(
        "calibration infeasible: minimal achievable epsilon " +
        std::to_string(report.min_achievable_eps) + " exceeds epsilon_s " +
        std::to_string(report.epsilon_s) + " (report written to " + calibration_path(paths) +
        ")");
  return report;
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "safefql") return EvalMode::kSafeFql;
  if (name == "rejection") return EvalMode::kRejection;
  if (name == "random") return EvalMode::kRandom;
  if (name == "zero") return EvalMode::kZero;
  throw ConfigError("unknown eval mode '" + name + "' (safefql|rejection|random|zero)");
}

std::string eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kSafeFql: return "safefql";
    case EvalMode::kRejection: return "rejection";
    case EvalMode::kRandom: return "random";
    case EvalMode::kZero: return "zero";
  }
  return "?";
}

namespace {

// Initial states are a pure function of (seed, init-set definition), so all
// modes evaluated under one seed see the same list.
std::vector<Vec2> eval_initial_states(const config::RunConfig& cfg,
                                      const critics::CriticBundle* crit, double delta,
                                      bool calibrated) {
  std::vector<Vec2> states;
  states.reserve(cfg.eval_n_episodes);
  Rng rng(derive_seed(cfg.eval_seed, 0xe7a1));
  std::uint64_t proposals = 0;
  const std::uint64_t cap = 100000000ULL;
  while (states.size() < static_cast<std::size_t>(cfg.eval_n_episodes)) {
    if (++proposals > cap) throw InfeasibleError("eval: initial-state set looks empty");
    const Vec2 x = env::sample_uniform_state(rng);
    if (env::safety_margin(x) >= 0.0) continue;
    if (calibrated && critics::v_c_value(*crit, x) >= delta) continue;
    states.push_back(x);
  }
  return states;
}

}  // namespace

EvalReport cmd_eval(const config::RunConfig& cfg, EvalMode mode, const Paths& paths,
                    std::optional<double> delta_override) {
  cfg.validate();
  fs::create_directories(paths.out_dir);

  const bool needs_actor = mode == EvalMode::kSafeFql;
  const bool needs_teacher = mode == EvalMode::kRejection;

  std::optional<critics::CriticBundle> crit;
  std::optional<actor::OneStepActor> act;
  std::optional<flow::FlowTeacher> teacher;
  if (needs_actor) act = actor::load_actor(paths.checkpoint_dir);
  if (needs_teacher) {
    teacher = flow::load_teacher(paths.checkpoint_dir);
    crit = critics::load_bundle(paths.checkpoint_dir);
  }

  // Initial-state set: the calibrated safe set when a calibration report
  // exists, otherwise the negative-margin set.
  double delta_star = 0.0;
  bool calibrated = false;
  if (delta_override.has_value()) {
    delta_star = *delta_override;
    calibrated = true;
  } else if (fs::exists(calibration_path(paths))) {
    delta_star = conformal::load_report(calibration_path(paths)).delta_star;
    calibrated = true;
  }
  if (calibrated && !crit) crit = critics::load_bundle(paths.checkpoint_dir);

  const auto states =
      eval_initial_states(cfg, crit ? &*crit : nullptr, delta_star, calibrated);

  const double rejection_delta = calibrated ? delta_star : 0.0;

  EvalReport report;
  report.mode = mode;
  report.n_episodes = cfg.eval_n_episodes;
  report.rejection_n = mode == EvalMode::kRejection ? cfg.eval_rejection_n : 0;
  report.seed = cfg.eval_seed;
  report.init_set = calibrated ? "calibrated" : "safe_margin";
  report.delta_star_used = calibrated ? delta_star : 0.0;
  report.episodes.resize(states.size());

  parallel_for(states.size(), [&](std::size_t e0, std::size_t e1) {
    for (std::size_t e = e0; e < e1; ++e) {
      Rng rng(derive_seed(cfg.eval_seed, 0xe9 + e));
      env::Policy policy;
      switch (mode) {
        case EvalMode::kSafeFql:
          policy = [&](const Vec2& x, Rng& r) { return actor::deploy_action(*act, x, r); };
          break;
        case EvalMode::kRejection:
          policy = [&](const Vec2& x, Rng& r) {
            return actor::rejection_sampling_action(*teacher, *crit, x, cfg.eval_rejection_n,
                                                    rejection_delta, r);
          };
          break;
        case EvalMode::kRandom:
          policy = [](const Vec2&, Rng& r) { return r.disk(); };
          break;
        case EvalMode::kZero:
          policy = [](const Vec2&, Rng&) { return Vec2::Zero(); };
          break;
      }
      const env::Rollout roll = env::rollout(policy, states[e], cfg.env_horizon, cfg.env_dt, rng);
      EpisodeResult& res = report.episodes[e];
      res.x0 = states[e];
      res.cumulative_reward = roll.cumulative_reward;
      res.violations = roll.violations;
      res.max_ell = roll.max_ell;
    }
  });

  double reward_sum = 0.0, max_ell_sum = 0.0;
  int violation_free = 0;
  for (const auto& ep : report.episodes) {
    reward_sum += ep.cumulative_reward;
    max_ell_sum += ep.max_ell;
    report.total_violations += ep.violations;
    if (ep.violations == 0) ++violation_free;
  }
  report.mean_reward = reward_sum / report.episodes.size();
  report.mean_max_ell = max_ell_sum / report.episodes.size();
  report.safety_rate_pct = 100.0 * violation_free / report.episodes.size();

  if (cfg.eval_timing) {
    // Separate single-threaded timing pass so episode workers stay clean.
    Rng rng(derive_seed(cfg.eval_seed, 0x71e));
    const int calls = 2000;
    Vec2 x = states.front();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < calls; ++i) {
      switch (mode) {
        case EvalMode::kSafeFql: actor::deploy_action(*act, x, rng); break;
        case EvalMode::kRejection:
          actor::rejection_sampling_action(*teacher, *crit, x, cfg.eval_rejection_n,
                                           rejection_delta, rng);
          break;
        case EvalMode::kRandom: rng.disk(); break;
        case EvalMode::kZero: break;
      }
    }
    const auto t1 = std::chrono::steady_clock::now();
    report.mean_action_latency_us =
        std::chrono::duration<double, std::micro>(t1 - t0).count() / calls;
  }

  // Per-episode CSV + JSON report.
  const std::string stem = paths.out_dir + "/eval_" + eval_mode_name(mode);
  {
    std::ofstream csv(stem + "_episodes.csv");
    if (!csv) throw IoError("cannot open " + stem + "_episodes.csv");
    csv << "episode,x0_1,x0_2,cum_reward,violations,max_ell\n";
    for (std::size_t e = 0; e < report.episodes.size(); ++e) {
      const auto& ep = report.episodes[e];
      csv << e << "," << ep.x0.x() << "," << ep.x0.y() << "," << ep.cumulative_reward << ","
          << ep.violations << "," << ep.max_ell << "\n";
    }
  }
  {
    nlohmann::json j;
    j["mode"] = eval_mode_name(mode);
    j["n_episodes"] = report.n_episodes;
    if (mode == EvalMode::kRejection) j["rejection_n"] = report.rejection_n;
    j["seed"] = report.seed;
    j["init_set"] = report.init_set;
    j["delta_star_used"] = report.delta_star_used;
    j["mean_reward"] = report.mean_reward;
    j["total_violations"] = report.total_violations;
    j["safety_rate_pct"] = report.safety_rate_pct;
    j["mean_max_ell"] = report.mean_max_ell;
    if (report.mean_action_latency_us)
      j["mean_action_latency_us"] = *report.mean_action_latency_us;
    std::ofstream out(stem + ".json");
    if (!out) throw IoError("cannot open " + stem + ".json");
    out << j.dump(2) << "\n";
  }
  return report;
}

namespace {

template <typename Fn>
double median_latency_us(int n_calls, Fn&& fn) {
  std::vector<double> samples(n_calls);
  for (int i = 0; i < 50; ++i) fn();  // warmup
  for (int i = 0; i < n_calls; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    samples[i] = std::chrono::duration<double, std::micro>(t1 - t0).count();
  }
  std::nth_element(samples.begin(), samples.begin() + n_calls / 2, samples.end());
  return samples[n_calls / 2];
}

}  // namespace

BenchReport cmd_bench(const config::RunConfig& cfg, const Paths& paths) {
  cfg.validate();
  fs::create_directories(paths.out_dir);
  const auto act = actor::load_actor(paths.checkpoint_dir);
  const auto teacher = flow::load_teacher(paths.checkpoint_dir);
  const auto crit = critics::load_bundle(paths.checkpoint_dir);

  Rng rng(derive_seed(cfg.eval_seed, 0xbe9c));
  Vec2 x = env::sample_uniform_state(rng);
  while (env::safety_margin(x) >= 0.0) x = env::sample_uniform_state(rng);

  BenchReport report;
  report.n_calls = cfg.bench_n_calls;
  report.flow_k = teacher.k_steps;

  volatile double sink = 0.0;
  report.one_step_us = median_latency_us(cfg.bench_n_calls, [&] {
    sink = actor::deploy_action(act, x, rng).x();
  });
  report.flow_k_us = median_latency_us(cfg.bench_n_calls, [&] {
    const auto [z1, z2] = rng.normal2();
    sink = flow::integrate_flow(teacher, x, Vec2{z1, z2}).x();
  });
  for (int n : cfg.bench_rejection_n) {
    report.rejection_us[n] = median_latency_us(cfg.bench_n_calls, [&] {
      sink = actor::rejection_sampling_action(teacher, crit, x, n, 0.0, rng).x();
    });
  }
  (void)sink;

  report.flow_over_one_step = report.flow_k_us / report.one_step_us;
  if (report.rejection_us.count(1)) {
    for (const auto& [n, us] : report.rejection_us)
      report.rejection_over_n1[n] = us / report.rejection_us.at(1);
  }

  nlohmann::json j;
  j["n_calls"] = report.n_calls;
  j["one_step_us"] = report.one_step_us;
  j["flow_k_us"] = report.flow_k_us;
  j["flow_k"] = report.flow_k;
  j["flow_over_one_step"] = report.flow_over_one_step;
  nlohmann::json rej = nlohmann::json::object();
  for (const auto& [n, us] : report.rejection_us) rej[std::to_string(n)] = us;
  j["rejection_us"] = rej;
  nlohmann::json ratios = nlohmann::json::object();
  for (const auto& [n, ratio] : report.rejection_over_n1) ratios[std::to_string(n)] = ratio;
  j["rejection_over_n1"] = ratios;
  std::ofstream out(paths.out_dir + "/bench.json");
  if (!out) throw IoError("cannot open " + paths.out_dir + "/bench.json");
  out << j.dump(2) << "\n";
  return report;
}

OracleReport cmd_oracle(const config::RunConfig& cfg, const Paths& paths) {
  cfg.validate();
  fs::create_directories(paths.out_dir);
  oracle::GridConfig gc;
  gc.n1 = cfg.oracle_resolution;
  gc.n2 = cfg.oracle_resolution;
  gc.n_actions = cfg.oracle_actions;
  gc.gamma = cfg.oracle_gamma;
  gc.dt = cfg.oracle_dt;
  gc.tol = cfg.oracle_tol;
  gc.max_iters = cfg.oracle_max_iters;
  gc.dead_band = cfg.oracle_dead_band;

  const auto grid = oracle::value_iteration(gc);
  oracle::save_grid(grid, paths.out_dir + "/oracle_grid.bin", paths.out_dir + "/oracle_grid.csv");

  OracleReport report;
  report.iterations = grid.iterations;
  report.final_residual = grid.final_residual;
  report.feasible_area_fraction =
      static_cast<double>((grid.values.array() < 0.0).count()) / grid.values.size();

  nlohmann::json j;
  j["iterations"] = report.iterations;
  j["final_residual"] = report.final_residual;
  j["feasible_area_fraction"] = report.feasible_area_fraction;
  j["resolution"] = cfg.oracle_resolution;
  j["actions"] = cfg.oracle_actions;
  j["gamma"] = cfg.oracle_gamma;

  if (critics::bundle_exists(paths.checkpoint_dir)) {
    const auto crit = critics::load_bundle(paths.checkpoint_dir);
    report.agreement =
        oracle::compare_with_critics(grid, crit, cfg.oracle_probes, cfg.oracle_seed);
    j["probes"] = report.agreement->n_compared;
    j["excluded_by_dead_band"] = report.agreement->n_excluded;
    j["sign_agreement"] = report.agreement->fraction;
  }
  std::ofstream out(paths.out_dir + "/oracle_report.json");
  if (!out) throw IoError("cannot open " + paths.out_dir + "/oracle_report.json");
  out << j.dump(2) << "\n";
  return report;
}

}  // namespace safefql::pipeline
