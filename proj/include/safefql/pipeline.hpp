// Orchestration of the four training phases, evaluation, calibration and
// latency benchmarking on top of the library modules. The CLI is a thin
// wrapper over these calls; tests drive them directly.
#pragma once

#include "safefql/actor.hpp"
#include "safefql/config.hpp"
#include "safefql/conformal.hpp"
#include "safefql/critics.hpp"
#include "safefql/flow.hpp"
#include "safefql/grid_oracle.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace safefql::pipeline {

struct Paths {
  std::string out_dir = "out";
  std::string checkpoint_dir;  // defaults to <out_dir>/checkpoints
  std::string dataset_path;    // defaults to <out_dir>/boat_dataset.sfqd

  static Paths with_defaults(std::string out, std::string ckpt = "", std::string data = "");
};

void cmd_gen_data(const config::RunConfig& cfg, const Paths& paths);

enum class Phase { kCritics, kFlow, kActor, kAll };
Phase parse_phase(const std::string& name);

// Runs the requested phase(s). Phases are strictly ordered: each one refuses
// to run while an earlier phase's checkpoint is missing. `all` resumes,
// skipping phases whose checkpoints already exist.
void cmd_train(const config::RunConfig& cfg, Phase phase, const Paths& paths);

// Writes <out>/calibration.json. Returns the report; an unachievable
// (epsilon_s, beta_s, N_s) combination is reported and then signalled with
// InfeasibleError after the report is on disk.
conformal::CalibrationReport cmd_calibrate(const config::RunConfig& cfg, const Paths& paths);

enum class EvalMode { kSafeFql, kRejection, kRandom, kZero };
EvalMode parse_eval_mode(const std::string& name);
std::string eval_mode_name(EvalMode mode);

struct EpisodeResult {
  Vec2 x0 = Vec2::Zero();
  double cumulative_reward = 0.0;
  int violations = 0;
  double max_ell = 0.0;
};

struct EvalReport {
  EvalMode mode = EvalMode::kSafeFql;
  int n_episodes = 0;
  int rejection_n = 0;             // rejection mode only
  std::uint64_t seed = 0;
  std::string init_set;            // "calibrated" or "safe_margin"
  double delta_star_used = 0.0;
  double mean_reward = 0.0;
  int total_violations = 0;
  double safety_rate_pct = 0.0;    // % episodes with zero violations
  double mean_max_ell = 0.0;
  std::optional<double> mean_action_latency_us;  // only with eval.timing
  std::vector<EpisodeResult> episodes;
};

// Evaluates one policy mode over eval.n_episodes paired initial states and
// writes <out>/eval_<mode>.json plus a per-episode CSV. A `delta_override`
// restricts the initial set to {V_c < delta_override} instead of the
// calibration report's level.
EvalReport cmd_eval(const config::RunConfig& cfg, EvalMode mode, const Paths& paths,
                    std::optional<double> delta_override = std::nullopt);

struct BenchReport {
  int n_calls = 0;
  double one_step_us = 0.0;                 // median per-action latency
  double flow_k_us = 0.0;                   // K-step flow integration
  int flow_k = 0;
  std::map<int, double> rejection_us;       // per configured N
  double flow_over_one_step = 0.0;
  std::map<int, double> rejection_over_n1;  // vs the N=1 entry
};

BenchReport cmd_bench(const config::RunConfig& cfg, const Paths& paths);

struct OracleReport {
  int iterations = 0;
  double final_residual = 0.0;
  double feasible_area_fraction = 0.0;  // grid cells with value < 0
  std::optional<oracle::Agreement> agreement;  // present when critics exist
};

OracleReport cmd_oracle(const config::RunConfig& cfg, const Paths& paths);

}  // namespace safefql::pipeline
