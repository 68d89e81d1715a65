// Phase-4 safety verification: rollout-based conformal scores, binomial-tail
// confidence computation, and the delta-level search producing a calibrated
// safe set. Works on abstract value/score functions so synthetic coverage
// studies and the boat pipeline share one code path.
#pragma once

#include "safefql/actor.hpp"
#include "safefql/boat_env.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace safefql::conformal {

// Partial binomial sum  sum_{i=0}^{l-1} C(n, i) eps^i (1-eps)^(n-i),
// evaluated in log space. The empty sum (l = 0) is 0.
double binomial_tail(int n, int l, double eps);

// Smallest eps with binomial_tail(n, l, eps) <= beta, by bisection to
// absolute tolerance 1e-9 (the tail is strictly decreasing in eps).
double min_epsilon(int n, int l, double beta);

// Split-conformal order-statistic quantile: the ceil((n+1)(1-alpha))-th
// smallest score, clamped to the valid index range.
double conformal_quantile(std::vector<double> scores, double alpha);

struct CalibrationConfig {
  double epsilon_s = 0.05;
  double beta_s = 0.05;
  int n_samples = 500;        // N_s
  int n_levels = 20;          // M
  int rollout_horizon = 400;
  double dt = 0.005;
  int rollouts_per_state = 1;
  std::uint64_t seed = 0;
  std::uint64_t max_proposals = 1000000;  // rejection-sampling cap for S_0
};

struct LevelRow {
  double delta = 0.0;
  int k = 0;              // violations with V_c < delta
  double alpha = 0.0;     // (k+1)/(N_s+1)
  int l = 0;              // floor((N_s+1) alpha)
  double achieved_eps = 0.0;
  bool pass = false;
};

struct CalibrationReport {
  bool feasible = false;
  double delta_star = 0.0;
  double delta_0 = 0.0;
  double quantile = 0.0;           // max non-positive score inside S_{delta*}
  double min_achievable_eps = 0.0; // min_epsilon at k = 0
  double epsilon_s = 0.0;
  double beta_s = 0.0;
  int n_samples = 0;
  int violation_count = 0;         // violations among the N_s base samples
  std::vector<double> scores;      // per-sample policy safety scores
  std::vector<double> vc_values;   // per-sample V_c
  std::vector<LevelRow> levels;
};

using ValueFn = std::function<double(const Vec2&)>;
using ScoreFn = std::function<double(const Vec2&, Rng&)>;
using StateSampler = std::function<Vec2(Rng&)>;

// Algorithm: draw N_s states from {x : V_c(x) < 0} by rejection from the
// sampler, score them, then sweep M uniform delta levels in [delta_0, 0]
// upward and return the largest level whose achieved epsilon passes.
// Throws InfeasibleError if the sub-zero level set cannot be sampled; an
// unachievable (epsilon_s, beta_s) pair is reported via feasible = false.
CalibrationReport calibrate_delta(const ValueFn& v_c, const ScoreFn& score,
                                  const StateSampler& sampler, const CalibrationConfig& cfg);

// V_c^pi estimate for the deployed actor: max_t l(x_t) along a rollout of
// rollout_horizon steps from x (z resampled each step), averaged over
// rollouts_per_state rollouts of the max when that is > 1.
double policy_safety_score(const actor::OneStepActor& a, const Vec2& x, int horizon, double dt,
                           int rollouts, Rng& rng);

// Boat-pipeline instantiation: V_c from the critic bundle, scores from
// deployed-actor rollouts, states from uniform-over-X rejection.
CalibrationReport calibrate_boat(const actor::OneStepActor& a,
                                 const critics::CriticBundle& crit,
                                 const CalibrationConfig& cfg);

void save_report(const CalibrationReport& r, const std::string& path);
CalibrationReport load_report(const std::string& path);

}  // namespace safefql::conformal
