// Safe boat navigation task: drift dynamics, goal reward, signed safety
// margin, random-policy dataset generation and policy rollouts.
#pragma once

#include "safefql/common.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace safefql::env {

// State space X = [-3, 2] x [-2, 2].
inline constexpr double kX1Min = -3.0, kX1Max = 2.0;
inline constexpr double kX2Min = -2.0, kX2Max = 2.0;
inline const Vec2 kGoal{0.5, 0.0};
inline constexpr double kRewardScale = 0.1;
inline const Vec2 kObstacle1Center{-0.5, 0.5};
inline constexpr double kObstacle1Radius = 0.4;
inline const Vec2 kObstacle2Center{-1.0, -1.2};
inline constexpr double kObstacle2Radius = 0.5;

inline bool in_bounds(const Vec2& x) {
  return x.x() >= kX1Min && x.x() <= kX1Max && x.y() >= kX2Min && x.y() <= kX2Max;
}

// Euler step of the drift dynamics:
//   x1' = x1 + (a1 + 2 - 0.5 x2^2) dt,  x2' = x2 + a2 dt.
inline Vec2 dynamics_step(const Vec2& state, const Vec2& action, double dt) {
  if (!state.allFinite() || !action.allFinite() || !std::isfinite(dt))
    throw NumericError("dynamics_step: non-finite input");
  return {state.x() + (action.x() + 2.0 - 0.5 * state.y() * state.y()) * dt,
          state.y() + action.y() * dt};
}

// Dense step reward 0.1 * (-||x - goal||); zero only at the goal.
inline double reward(const Vec2& state) { return kRewardScale * -(state - kGoal).norm(); }

// Signed safety margin: positive inside an obstacle.
//   l(x) = max(0.4 - ||x - c1||, 0.5 - ||x - c2||)
inline double safety_margin(const Vec2& state) {
  const double m1 = kObstacle1Radius - (state - kObstacle1Center).norm();
  const double m2 = kObstacle2Radius - (state - kObstacle2Center).norm();
  return std::max(m1, m2);
}

inline bool in_failure_set(const Vec2& state) { return safety_margin(state) > 0.0; }

inline Vec2 sample_disk_action(Rng& rng) { return rng.disk(); }

inline Vec2 sample_uniform_state(Rng& rng) {
  return {rng.uniform(kX1Min, kX1Max), rng.uniform(kX2Min, kX2Max)};
}

// One offline tuple. Reward and safety are evaluated at `state` (the current
// state), matching the dataset convention (x, a, r(x), l(x), x').
struct Transition {
  Vec2f state;
  Vec2f action;
  float reward = 0.0f;
  float safety = 0.0f;
  Vec2f next_state;
};

struct TrajectoryDataset {
  std::vector<Transition> transitions;  // trajectory-major
  std::uint64_t n_traj = 0;
  std::uint64_t horizon = 0;
  double dt = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return transitions.size(); }

  // Index of the next transition within the same trajectory, or npos for the
  // final step of a trajectory.
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t next_in_trajectory(std::size_t i) const {
    return (i % horizon) + 1 < horizon ? i + 1 : npos;
  }
};

// Uniform initial states over X, uniform-disk actions, fixed horizon. States
// are not clamped during simulation; trajectories may exit X. Trajectories
// are generated from per-trajectory seed streams so the result is the same
// no matter how the work is split across threads.
TrajectoryDataset generate_dataset(std::uint64_t n_traj, std::uint64_t horizon, double dt,
                                   std::uint64_t seed);

struct Rollout {
  std::vector<Vec2> states;   // horizon + 1 entries
  std::vector<double> ells;   // safety margin per state
  double cumulative_reward = 0.0;  // sum of reward over all states
  int violations = 0;              // #states with l > 0
  double max_ell = 0.0;
  bool exited_bounds = false;
};

using Policy = std::function<Vec2(const Vec2&, Rng&)>;

// Fixed-horizon rollout; policy actions are projected onto the unit disk
// before stepping. Reward/violations/max-l are accumulated over all
// horizon + 1 visited states.
Rollout rollout(const Policy& policy, const Vec2& x0, int horizon, double dt, Rng& rng);

// --- dataset file -----------------------------------------------------------
//
// Binary "SFQD": magic, u16 version, u64 n_traj, u64 horizon, f64 dt,
// u64 seed, then float32 records [x1 x2 a1 a2 r l x1' x2'] trajectory-major.
// A JSON sidecar <path>.json mirrors the header.

inline constexpr std::uint16_t kDatasetVersion = 1;

void save_dataset(const TrajectoryDataset& ds, const std::string& path);
TrajectoryDataset load_dataset(const std::string& path);

}  // namespace safefql::env
