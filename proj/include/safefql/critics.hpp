// Phase-1 critics: expectile-regressed reward critics and max-backup safety
// critics with twin Q networks and EMA targets, trained from the offline
// dataset only (no policy queries).
#pragma once

#include "safefql/boat_env.hpp"
#include "safefql/mlp.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace safefql::critics {

// L_tau(u) = |tau - 1(u < 0)| u^2.
inline double expectile_loss(double u, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("expectile_loss: tau in (0,1)");
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

// y_r = r + gamma * Vbar_r(x').
inline double reward_q_target(double r, double v_bar_next, double gamma) {
  return r + gamma * v_bar_next;
}

// y_c = max{ l(x), gamma * Vbar_c(x') }.
inline double safety_q_target(double ell, double v_bar_c_next, double gamma) {
  return std::max(ell, gamma * v_bar_c_next);
}

// Twin aggregation. Safety takes the max (most pessimistic feasibility
// estimate), reward takes the min.
inline double pessimistic_safety_next_value(double q1, double q2) { return std::max(q1, q2); }
inline double optimistic_reward_next_value(double q1, double q2) { return std::min(q1, q2); }

enum class NextActionFallback {
  kBehavior,  // fresh uniform-disk action (the data-collection policy)
  kSelf,      // reuse the transition's own action
};

// Source of the bootstrapped next-state safety value in y_c.
//   kValueNet: EMA copy of the lower-expectile V_c network (mirrors the
//     reward side, where y_r reads the EMA V_r network). Default: the
//     expectile read is what keeps clearly-safe regions strictly negative,
//     which the feasibility gate needs.
//   kTwinNextAction: EMA twin-max Q_c at (x', a') with a' taken from the
//     dataset's next transition (fallback per NextActionFallback). Kept as
//     an alternative; it equilibrates safe regions at ~0 from above, which
//     starves the gate.
enum class SafetyBootstrap { kValueNet, kTwinNextAction };

struct CriticConfig {
  std::vector<int> hidden{256, 256};
  double lr = 3e-4;
  double gamma = 0.99;
  double tau = 0.9;
  double ema_rate = 0.005;
  int batch_size = 256;
  std::int64_t steps = 500000;
  bool reward_twins = true;
  NextActionFallback fallback = NextActionFallback::kBehavior;
  SafetyBootstrap safety_bootstrap = SafetyBootstrap::kValueNet;
  std::uint64_t seed = 0;
  int log_every = 1000;
};

// The four critics (reward Q/V, twin safety Q, safety V) plus their EMA
// targets, which live inside each ParamSet.
struct CriticBundle {
  nn::ParamSetF q_r1, q_r2;  // state||action -> scalar
  nn::ParamSetF v_r;         // state -> scalar
  nn::ParamSetF q_c1, q_c2;  // state||action -> scalar
  nn::ParamSetF v_c;         // state -> scalar
  double gamma = 0.99;
  double tau = 0.9;
  double ema_rate = 0.005;
  bool reward_twins = true;
  SafetyBootstrap safety_bootstrap = SafetyBootstrap::kValueNet;
};

CriticBundle make_bundle(const CriticConfig& cfg);

// Online-weight value reads used at deployment / evaluation time.
double q_r_value(const CriticBundle& b, const Vec2& x, const Vec2& a);   // twin min
double q_c_value(const CriticBundle& b, const Vec2& x, const Vec2& a);   // twin max
double v_c_value(const CriticBundle& b, const Vec2& x);
double v_r_value(const CriticBundle& b, const Vec2& x);

struct CriticLosses {
  double l_vr = 0.0;
  double l_qr = 0.0;
  double l_qc = 0.0;
  double l_vc = 0.0;
};

// A minibatch view with the next-step actions already resolved.
struct Batch {
  Eigen::MatrixXf states;        // 2 x B
  Eigen::MatrixXf actions;       // 2 x B
  Eigen::VectorXf rewards;       // B
  Eigen::VectorXf safeties;      // B
  Eigen::MatrixXf next_states;   // 2 x B
  Eigen::MatrixXf next_actions;  // 2 x B
  Eigen::Index size() const { return states.cols(); }
};

Batch assemble_batch(const env::TrajectoryDataset& ds, const std::vector<std::size_t>& idx,
                     NextActionFallback fallback, Rng& rng);

// All four losses on a batch, evaluated without touching any parameters.
// Target reads (y_r, y_c and the Q reads regressed by V_r / V_c) use the EMA
// copies only. V_c uses the mirrored expectile so it tracks the lower
// quantile of the safety residual with the same tau knob.
CriticLosses critic_losses(const Batch& batch, const CriticBundle& bundle);

struct TrainCallbacks {
  // Called every log_every steps with the running losses.
  std::function<void(std::int64_t step, const CriticLosses&)> on_log;
};

CriticBundle train_critics(const env::TrajectoryDataset& ds, const CriticConfig& cfg,
                           const std::string& metrics_csv_path = "",
                           const TrainCallbacks& callbacks = {});

// Checkpoint set: q_r1 q_r2 v_r q_c1 q_c2 v_c + a JSON header.
void save_bundle(const CriticBundle& b, const std::string& dir);
CriticBundle load_bundle(const std::string& dir);
bool bundle_exists(const std::string& dir);

}  // namespace safefql::critics
