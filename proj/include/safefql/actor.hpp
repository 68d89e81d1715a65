// Phase-3 one-step student actor: feasibility-gated objective, naive
// Lagrangian ablation, deployment-time action selection and the
// rejection-sampling baseline mode.
#pragma once

#include "safefql/critics.hpp"
#include "safefql/flow.hpp"
#include "safefql/mlp.hpp"

#include <cstdint>
#include <string>

namespace safefql::actor {

struct OneStepActor {
  nn::ParamSetF net;   // state || z -> action
  double lambda = 1.0;
  double eta = 5.0;    // naive-Lagrangian multiplier; unused in gated mode
};

// zeta = 1 iff Q_c < 0 (strict; the boundary counts as infeasible).
inline int feasibility_gate(double q_c_value) { return q_c_value < 0.0 ? 1 : 0; }

// Raw network output; deterministic in (x, z), no projection.
Vec2 student_action(const OneStepActor& a, const Vec2& x, const Vec2& z);

// Deployment map: one forward pass, then radial projection onto the disk.
Vec2 deployed_action(const OneStepActor& a, const Vec2& x, const Vec2& z);

// Samples z ~ N(0, I) and applies the deployment map. No critic or teacher
// evaluation happens here.
Vec2 deploy_action(const OneStepActor& a, const Vec2& x, Rng& rng);

enum class Objective { kGated, kNaive };

// Options for the combined actor objective. `normalize_q` rescales each
// critic term by the batch mean of |Q| (stop-gradient), the convention of
// the flow-QL implementation this method builds on; it makes the critic
// gradient scales comparable across reward ranges. Off by default so the
// plain loss formula (and its pinned examples) stay exact.
struct ActorLossOptions {
  Objective objective = Objective::kGated;
  bool distill_full_flow = false;
  bool normalize_q = false;
};

struct ActorStats {
  double loss = 0.0;
  double distill = 0.0;       // mean ||a_w - teacher||^2
  double reward_term = 0.0;   // mean zeta * (-Q_r)
  double safety_term = 0.0;   // mean (1 - zeta) * max(0, Q_c)
  double gate_open_fraction = 0.0;
  std::int64_t samples_seen = 0;
  std::int64_t exclusive_samples = 0;  // samples where exactly one branch was active
};

// Loss (and optionally actor-parameter gradients) of the combined objective
// on an explicit batch of states and latents. Critics and teacher are
// frozen; the gate is a constant during differentiation. Exposed at this
// granularity so tests can probe it directly.
double actor_loss_and_grad(const Eigen::MatrixXf& states, const Eigen::MatrixXf& latents,
                           const OneStepActor& a, const critics::CriticBundle& crit,
                           const flow::FlowTeacher& teacher, const ActorLossOptions& options,
                           nn::GradientsF* grads, ActorStats* stats);

struct ActorConfig {
  std::vector<int> hidden{256, 256, 256};
  double lr = 3e-4;
  double lambda = 1.0;
  double eta = 5.0;
  Objective objective = Objective::kGated;
  bool distill_full_flow = false;  // default distills the single-step teacher
  bool normalize_q = false;
  int batch_size = 256;
  std::int64_t steps = 500000;
  std::uint64_t seed = 0;
  int log_every = 1000;
};

OneStepActor train_actor(const env::TrajectoryDataset& ds, const critics::CriticBundle& crit,
                         const flow::FlowTeacher& teacher, const ActorConfig& cfg,
                         const std::string& metrics_csv_path = "",
                         ActorStats* accumulated = nullptr);

// Draws n candidates from the K-step flow teacher; among candidates with
// pessimistic Q_c < delta returns the one with the best reward estimate,
// otherwise the candidate minimizing Q_c. Reward ranking uses the primary
// reward head (3 critic forwards per candidate).
Vec2 rejection_sampling_action(const flow::FlowTeacher& teacher,
                               const critics::CriticBundle& crit, const Vec2& x, int n,
                               double delta, Rng& rng);

void save_actor(const OneStepActor& a, const std::string& dir);
OneStepActor load_actor(const std::string& dir);
bool actor_exists(const std::string& dir);

}  // namespace safefql::actor
