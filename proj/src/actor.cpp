#include "safefql/actor.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <limits>

namespace safefql::actor {

namespace {

using Eigen::Index;
using Eigen::MatrixXf;
using Eigen::VectorXf;
using nn::ForwardTrace;
using nn::GradientsF;
using nn::ParamSetF;

MatrixXf vstack(const MatrixXf& top, const MatrixXf& bottom) {
  MatrixXf out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

// Batched teacher target: the raw single Euler step (or the full K-step
// integral) of the velocity field. The target is left unprojected: the
// radial projection is a deployment-side map, it is 1-Lipschitz, and
// regressing the smooth pre-projection output transfers to the deployed
// action anyway. Constant w.r.t. the actor.
MatrixXf teacher_targets(const flow::FlowTeacher& teacher, const MatrixXf& states,
                         const MatrixXf& latents, bool full_flow) {
  const Index B = states.cols();
  const int k_steps = full_flow ? teacher.k_steps : 1;
  MatrixXf y = latents;
  MatrixXf input(5, B);
  input.topRows(2) = states;
  const float h = 1.0f / static_cast<float>(k_steps);
  for (int k = 0; k < k_steps; ++k) {
    input.middleRows(2, 2) = y;
    input.row(4).setConstant(static_cast<float>(k) * h);
    y += h * nn::mlp_forward_batch<float>(teacher.net, input);
  }
  return y;
}

}  // namespace

Vec2 student_action(const OneStepActor& a, const Vec2& x, const Vec2& z) {
  Eigen::VectorXf in(4);
  in << static_cast<float>(x.x()), static_cast<float>(x.y()), static_cast<float>(z.x()),
      static_cast<float>(z.y());
  const Eigen::VectorXf out = nn::mlp_forward<float>(a.net, in);
  return {static_cast<double>(out(0)), static_cast<double>(out(1))};
}

Vec2 deployed_action(const OneStepActor& a, const Vec2& x, const Vec2& z) {
  return project_to_disk(student_action(a, x, z));
}

Vec2 deploy_action(const OneStepActor& a, const Vec2& x, Rng& rng) {
  const auto [z1, z2] = rng.normal2();
  return deployed_action(a, x, Vec2{z1, z2});
}

double actor_loss_and_grad(const MatrixXf& states, const MatrixXf& latents,
                           const OneStepActor& a, const critics::CriticBundle& crit,
                           const flow::FlowTeacher& teacher, const ActorLossOptions& options,
                           GradientsF* grads, ActorStats* stats) {
  const Objective objective = options.objective;
  const Index B = states.cols();
  if (B == 0) throw ConfigError("actor loss: empty batch");
  const float inv_b = 1.0f / static_cast<float>(B);

  const MatrixXf targets = teacher_targets(teacher, states, latents, options.distill_full_flow);

  ForwardTrace<float> actor_trace;
  const MatrixXf& actions =
      nn::mlp_forward_trace(a.net, vstack(states, latents), actor_trace);

  const MatrixXf sa = vstack(states, actions);

  // Safety critic twins at (x, a_w); the gate uses the pessimistic max.
  ForwardTrace<float> qc1_trace, qc2_trace;
  const VectorXf qc1 =
      nn::mlp_forward_trace(crit.q_c1, sa, qc1_trace).row(0).transpose();
  const VectorXf qc2 =
      nn::mlp_forward_trace(crit.q_c2, sa, qc2_trace).row(0).transpose();

  // Reward critic (twin min where twins are on).
  ForwardTrace<float> qr1_trace, qr2_trace;
  const VectorXf qr1 =
      nn::mlp_forward_trace(crit.q_r1, sa, qr1_trace).row(0).transpose();
  VectorXf qr2;
  if (crit.reward_twins)
    qr2 = nn::mlp_forward_trace(crit.q_r2, sa, qr2_trace).row(0).transpose();

  // Batch-mean |Q| scales (stop-gradient), applied when normalize_q is on.
  double r_scale = 1.0, c_scale = 1.0;
  if (options.normalize_q) {
    double r_abs = 0.0, c_abs = 0.0;
    for (Index j = 0; j < B; ++j) {
      r_abs += std::abs(crit.reward_twins
                            ? critics::optimistic_reward_next_value(qr1(j), qr2(j))
                            : double(qr1(j)));
      c_abs += std::abs(critics::pessimistic_safety_next_value(qc1(j), qc2(j)));
    }
    r_scale = std::max(r_abs / B, 1e-3);
    c_scale = std::max(c_abs / B, 1e-3);
  }

  const MatrixXf diff = actions - targets;
  double distill_acc = 0.0, reward_acc = 0.0, safety_acc = 0.0;
  std::int64_t open_count = 0, exclusive = 0;

  // Per-sample upstream coefficients for the critic input-gradients.
  VectorXf u_qc1 = VectorXf::Zero(B), u_qc2 = VectorXf::Zero(B);
  VectorXf u_qr1 = VectorXf::Zero(B), u_qr2 = VectorXf::Zero(B);

  for (Index j = 0; j < B; ++j) {
    const double q_c = critics::pessimistic_safety_next_value(qc1(j), qc2(j));
    const double q_r =
        crit.reward_twins ? critics::optimistic_reward_next_value(qr1(j), qr2(j)) : double(qr1(j));
    const int zeta = feasibility_gate(q_c);
    const double hinge = std::max(0.0, q_c);
    distill_acc += static_cast<double>(diff.col(j).squaredNorm());

    double reward_coeff = 0.0, safety_coeff = 0.0;
    if (objective == Objective::kGated) {
      reward_coeff = static_cast<double>(zeta) / r_scale;
      safety_coeff = static_cast<double>(1 - zeta) / c_scale;
    } else {
      reward_coeff = 1.0 / r_scale;
      safety_coeff = a.eta / c_scale;
    }
    reward_acc += reward_coeff * -q_r;
    safety_acc += safety_coeff * hinge;
    if ((reward_coeff != 0.0) + (safety_coeff != 0.0) == 1) ++exclusive;
    open_count += zeta;

    // -coeff * dQ_r/da through the selected head.
    if (reward_coeff != 0.0) {
      const float c = static_cast<float>(reward_coeff) * -inv_b;
      if (crit.reward_twins && qr2(j) < qr1(j))
        u_qr2(j) = c;
      else
        u_qr1(j) = c;
    }
    // +coeff * dQ_c/da through the max head while the hinge is active.
    if (safety_coeff != 0.0 && q_c > 0.0) {
      const float c = static_cast<float>(safety_coeff) * inv_b;
      if (qc2(j) > qc1(j))
        u_qc2(j) = c;
      else
        u_qc1(j) = c;
    }
  }

  const double loss =
      a.lambda * distill_acc / B + reward_acc / B + safety_acc / B;

  if (stats) {
    stats->loss = loss;
    stats->distill = distill_acc / B;
    stats->reward_term = reward_acc / B;
    stats->safety_term = safety_acc / B;
    stats->gate_open_fraction = static_cast<double>(open_count) / B;
    stats->samples_seen += B;
    stats->exclusive_samples += objective == Objective::kGated ? exclusive : 0;
  }

  if (grads) {
    MatrixXf d_actions =
        (2.0f * static_cast<float>(a.lambda) * inv_b) * diff;

    auto add_action_grad = [&](const ParamSetF& net, const ForwardTrace<float>& trace,
                               const VectorXf& coeffs) {
      if ((coeffs.array() != 0.0f).any()) {
        MatrixXf upstream = coeffs.transpose();
        const MatrixXf in_grad = nn::mlp_backward<float>(net, trace, upstream, nullptr);
        d_actions += in_grad.bottomRows(2);
      }
    };
    add_action_grad(crit.q_r1, qr1_trace, u_qr1);
    if (crit.reward_twins) add_action_grad(crit.q_r2, qr2_trace, u_qr2);
    add_action_grad(crit.q_c1, qc1_trace, u_qc1);
    add_action_grad(crit.q_c2, qc2_trace, u_qc2);

    nn::mlp_backward(a.net, actor_trace, d_actions, grads);
  }
  return loss;
}

OneStepActor train_actor(const env::TrajectoryDataset& ds, const critics::CriticBundle& crit,
                         const flow::FlowTeacher& teacher, const ActorConfig& cfg,
                         const std::string& metrics_csv_path, ActorStats* accumulated) {
  if (ds.transitions.empty()) throw ConfigError("train_actor: empty dataset");
  OneStepActor a;
  a.lambda = cfg.lambda;
  a.eta = cfg.eta;
  a.net = nn::mlp_init<float>(nn::LayerSpec{4, cfg.hidden, 2}, derive_seed(cfg.seed, 21));
  Rng rng(derive_seed(cfg.seed, 0xac7a));

  std::ofstream csv;
  if (!metrics_csv_path.empty()) {
    csv.open(metrics_csv_path);
    if (!csv) throw IoError("cannot open " + metrics_csv_path);
    csv << "step,gate_open_fraction,distill_loss,reward_term,safety_term\n";
  }

  MatrixXf states(2, cfg.batch_size), latents(2, cfg.batch_size);
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    for (int j = 0; j < cfg.batch_size; ++j) {
      const env::Transition& tr = ds.transitions[rng.index(ds.transitions.size())];
      states.col(j) = tr.state;
      const auto [z1, z2] = rng.normal2();
      latents(0, j) = static_cast<float>(z1);
      latents(1, j) = static_cast<float>(z2);
    }
    ActorStats stats;
    GradientsF grads;
    ActorLossOptions options;
    options.objective = cfg.objective;
    options.distill_full_flow = cfg.distill_full_flow;
    options.normalize_q = cfg.normalize_q;
    const double loss =
        actor_loss_and_grad(states, latents, a, crit, teacher, options, &grads, &stats);
    if (!std::isfinite(loss))
      throw NumericError("train_actor: non-finite loss at step " + std::to_string(step));
    nn::adam_step(a.net, grads, cfg.lr);
    nn::ema_update(a.net, 0.005);

    if (accumulated) {
      accumulated->samples_seen += stats.samples_seen;
      accumulated->exclusive_samples += stats.exclusive_samples;
    }
    if (csv.is_open() && (step % cfg.log_every == 0 || step == cfg.steps))
      csv << step << "," << stats.gate_open_fraction << "," << stats.distill << ","
          << stats.reward_term << "," << stats.safety_term << "\n";
  }
  return a;
}

Vec2 rejection_sampling_action(const flow::FlowTeacher& teacher,
                               const critics::CriticBundle& crit, const Vec2& x, int n,
                               double delta, Rng& rng) {
  if (n < 1) throw ConfigError("rejection_sampling_action: n >= 1");
  Vec2 best_feasible = Vec2::Zero(), safest = Vec2::Zero();
  double best_qr = -std::numeric_limits<double>::infinity();
  double min_qc = std::numeric_limits<double>::infinity();
  bool any_feasible = false;
  Eigen::VectorXf in(4);
  in(0) = static_cast<float>(x.x());
  in(1) = static_cast<float>(x.y());
  for (int i = 0; i < n; ++i) {
    const auto [z1, z2] = rng.normal2();
    const Vec2 cand = flow::integrate_flow(teacher, x, Vec2{z1, z2});
    in(2) = static_cast<float>(cand.x());
    in(3) = static_cast<float>(cand.y());
    const double qc =
        critics::pessimistic_safety_next_value(nn::mlp_forward<float>(crit.q_c1, in)(0),
                                      nn::mlp_forward<float>(crit.q_c2, in)(0));
    const double qr = nn::mlp_forward<float>(crit.q_r1, in)(0);
    if (qc < min_qc) {
      min_qc = qc;
      safest = cand;
    }
    if (qc < delta && qr > best_qr) {
      best_qr = qr;
      best_feasible = cand;
      any_feasible = true;
    }
  }
  return any_feasible ? best_feasible : safest;
}

void save_actor(const OneStepActor& a, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nn::save_params(a.net, dir + "/actor.sfql");
  nlohmann::json meta;
  meta["lambda"] = a.lambda;
  meta["eta"] = a.eta;
  meta["input_dim"] = a.net.spec.input_dim;
  meta["hidden"] = a.net.spec.hidden;
  meta["output_dim"] = a.net.spec.output_dim;
  std::ofstream out(dir + "/actor.json");
  if (!out) throw IoError("cannot open " + dir + "/actor.json");
  out << meta.dump(2) << "\n";
}

bool actor_exists(const std::string& dir) {
  return std::filesystem::exists(dir + "/actor.json");
}

OneStepActor load_actor(const std::string& dir) {
  if (!actor_exists(dir))
    throw OrderingError("actor checkpoint missing in " + dir + " (run `train actor` first)");
  OneStepActor a;
  a.net = nn::load_params<float>(dir + "/actor.sfql");
  std::ifstream in(dir + "/actor.json");
  nlohmann::json meta = nlohmann::json::parse(in);
  a.lambda = meta.at("lambda").get<double>();
  a.eta = meta.at("eta").get<double>();
  return a;
}

}  // namespace safefql::actor
