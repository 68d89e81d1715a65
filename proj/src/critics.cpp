#include "safefql/critics.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace safefql::critics {

namespace {

using Eigen::Index;
using Eigen::MatrixXf;
using Eigen::VectorXf;
using nn::ForwardTrace;
using nn::GradientsF;
using nn::ParamSetF;
using nn::Weights;

MatrixXf stack_state_action(const MatrixXf& s, const MatrixXf& a) {
  MatrixXf sa(s.rows() + a.rows(), s.cols());
  sa.topRows(s.rows()) = s;
  sa.bottomRows(a.rows()) = a;
  return sa;
}

VectorXf row_as_vector(const MatrixXf& m) { return m.row(0).transpose(); }

// Expectile weights for L_tau(u): tau where u >= 0, (1 - tau) below.
VectorXf expectile_weights(const VectorXf& u, float tau) {
  return (u.array() >= 0.0f).select(VectorXf::Constant(u.size(), tau),
                                    VectorXf::Constant(u.size(), 1.0f - tau));
}

// Mirrored convention for the safety residual: L_tau(-u).
VectorXf mirrored_expectile_weights(const VectorXf& u, float tau) {
  return (u.array() <= 0.0f).select(VectorXf::Constant(u.size(), tau),
                                    VectorXf::Constant(u.size(), 1.0f - tau));
}

double weighted_square_mean(const VectorXf& w, const VectorXf& u) {
  return (w.array().cast<double>() * u.array().cast<double>().square()).mean();
}

double square_mean(const VectorXf& u) { return u.array().cast<double>().square().mean(); }

}  // namespace

CriticBundle make_bundle(const CriticConfig& cfg) {
  nn::LayerSpec q_spec{4, cfg.hidden, 1};
  nn::LayerSpec v_spec{2, cfg.hidden, 1};
  CriticBundle b;
  b.q_r1 = nn::mlp_init<float>(q_spec, derive_seed(cfg.seed, 1));
  b.q_r2 = nn::mlp_init<float>(q_spec, derive_seed(cfg.seed, 2));
  b.v_r = nn::mlp_init<float>(v_spec, derive_seed(cfg.seed, 3));
  b.q_c1 = nn::mlp_init<float>(q_spec, derive_seed(cfg.seed, 4));
  b.q_c2 = nn::mlp_init<float>(q_spec, derive_seed(cfg.seed, 5));
  b.v_c = nn::mlp_init<float>(v_spec, derive_seed(cfg.seed, 6));
  b.gamma = cfg.gamma;
  b.tau = cfg.tau;
  b.ema_rate = cfg.ema_rate;
  b.reward_twins = cfg.reward_twins;
  b.safety_bootstrap = cfg.safety_bootstrap;
  if (!(b.gamma > 0.0 && b.gamma < 1.0)) throw ConfigError("critics: gamma in (0,1)");
  if (!(b.tau > 0.5 && b.tau < 1.0)) throw ConfigError("critics: tau in (0.5,1)");
  return b;
}

namespace {

Eigen::Vector4f sa_input(const Vec2& x, const Vec2& a) {
  Eigen::Vector4f in;
  in << static_cast<float>(x.x()), static_cast<float>(x.y()), static_cast<float>(a.x()),
      static_cast<float>(a.y());
  return in;
}

float scalar_forward(const ParamSetF& p, const Eigen::VectorXf& in,
                     Weights which = Weights::kOnline) {
  return nn::mlp_forward<float>(p, in, which)(0);
}

}  // namespace

double q_r_value(const CriticBundle& b, const Vec2& x, const Vec2& a) {
  const Eigen::VectorXf in = sa_input(x, a);
  const double q1 = scalar_forward(b.q_r1, in);
  if (!b.reward_twins) return q1;
  return optimistic_reward_next_value(q1, scalar_forward(b.q_r2, in));
}

double q_c_value(const CriticBundle& b, const Vec2& x, const Vec2& a) {
  const Eigen::VectorXf in = sa_input(x, a);
  return pessimistic_safety_next_value(scalar_forward(b.q_c1, in),
                                       scalar_forward(b.q_c2, in));
}

double v_c_value(const CriticBundle& b, const Vec2& x) {
  Eigen::VectorXf in(2);
  in << static_cast<float>(x.x()), static_cast<float>(x.y());
  return scalar_forward(b.v_c, in);
}

double v_r_value(const CriticBundle& b, const Vec2& x) {
  Eigen::VectorXf in(2);
  in << static_cast<float>(x.x()), static_cast<float>(x.y());
  return scalar_forward(b.v_r, in);
}

Batch assemble_batch(const env::TrajectoryDataset& ds, const std::vector<std::size_t>& idx,
                     NextActionFallback fallback, Rng& rng) {
  if (idx.empty()) throw ConfigError("assemble_batch: empty batch");
  const Index B = static_cast<Index>(idx.size());
  Batch b;
  b.states.resize(2, B);
  b.actions.resize(2, B);
  b.rewards.resize(B);
  b.safeties.resize(B);
  b.next_states.resize(2, B);
  b.next_actions.resize(2, B);
  for (Index j = 0; j < B; ++j) {
    const env::Transition& tr = ds.transitions[idx[j]];
    b.states.col(j) = tr.state;
    b.actions.col(j) = tr.action;
    b.rewards(j) = tr.reward;
    b.safeties(j) = tr.safety;
    b.next_states.col(j) = tr.next_state;
    const std::size_t nxt = ds.next_in_trajectory(idx[j]);
    if (nxt != env::TrajectoryDataset::npos) {
      b.next_actions.col(j) = ds.transitions[nxt].action;
    } else if (fallback == NextActionFallback::kBehavior) {
      b.next_actions.col(j) = rng.disk().cast<float>();
    } else {
      b.next_actions.col(j) = tr.action;
    }
  }
  return b;
}

namespace {

struct TargetReads {
  VectorXf q_r_bar;       // twin-min reward Q at (x, a), EMA weights
  VectorXf y_r;           // r + gamma * Vbar_r(x')
  VectorXf y_c;           // max{l, gamma * maxtwin Qbar_c(x', a')}
  VectorXf q_c_bar;       // twin-max safety Q at (x, a), EMA weights
};

TargetReads target_reads(const Batch& batch, const CriticBundle& b) {
  const MatrixXf sa = stack_state_action(batch.states, batch.actions);
  const MatrixXf sa_next = stack_state_action(batch.next_states, batch.next_actions);
  const float gamma = static_cast<float>(b.gamma);

  TargetReads t;
  VectorXf qr1 = row_as_vector(nn::mlp_forward_batch<float>(b.q_r1, sa, Weights::kTarget));
  if (b.reward_twins) {
    VectorXf qr2 = row_as_vector(nn::mlp_forward_batch<float>(b.q_r2, sa, Weights::kTarget));
    t.q_r_bar = qr1.cwiseMin(qr2);
  } else {
    t.q_r_bar = std::move(qr1);
  }

  const VectorXf v_r_next =
      row_as_vector(nn::mlp_forward_batch<float>(b.v_r, batch.next_states, Weights::kTarget));
  t.y_r = batch.rewards + gamma * v_r_next;

  if (b.safety_bootstrap == SafetyBootstrap::kValueNet) {
    const VectorXf v_c_next = row_as_vector(
        nn::mlp_forward_batch<float>(b.v_c, batch.next_states, Weights::kTarget));
    t.y_c = batch.safeties.cwiseMax(gamma * v_c_next);
  } else {
    const VectorXf qc1_next =
        row_as_vector(nn::mlp_forward_batch<float>(b.q_c1, sa_next, Weights::kTarget));
    const VectorXf qc2_next =
        row_as_vector(nn::mlp_forward_batch<float>(b.q_c2, sa_next, Weights::kTarget));
    t.y_c = batch.safeties.cwiseMax(gamma * qc1_next.cwiseMax(qc2_next));
  }

  const VectorXf qc1 = row_as_vector(nn::mlp_forward_batch<float>(b.q_c1, sa, Weights::kTarget));
  const VectorXf qc2 = row_as_vector(nn::mlp_forward_batch<float>(b.q_c2, sa, Weights::kTarget));
  t.q_c_bar = qc1.cwiseMax(qc2);
  return t;
}

}  // namespace

CriticLosses critic_losses(const Batch& batch, const CriticBundle& bundle) {
  if (batch.size() == 0) throw ConfigError("critic_losses: empty batch");
  const TargetReads t = target_reads(batch, bundle);
  const float tau = static_cast<float>(bundle.tau);
  CriticLosses out;

  const MatrixXf sa = stack_state_action(batch.states, batch.actions);

  const VectorXf v_r = row_as_vector(nn::mlp_forward_batch<float>(bundle.v_r, batch.states));
  const VectorXf u_r = t.q_r_bar - v_r;
  out.l_vr = weighted_square_mean(expectile_weights(u_r, tau), u_r);

  const VectorXf qr1 = row_as_vector(nn::mlp_forward_batch<float>(bundle.q_r1, sa));
  double l_qr = square_mean(qr1 - t.y_r);
  if (bundle.reward_twins) {
    const VectorXf qr2 = row_as_vector(nn::mlp_forward_batch<float>(bundle.q_r2, sa));
    l_qr = 0.5 * (l_qr + square_mean(qr2 - t.y_r));
  }
  out.l_qr = l_qr;

  const VectorXf qc1 = row_as_vector(nn::mlp_forward_batch<float>(bundle.q_c1, sa));
  const VectorXf qc2 = row_as_vector(nn::mlp_forward_batch<float>(bundle.q_c2, sa));
  out.l_qc = 0.5 * (square_mean(qc1 - t.y_c) + square_mean(qc2 - t.y_c));

  const VectorXf v_c = row_as_vector(nn::mlp_forward_batch<float>(bundle.v_c, batch.states));
  const VectorXf u_c = t.q_c_bar - v_c;
  out.l_vc = weighted_square_mean(mirrored_expectile_weights(u_c, tau), u_c);
  return out;
}

namespace {

// One regression update of a scalar-output net toward per-sample weighted
// targets: loss = mean_j coeff_j * (out_j - target_j)^2. Returns the loss.
double regress_step(ParamSetF& net, const MatrixXf& input, const VectorXf& target,
                    const VectorXf* coeff, double lr) {
  ForwardTrace<float> trace;
  const MatrixXf& out = nn::mlp_forward_trace(net, input, trace);
  const Index B = input.cols();
  const VectorXf residual = out.row(0).transpose() - target;
  double loss;
  MatrixXf upstream(1, B);
  if (coeff) {
    loss = weighted_square_mean(*coeff, residual);
    upstream.row(0) =
        (2.0f / static_cast<float>(B)) * (coeff->array() * residual.array()).transpose();
  } else {
    loss = square_mean(residual);
    upstream.row(0) = (2.0f / static_cast<float>(B)) * residual.transpose();
  }
  GradientsF grads;
  nn::mlp_backward(net, trace, upstream, &grads);
  nn::adam_step(net, grads, lr);
  return loss;
}

}  // namespace

CriticBundle train_critics(const env::TrajectoryDataset& ds, const CriticConfig& cfg,
                           const std::string& metrics_csv_path,
                           const TrainCallbacks& callbacks) {
  if (ds.transitions.empty()) throw ConfigError("train_critics: empty dataset");
  CriticBundle b = make_bundle(cfg);
  Rng rng(derive_seed(cfg.seed, 0xc817));

  std::ofstream csv;
  if (!metrics_csv_path.empty()) {
    csv.open(metrics_csv_path);
    if (!csv) throw IoError("cannot open " + metrics_csv_path);
    csv << "step,l_vr,l_qr,l_qc,l_vc\n";
  }

  const float tau = static_cast<float>(cfg.tau);
  std::vector<std::size_t> idx(cfg.batch_size);
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : idx) i = rng.index(ds.transitions.size());
    const Batch batch = assemble_batch(ds, idx, cfg.fallback, rng);
    const TargetReads t = target_reads(batch, b);
    const MatrixXf sa = stack_state_action(batch.states, batch.actions);

    CriticLosses losses;
    {
      // V_r: expectile regression of Qbar_r toward the upper quantile.
      ForwardTrace<float> trace;
      const MatrixXf& out = nn::mlp_forward_trace(b.v_r, batch.states, trace);
      const VectorXf u = t.q_r_bar - out.row(0).transpose();
      const VectorXf w = expectile_weights(u, tau);
      losses.l_vr = weighted_square_mean(w, u);
      MatrixXf upstream(1, batch.size());
      upstream.row(0) = (-2.0f / static_cast<float>(batch.size())) *
                        (w.array() * u.array()).transpose();
      GradientsF grads;
      nn::mlp_backward(b.v_r, trace, upstream, &grads);
      nn::adam_step(b.v_r, grads, cfg.lr);
    }
    losses.l_qr = regress_step(b.q_r1, sa, t.y_r, nullptr, cfg.lr);
    if (cfg.reward_twins)
      losses.l_qr = 0.5 * (losses.l_qr + regress_step(b.q_r2, sa, t.y_r, nullptr, cfg.lr));
    losses.l_qc = 0.5 * (regress_step(b.q_c1, sa, t.y_c, nullptr, cfg.lr) +
                         regress_step(b.q_c2, sa, t.y_c, nullptr, cfg.lr));
    {
      // V_c: mirrored expectile (lower quantile of the safety residual).
      ForwardTrace<float> trace;
      const MatrixXf& out = nn::mlp_forward_trace(b.v_c, batch.states, trace);
      const VectorXf u = t.q_c_bar - out.row(0).transpose();
      const VectorXf w = mirrored_expectile_weights(u, tau);
      losses.l_vc = weighted_square_mean(w, u);
      MatrixXf upstream(1, batch.size());
      upstream.row(0) = (-2.0f / static_cast<float>(batch.size())) *
                        (w.array() * u.array()).transpose();
      GradientsF grads;
      nn::mlp_backward(b.v_c, trace, upstream, &grads);
      nn::adam_step(b.v_c, grads, cfg.lr);
    }

    nn::ema_update(b.q_r1, cfg.ema_rate);
    if (cfg.reward_twins) nn::ema_update(b.q_r2, cfg.ema_rate);
    nn::ema_update(b.v_r, cfg.ema_rate);
    nn::ema_update(b.q_c1, cfg.ema_rate);
    nn::ema_update(b.q_c2, cfg.ema_rate);
    nn::ema_update(b.v_c, cfg.ema_rate);

    if (!std::isfinite(losses.l_vr) || !std::isfinite(losses.l_qr) ||
        !std::isfinite(losses.l_qc) || !std::isfinite(losses.l_vc))
      throw NumericError("train_critics: non-finite loss at step " + std::to_string(step) +
                         " (l_vr=" + std::to_string(losses.l_vr) +
                         " l_qr=" + std::to_string(losses.l_qr) +
                         " l_qc=" + std::to_string(losses.l_qc) +
                         " l_vc=" + std::to_string(losses.l_vc) + ")");

    if (step % cfg.log_every == 0 || step == cfg.steps) {
      if (csv.is_open())
        csv << step << "," << losses.l_vr << "," << losses.l_qr << "," << losses.l_qc << ","
            << losses.l_vc << "\n";
      if (callbacks.on_log) callbacks.on_log(step, losses);
    }
  }
  return b;
}

void save_bundle(const CriticBundle& b, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nn::save_params(b.q_r1, dir + "/critics_qr1.sfql");
  nn::save_params(b.q_r2, dir + "/critics_qr2.sfql");
  nn::save_params(b.v_r, dir + "/critics_vr.sfql");
  nn::save_params(b.q_c1, dir + "/critics_qc1.sfql");
  nn::save_params(b.q_c2, dir + "/critics_qc2.sfql");
  nn::save_params(b.v_c, dir + "/critics_vc.sfql");
  nlohmann::json meta;
  meta["gamma"] = b.gamma;
  meta["tau"] = b.tau;
  meta["ema_rate"] = b.ema_rate;
  meta["reward_twins"] = b.reward_twins;
  meta["safety_bootstrap"] =
      b.safety_bootstrap == SafetyBootstrap::kValueNet ? "value_net" : "twin_next_action";
  std::ofstream out(dir + "/critics.json");
  if (!out) throw IoError("cannot open " + dir + "/critics.json");
  out << meta.dump(2) << "\n";
}

bool bundle_exists(const std::string& dir) {
  return std::filesystem::exists(dir + "/critics.json");
}

CriticBundle load_bundle(const std::string& dir) {
  if (!bundle_exists(dir))
    throw OrderingError("critics checkpoint missing in " + dir + " (run `train critics` first)");
  CriticBundle b;
  b.q_r1 = nn::load_params<float>(dir + "/critics_qr1.sfql");
  b.q_r2 = nn::load_params<float>(dir + "/critics_qr2.sfql");
  b.v_r = nn::load_params<float>(dir + "/critics_vr.sfql");
  b.q_c1 = nn::load_params<float>(dir + "/critics_qc1.sfql");
  b.q_c2 = nn::load_params<float>(dir + "/critics_qc2.sfql");
  b.v_c = nn::load_params<float>(dir + "/critics_vc.sfql");
  std::ifstream in(dir + "/critics.json");
  if (!in) throw IoError("cannot open " + dir + "/critics.json");
  nlohmann::json meta = nlohmann::json::parse(in);
  b.gamma = meta.at("gamma").get<double>();
  b.tau = meta.at("tau").get<double>();
  b.ema_rate = meta.at("ema_rate").get<double>();
  b.reward_twins = meta.at("reward_twins").get<bool>();
  b.safety_bootstrap = meta.value("safety_bootstrap", "value_net") == std::string("value_net")
                           ? SafetyBootstrap::kValueNet
                           : SafetyBootstrap::kTwinNextAction;
  return b;
}

}  // namespace safefql::critics
