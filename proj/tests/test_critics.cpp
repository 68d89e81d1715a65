#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "safefql/critics.hpp"
#include "test_util.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace safefql;
using namespace safefql::critics;

namespace {

// Single-transition dataset with hand-pinned numbers.
env::TrajectoryDataset one_transition(float r, float ell) {
  env::TrajectoryDataset ds;
  ds.n_traj = 1;
  ds.horizon = 1;
  ds.dt = 0.005;
  env::Transition tr;
  tr.state = {0.2f, -0.1f};
  tr.action = {0.5f, 0.0f};
  tr.reward = r;
  tr.safety = ell;
  tr.next_state = {0.21f, -0.1f};
  ds.transitions.push_back(tr);
  return ds;
}

// Bundle whose six networks output fixed constants; EMA copies can be set
// to different constants to exercise target isolation.
struct ConstantBundle {
  CriticBundle b;
  ConstantBundle(float qr1, float qr2, float vr, float qc1, float qc2, float vc) {
    b.q_r1 = testutil::constant_net(4, {qr1});
    b.q_r2 = testutil::constant_net(4, {qr2});
    b.v_r = testutil::constant_net(2, {vr});
    b.q_c1 = testutil::constant_net(4, {qc1});
    b.q_c2 = testutil::constant_net(4, {qc2});
    b.v_c = testutil::constant_net(2, {vc});
    b.gamma = 0.99;
    b.tau = 0.9;
    b.reward_twins = true;
  }
  // Sets the EMA output of one net; the online output stays.
  static void set_ema_output(nn::ParamSetF& p, float value) {
    p.ema_w[1](0, 0) = value;
  }
};

}  // namespace

TEST_CASE("expectile loss is the asymmetric square") {
  CHECK(expectile_loss(2.0, 0.9) == doctest::Approx(3.6));
  CHECK(expectile_loss(-2.0, 0.9) == doctest::Approx(0.4));
  CHECK(expectile_loss(0.0, 0.9) == doctest::Approx(0.0));
  CHECK_THROWS_AS(expectile_loss(1.0, 1.5), ConfigError);
}

TEST_CASE("expectile asymmetry ratio is tau over 1 - tau") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double u = rng.uniform(0.01, 5.0);
    const double tau = rng.uniform(0.55, 0.95);
    CHECK(expectile_loss(u, tau) / expectile_loss(-u, tau) ==
          doctest::Approx(tau / (1.0 - tau)).epsilon(1e-9));
  }
}

TEST_CASE("reward target is the one-step Bellman value") {
  CHECK(reward_q_target(-0.1, -1.0, 0.99) == doctest::Approx(-1.09));
  CHECK(reward_q_target(0.7, -3.0, 0.0) == doctest::Approx(0.7));
  CHECK(reward_q_target(0.0, 0.0, 0.99) == doctest::Approx(0.0));
}

TEST_CASE("safety target is the max-backup value") {
  CHECK(safety_q_target(0.3, -0.5, 0.99) == doctest::Approx(0.3));
  CHECK(safety_q_target(-0.4, -0.2, 0.99) == doctest::Approx(-0.198));
  CHECK(safety_q_target(-0.4, 0.7, 0.99) == doctest::Approx(0.99 * 0.7));
  CHECK(safety_q_target(-0.4, 0.0, 0.99) == doctest::Approx(0.0));
}

TEST_CASE("max-backup monotonicity and lower bounds") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double ell = rng.uniform(-3.0, 1.0);
    const double v = rng.uniform(-3.0, 1.0);
    const double gamma = rng.uniform(0.5, 0.999);
    const double y = safety_q_target(ell, v, gamma);
    CHECK(y >= ell);
    CHECK(y >= gamma * v);
    // non-decreasing in both arguments
    CHECK(safety_q_target(ell + 0.1, v, gamma) >= y);
    CHECK(safety_q_target(ell, v + 0.1, gamma) >= y);
  }
}

TEST_CASE("twin aggregation picks the pessimistic side") {
  CHECK(pessimistic_safety_next_value(-0.3, -0.1) == doctest::Approx(-0.1));
  CHECK(pessimistic_safety_next_value(0.2, -0.5) == doctest::Approx(0.2));
  CHECK(pessimistic_safety_next_value(0.7, 0.7) == doctest::Approx(0.7));
  CHECK(optimistic_reward_next_value(1.0, 0.7) == doctest::Approx(0.7));
  CHECK(optimistic_reward_next_value(-2.0, -1.0) == doctest::Approx(-2.0));
  CHECK(optimistic_reward_next_value(0.4, 0.4) == doctest::Approx(0.4));
}

TEST_CASE("safety next-value never decreases when either twin increases") {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double q1 = rng.uniform(-2, 2), q2 = rng.uniform(-2, 2);
    const double bump = rng.uniform(0, 1);
    CHECK(pessimistic_safety_next_value(q1 + bump, q2) >=
          pessimistic_safety_next_value(q1, q2));
    CHECK(pessimistic_safety_next_value(q1, q2 + bump) >=
          pessimistic_safety_next_value(q1, q2));
  }
}

TEST_CASE("single-sample expectile loss example") {
  // Q_r = 1, V_r = 0, tau = 0.9 -> L_Vr = 0.9.
  ConstantBundle cb(1.0f, 1.0f, 0.0f, -0.5f, -0.5f, 0.0f);
  const auto ds = one_transition(-0.1f, -0.4f);
  Rng rng(1);
  const auto batch = assemble_batch(ds, {0}, NextActionFallback::kSelf, rng);
  const auto losses = critic_losses(batch, cb.b);
  CHECK(losses.l_vr == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("twins at the target zero the safety Bellman loss") {
  // y_c = max(-0.4, 0.99 * maxtwin(x',a')) with twins constant at c:
  // picking c so that y_c == c makes L_Qc = 0 exactly at c = 0.
  ConstantBundle cb(0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f);
  const auto ds = one_transition(-0.1f, -0.4f);
  Rng rng(1);
  const auto batch = assemble_batch(ds, {0}, NextActionFallback::kSelf, rng);
  const auto losses = critic_losses(batch, cb.b);
  CHECK(losses.l_qc == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("single-transition losses match the hand trace") {
  // Constants: online (qr1, qr2, vr, qc1, qc2, vc) = (1.2, 0.8, 0.3, -0.2,
  // 0.1, -0.05); EMA copies equal online here. Transition r = -0.1,
  // l = -0.4; gamma = 0.99, tau = 0.9.
  const double qr1 = 1.2, qr2 = 0.8, vr = 0.3, qc1 = -0.2, qc2 = 0.1, vc = -0.05;
  const double r = -0.1, ell = -0.4, gamma = 0.99, tau = 0.9;

  // Hand trace:
  const double q_r_bar = std::min(qr1, qr2);              // 0.8
  const double u_r = q_r_bar - vr;                        // 0.5
  const double l_vr = tau * u_r * u_r;                    // 0.225
  const double y_r = r + gamma * vr;                      // 0.197
  const double l_qr = 0.5 * ((qr1 - y_r) * (qr1 - y_r) + (qr2 - y_r) * (qr2 - y_r));
  // default bootstrap: the EMA copy of the lower-expectile V_c network
  const double y_c = std::max(ell, gamma * vc);           // max(-0.4, -0.0495)
  const double l_qc = 0.5 * ((qc1 - y_c) * (qc1 - y_c) + (qc2 - y_c) * (qc2 - y_c));
  const double u_c = std::max(qc1, qc2) - vc;             // 0.15 (> 0: weight 1 - tau)
  const double l_vc = (1.0 - tau) * u_c * u_c;

  ConstantBundle cb(static_cast<float>(qr1), static_cast<float>(qr2), static_cast<float>(vr),
                    static_cast<float>(qc1), static_cast<float>(qc2), static_cast<float>(vc));
  const auto ds = one_transition(static_cast<float>(r), static_cast<float>(ell));
  Rng rng(1);
  const auto batch = assemble_batch(ds, {0}, NextActionFallback::kSelf, rng);
  const auto losses = critic_losses(batch, cb.b);

  CHECK(std::abs(losses.l_vr - l_vr) < 1e-6);
  CHECK(std::abs(losses.l_qr - l_qr) < 1e-6);
  CHECK(std::abs(losses.l_qc - l_qc) < 1e-6);
  CHECK(std::abs(losses.l_vc - l_vc) < 1e-6);
}

TEST_CASE("twin-next-action bootstrap variant matches its formula") {
  ConstantBundle cb(1.0, 1.0, 0.3, -0.2, 0.1, -0.05);
  cb.b.safety_bootstrap = SafetyBootstrap::kTwinNextAction;
  const auto ds = one_transition(-0.1f, -0.4f);
  Rng rng(1);
  const auto batch = assemble_batch(ds, {0}, NextActionFallback::kSelf, rng);
  const auto losses = critic_losses(batch, cb.b);
  // y_c = max(-0.4, 0.99 * max(-0.2, 0.1)) = 0.099
  const double y_c = std::max(-0.4, 0.99 * 0.1);
  const double want = 0.5 * ((-0.2 - y_c) * (-0.2 - y_c) + (0.1 - y_c) * (0.1 - y_c));
  CHECK(std::abs(losses.l_qc - want) < 1e-6);
}

TEST_CASE("targets read the EMA copies only") {
  ConstantBundle cb(1.0f, 1.0f, 0.5f, -0.2f, -0.2f, 0.0f);
  const auto ds = one_transition(-0.1f, -0.4f);
  Rng rng(1);
  const auto batch = assemble_batch(ds, {0}, NextActionFallback::kSelf, rng);
  const auto base = critic_losses(batch, cb.b);

  SUBCASE("perturbing only EMA copies changes the y-values") {
    ConstantBundle cb2(1.0f, 1.0f, 0.5f, -0.2f, -0.2f, 0.0f);
    ConstantBundle::set_ema_output(cb2.b.v_r, -3.0f);   // y_r shifts
    ConstantBundle::set_ema_output(cb2.b.v_c, 0.9f);    // y_c shifts
    const auto moved = critic_losses(batch, cb2.b);
    CHECK(moved.l_qr != doctest::Approx(base.l_qr));
    CHECK(moved.l_qc != doctest::Approx(base.l_qc));
  }
  SUBCASE("perturbing only online copies leaves the y-values fixed") {
    ConstantBundle cb3(1.0f, 1.0f, 0.5f, -0.2f, -0.2f, 0.0f);
    // Online outputs move; EMA stays. The Q losses change only through the
    // online predictions, so the targets must be unchanged: check by
    // reading the loss of a net whose online output still equals the
    // original (v_r's target path) while others moved.
    cb3.b.q_r1.w[1](0, 0) = 5.0f;  // online q_r1 output
    cb3.b.q_c2.w[1](0, 0) = 5.0f;  // online q_c2 output
    const auto moved = critic_losses(batch, cb3.b);
    // l_vr regresses EMA q_r toward v_r: unchanged by online q moves.
    CHECK(moved.l_vr == doctest::Approx(base.l_vr));
    // l_vc regresses EMA q_c: unchanged as well.
    CHECK(moved.l_vc == doctest::Approx(base.l_vc));
  }
}

TEST_CASE("empty batch is a usage error") {
  ConstantBundle cb(0, 0, 0, 0, 0, 0);
  Batch batch;
  batch.states.resize(2, 0);
  CHECK_THROWS_AS(critic_losses(batch, cb.b), ConfigError);
  env::TrajectoryDataset ds;
  ds.n_traj = ds.horizon = 1;
  Rng rng(1);
  CHECK_THROWS_AS(assemble_batch(ds, {}, NextActionFallback::kSelf, rng), ConfigError);
}

TEST_CASE("constant dataset with gamma 0 drives Q_r to the reward") {
  // Single repeated transition, gamma = 0: the fixed point is Q_r = r.
  auto ds = one_transition(-0.1f, -0.4f);
  CriticConfig cfg;
  cfg.hidden = {16, 16};
  cfg.gamma = 1e-9;  // gamma = 0 limit (config requires gamma > 0)
  cfg.steps = 4000;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.seed = 7;
  cfg.log_every = 100000;
  const auto bundle = train_critics(ds, cfg);
  const double q = q_r_value(bundle, ds.transitions[0].state.cast<double>(),
                             ds.transitions[0].action.cast<double>());
  CHECK(std::abs(q - (-0.1)) < 1e-3);
}

TEST_CASE("all-infeasible dataset keeps Q_c at or above the margin") {
  // Every state carries l = c > 0; the max-backup fixed point is >= c.
  env::TrajectoryDataset ds;
  ds.n_traj = 1;
  ds.horizon = 32;
  ds.dt = 0.005;
  Rng gen(9);
  Vec2 x{-0.5, 0.5};
  const float c = 0.25f;
  for (int k = 0; k < 32; ++k) {
    env::Transition tr;
    const Vec2 a = gen.disk();
    tr.state = x.cast<float>();
    tr.action = a.cast<float>();
    tr.reward = 0.0f;
    tr.safety = c;
    tr.next_state = env::dynamics_step(x, a, ds.dt).cast<float>();
    ds.transitions.push_back(tr);
    x = tr.next_state.cast<double>();
  }
  CriticConfig cfg;
  cfg.hidden = {16, 16};
  cfg.steps = 4000;
  cfg.batch_size = 32;
  cfg.lr = 1e-3;
  cfg.seed = 11;
  cfg.log_every = 100000;
  const auto bundle = train_critics(ds, cfg);
  for (const auto& tr : ds.transitions) {
    const double qc =
        q_c_value(bundle, tr.state.cast<double>(), tr.action.cast<double>());
    CHECK(qc >= c - 0.02);
  }
}

TEST_CASE("training writes the metrics csv and is seed-deterministic") {
  const auto ds = env::generate_dataset(4, 32, 0.005, 21);
  CriticConfig cfg;
  cfg.hidden = {8, 8};
  cfg.steps = 200;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.log_every = 50;
  const std::string csv = "test_critic_metrics.csv";
  const auto b1 = train_critics(ds, cfg, csv);
  const auto b2 = train_critics(ds, cfg);
  CHECK(testutil::bitwise_equal(b1.q_c1, b2.q_c1));
  CHECK(testutil::bitwise_equal(b1.v_r, b2.v_r));

  std::ifstream in(csv);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,l_vr,l_qr,l_qc,l_vc");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 4);
  std::remove(csv.c_str());
}

TEST_CASE("bundle checkpoints roundtrip") {
  CriticConfig cfg;
  cfg.hidden = {8};
  cfg.seed = 1;
  auto b = make_bundle(cfg);
  const std::string dir = "test_critics_ckpt";
  save_bundle(b, dir);
  CHECK(bundle_exists(dir));
  const auto loaded = load_bundle(dir);
  CHECK(testutil::bitwise_equal(loaded.q_r1, b.q_r1));
  CHECK(testutil::bitwise_equal(loaded.v_c, b.v_c));
  CHECK(loaded.gamma == doctest::Approx(b.gamma));
  CHECK(loaded.reward_twins == b.reward_twins);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_bundle(dir), OrderingError);
}
