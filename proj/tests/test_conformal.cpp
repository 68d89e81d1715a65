#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "safefql/conformal.hpp"
#include "test_util.hpp"

#include <cmath>
#include <cstdio>

using namespace safefql;
using namespace safefql::conformal;

TEST_CASE("binomial tail on small cases") {
  // n=10, l=2, eps=0.1: 0.9^10 + 10 * 0.1 * 0.9^9
  const double expect = std::pow(0.9, 10) + 10.0 * 0.1 * std::pow(0.9, 9);
  CHECK(binomial_tail(10, 2, 0.1) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(binomial_tail(10, 2, 0.1) == doctest::Approx(0.73610).epsilon(1e-4));
  CHECK(binomial_tail(10, 0, 0.1) == 0.0);
  CHECK(binomial_tail(5, 3, 1e-12) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(binomial_tail(10, 11, 0.1), ConfigError);
  CHECK_THROWS_AS(binomial_tail(10, 2, 0.0), ConfigError);
}

TEST_CASE("binomial tail is stable in log space up to n = 1e5") {
  // Partial CDF of Binomial(1e5, 1e-3) up to 100 (the mean): close to 0.5.
  const double v = binomial_tail(100000, 101, 1e-3);
  CHECK(v > 0.4);
  CHECK(v < 0.6);
  CHECK(std::isfinite(binomial_tail(100000, 1, 0.5)));
}

TEST_CASE("binomial tail monotonicity") {
  // Strict away from double-precision saturation at 0 and 1.
  Rng rng(3);
  int strict_checks = 0;
  for (int i = 0; i < 400; ++i) {
    const int n = 2 + static_cast<int>(rng.index(200));
    const int l = 1 + static_cast<int>(rng.index(n));
    const double e1 = rng.uniform(0.01, 0.98);
    const double e2 = e1 + rng.uniform(0.001, 0.99 - e1);
    const double t1 = binomial_tail(n, l, e1);
    const double t2 = binomial_tail(n, l, e2);
    CHECK(t1 >= t2 - 1e-12);  // decreasing in eps (up to rounding)
    if (t1 < 1.0 - 1e-9 && t2 > 1e-12) {
      CHECK(t1 > t2);
      ++strict_checks;
    }
    if (l < n) {
      const double tl = binomial_tail(n, l + 1, e1);
      CHECK(tl >= t1 - 1e-12);  // increasing in l (up to rounding)
      if (tl < 1.0 - 1e-9 && t1 > 1e-12) CHECK(tl > t1);
    }
  }
  CHECK(strict_checks > 50);
}

TEST_CASE("min_epsilon closed forms") {
  // l = 1: (1 - eps)^n = beta  =>  eps = 1 - beta^(1/n)
  CHECK(min_epsilon(500, 1, 0.05) ==
        doctest::Approx(1.0 - std::pow(0.05, 1.0 / 500.0)).epsilon(1e-6));
  CHECK(min_epsilon(500, 1, 0.05) == doctest::Approx(0.005973).epsilon(1e-3));
  CHECK(min_epsilon(1, 1, 0.05) == doctest::Approx(0.95).epsilon(1e-7));
}

TEST_CASE("min_epsilon grows with the violation count") {
  for (int l = 1; l < 30; ++l)
    CHECK(min_epsilon(100, l + 1, 0.05) > min_epsilon(100, l, 0.05));
}

TEST_CASE("min_epsilon inverts the tail") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const int n = 10 + static_cast<int>(rng.index(500));
    const int l = 1 + static_cast<int>(rng.index(std::min(n, 20)));
    const double beta = rng.uniform(0.01, 0.2);
    const double eps = min_epsilon(n, l, beta);
    CHECK(binomial_tail(n, l, eps) <= beta + 1e-6);
    if (eps > 2e-9) CHECK(binomial_tail(n, l, eps - 2e-9) >= beta - 1e-6);
  }
}

TEST_CASE("conformal quantile picks the split-conformal order statistic") {
  // alpha chosen so ceil((n+1)(1-alpha)) = 2 -> second smallest.
  CHECK(conformal_quantile({-3, -2, -1}, 0.6) == doctest::Approx(-2.0));
  // k = 0 violations: alpha = 1/(n+1) -> the maximum score.
  const std::vector<double> all_neg{-0.5, -2.0, -0.1, -1.0};
  CHECK(conformal_quantile(all_neg, 1.0 / 5.0) == doctest::Approx(-0.1));
  CHECK(conformal_quantile(all_neg, 1.0 / 5.0) <= 0.0);
  CHECK_THROWS_AS(conformal_quantile({}, 0.5), ConfigError);
}

TEST_CASE("median-index quantile of standard normals is near zero") {
  Rng rng(11);
  std::vector<double> scores(1000);
  for (auto& s : scores) s = rng.normal();
  CHECK(std::abs(conformal_quantile(scores, 0.5)) < 0.1);
}

namespace {

CalibrationConfig synthetic_config(int n_samples, std::uint64_t seed) {
  CalibrationConfig cfg;
  cfg.epsilon_s = 0.05;
  cfg.beta_s = 0.05;
  cfg.n_samples = n_samples;
  cfg.n_levels = 40;
  cfg.seed = seed;
  return cfg;
}

// States live on [0,1] x [0,1]; V_c(x) = x1 - 1 in [-1, 0).
const ValueFn kLinearVc = [](const Vec2& x) { return x.x() - 1.0; };
const StateSampler kUnitSquare = [](Rng& rng) {
  return Vec2{rng.uniform(), rng.uniform()};
};

}  // namespace

TEST_CASE("zero violations calibrate to delta* = 0") {
  const ScoreFn clean = [](const Vec2&, Rng&) { return -0.5; };
  const auto rep = calibrate_delta(kLinearVc, clean, kUnitSquare, synthetic_config(200, 5));
  CHECK(rep.feasible);
  CHECK(rep.delta_star == 0.0);
  CHECK(rep.delta_0 == 0.0);
  CHECK(rep.violation_count == 0);
  CHECK(rep.quantile == doctest::Approx(-0.5));
  CHECK(rep.levels.size() == 1);
  CHECK(rep.levels[0].l == 1);
}

TEST_CASE("constructed violations push delta* to the first clean level") {
  // Exactly the states with V_c in (-0.05, 0) violate. N_s = 80 makes even
  // one counted violation fail the epsilon_s = 0.05 test, so only clean
  // levels pass and delta* must drop to the bottom of the violating band.
  // (delta* can never go below delta_0 = min violating V_c, which sits just
  // above -0.05 with finitely many samples.)
  const ScoreFn scripted = [](const Vec2& x, Rng&) {
    return kLinearVc(x) > -0.05 ? 1.0 : -1.0;
  };
  CHECK(min_epsilon(80, 2, 0.05) > 0.05);  // k = 1 is already unacceptable
  const auto rep =
      calibrate_delta(kLinearVc, scripted, kUnitSquare, synthetic_config(80, 7));
  CHECK(rep.feasible);
  CHECK(rep.violation_count > 0);
  CHECK(rep.delta_star <= -0.03);
  CHECK(rep.delta_star >= -0.05);
  CHECK(rep.delta_star == doctest::Approx(rep.delta_0));
  // At the selected level no counted violation remains below delta*.
  int k = 0;
  for (int i = 0; i < rep.n_samples; ++i)
    if (rep.vc_values[i] < rep.delta_star && rep.scores[i] >= 0.0) ++k;
  CHECK(k == 0);
  CHECK(min_epsilon(rep.n_samples, k + 1, rep.beta_s) <= rep.epsilon_s);
}

TEST_CASE("delta* is monotone in epsilon_s strictness") {
  const ScoreFn noisy = [](const Vec2& x, Rng& rng) {
    const double p = std::pow(std::max(0.0, x.x()), 8.0) * 0.4;
    return rng.uniform() < p ? 1.0 : -1.0;
  };
  auto loose_cfg = synthetic_config(400, 9);
  loose_cfg.epsilon_s = 0.10;
  auto tight_cfg = synthetic_config(400, 9);
  tight_cfg.epsilon_s = 0.02;
  const auto loose = calibrate_delta(kLinearVc, noisy, kUnitSquare, loose_cfg);
  const auto tight = calibrate_delta(kLinearVc, noisy, kUnitSquare, tight_cfg);
  if (loose.feasible && tight.feasible) CHECK(tight.delta_star <= loose.delta_star);
}

TEST_CASE("infeasible N_s is reported with the minimal achievable epsilon") {
  // N_s = 10: even zero violations give min_epsilon(10,1,0.05) ~ 0.259.
  const ScoreFn one_bad = [](const Vec2& x, Rng&) { return x.x() > 0.999 ? 1.0 : -1.0; };
  auto cfg = synthetic_config(10, 11);
  cfg.epsilon_s = 0.05;
  const auto rep = calibrate_delta(kLinearVc, one_bad, kUnitSquare, cfg);
  CHECK_FALSE(rep.feasible);
  CHECK(rep.min_achievable_eps == doctest::Approx(1.0 - std::pow(0.05, 0.1)).epsilon(1e-6));
  CHECK(rep.min_achievable_eps > cfg.epsilon_s);
}

TEST_CASE("empty sub-zero level set raises InfeasibleError") {
  const ValueFn positive = [](const Vec2&) { return 1.0; };
  const ScoreFn clean = [](const Vec2&, Rng&) { return -1.0; };
  auto cfg = synthetic_config(10, 13);
  cfg.max_proposals = 1000;
  CHECK_THROWS_AS(calibrate_delta(positive, clean, kUnitSquare, cfg), InfeasibleError);
}

TEST_CASE("calibration is deterministic given the seed") {
  const ScoreFn noisy = [](const Vec2& x, Rng& rng) {
    return rng.uniform() < 0.3 * x.x() ? 0.5 : -0.5;
  };
  const auto a = calibrate_delta(kLinearVc, noisy, kUnitSquare, synthetic_config(200, 17));
  const auto b = calibrate_delta(kLinearVc, noisy, kUnitSquare, synthetic_config(200, 17));
  CHECK(a.delta_star == b.delta_star);
  CHECK(a.scores == b.scores);
  CHECK(a.vc_values == b.vc_values);
}

TEST_CASE("report json roundtrip") {
  const ScoreFn scripted = [](const Vec2& x, Rng&) {
    return kLinearVc(x) > -0.03 ? 1.0 : -1.0;
  };
  const auto rep = calibrate_delta(kLinearVc, scripted, kUnitSquare, synthetic_config(100, 19));
  const std::string path = "test_conformal_report.json";
  save_report(rep, path);
  const auto loaded = load_report(path);
  CHECK(loaded.delta_star == doctest::Approx(rep.delta_star));
  CHECK(loaded.delta_0 == doctest::Approx(rep.delta_0));
  CHECK(loaded.scores.size() == rep.scores.size());
  CHECK(loaded.levels.size() == rep.levels.size());
  std::remove(path.c_str());
}

TEST_CASE("policy safety score lower-bounds at the initial margin") {
  actor::OneStepActor a;
  a.net = nn::mlp_zero<float>(nn::LayerSpec{4, {4}, 2});  // zero-action policy
  Rng rng(21);
  // Inside obstacle 1: score >= l(x0) = 0.4.
  CHECK(policy_safety_score(a, env::kObstacle1Center, 50, 0.005, 1, rng) >= 0.4);
  // Far right, drifting away from everything: strictly negative score.
  CHECK(policy_safety_score(a, {1.9, 0.0}, 400, 0.005, 1, rng) < -0.1);
}

TEST_CASE("zero-action score from (1.9, 0) matches direct simulation") {
  actor::OneStepActor a;
  a.net = nn::mlp_zero<float>(nn::LayerSpec{4, {4}, 2});
  Rng rng(23);
  const double score = policy_safety_score(a, {1.9, 0.0}, 400, 0.005, 1, rng);
  // Independent simulation of the pure-drift path.
  Vec2 x{1.9, 0.0};
  double max_ell = env::safety_margin(x);
  for (int t = 0; t < 400; ++t) {
    x = env::dynamics_step(x, Vec2::Zero(), 0.005);
    max_ell = std::max(max_ell, env::safety_margin(x));
  }
  CHECK(score == doctest::Approx(max_ell).epsilon(1e-9));
}

TEST_CASE("monte carlo coverage on a synthetic environment (smoke scale)") {
  // True violation probability p(x1) = 0.9 * x1^16; the exact post-
  // calibration rate over S_delta = {x1 < w} is 0.9 w^16 / 17.
  const ScoreFn stochastic = [](const Vec2& x, Rng& rng) {
    const double p = 0.9 * std::pow(x.x(), 16.0);
    return rng.uniform() < p ? 0.5 : -0.5;
  };
  int exceed = 0;
  const int runs = 60;
  for (int r = 0; r < runs; ++r) {
    const auto rep =
        calibrate_delta(kLinearVc, stochastic, kUnitSquare, synthetic_config(200, 1000 + r));
    if (!rep.feasible) {
      ++exceed;
      continue;
    }
    const double w = 1.0 + rep.delta_star;
    const double true_rate = 0.9 * std::pow(w, 16.0) / 17.0;
    if (true_rate > rep.epsilon_s) ++exceed;
  }
  // beta_s = 0.05: with 60 runs allow generous slack; the full 500-run
  // version with the spec tolerance lives in the acceptance suite.
  CHECK(static_cast<double>(exceed) / runs <= 0.05 + 0.08);
}
