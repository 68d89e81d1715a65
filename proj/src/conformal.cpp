#include "safefql/conformal.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace safefql::conformal {

double binomial_tail(int n, int l, double eps) {
  if (l < 0 || l > n || n < 0) throw ConfigError("binomial_tail: need 0 <= l <= n");
  if (!(eps > 0.0 && eps < 1.0)) throw ConfigError("binomial_tail: eps in (0,1)");
  if (l == 0) return 0.0;
  const double log_eps = std::log(eps);
  const double log_1m = std::log1p(-eps);
  double sum = 0.0;
  double log_comb = 0.0;  // log C(n, 0)
  for (int i = 0; i < l; ++i) {
    if (i > 0) log_comb += std::log(static_cast<double>(n - i + 1)) -
                           std::log(static_cast<double>(i));
    sum += std::exp(log_comb + i * log_eps + (n - i) * log_1m);
  }
  return std::min(sum, 1.0);
}

double min_epsilon(int n, int l, double beta) {
  if (l < 1 || l > n) throw ConfigError("min_epsilon: need 1 <= l <= n");
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("min_epsilon: beta in (0,1)");
  double lo = 0.0, hi = 1.0;
  // tail(eps) is strictly decreasing in eps: tail(lo) -> 1, tail(hi) -> 0.
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    if (binomial_tail(n, l, mid) <= beta)
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

double conformal_quantile(std::vector<double> scores, double alpha) {
  if (scores.empty()) throw ConfigError("conformal_quantile: empty scores");
  const int n = static_cast<int>(scores.size());
  double level = std::ceil((n + 1) * (1.0 - alpha));
  int idx = static_cast<int>(level);
  idx = std::clamp(idx, 1, n);
  std::nth_element(scores.begin(), scores.begin() + (idx - 1), scores.end());
  return scores[idx - 1];
}

double policy_safety_score(const actor::OneStepActor& a, const Vec2& x, int horizon, double dt,
                           int rollouts, Rng& rng) {
  double acc = 0.0;
  for (int r = 0; r < std::max(1, rollouts); ++r) {
    const env::Rollout roll = env::rollout(
        [&a](const Vec2& s, Rng& rr) { return actor::deploy_action(a, s, rr); }, x, horizon,
        dt, rng);
    acc += roll.max_ell;
  }
  return acc / std::max(1, rollouts);
}

CalibrationReport calibrate_delta(const ValueFn& v_c, const ScoreFn& score,
                                  const StateSampler& sampler, const CalibrationConfig& cfg) {
  if (!(cfg.epsilon_s > 0.0 && cfg.epsilon_s < 1.0) ||
      !(cfg.beta_s > 0.0 && cfg.beta_s < 1.0))
    throw ConfigError("calibrate_delta: epsilon_s, beta_s in (0,1)");
  if (cfg.n_samples < 1 || cfg.n_levels < 2)
    throw ConfigError("calibrate_delta: n_samples >= 1, n_levels >= 2");

  const int n = cfg.n_samples;
  CalibrationReport rep;
  rep.epsilon_s = cfg.epsilon_s;
  rep.beta_s = cfg.beta_s;
  rep.n_samples = n;

  // Draw N_s states from the sub-zero level set by rejection.
  std::vector<Vec2> states(n);
  {
    Rng rng(derive_seed(cfg.seed, 0x5a17));
    std::uint64_t proposals = 0;
    for (int i = 0; i < n; ++i) {
      for (;;) {
        if (++proposals > cfg.max_proposals)
          throw InfeasibleError("calibrate_delta: could not sample the sub-0 level set "
                                "(is {x : V_c(x) < 0} empty?)");
        const Vec2 x = sampler(rng);
        if (v_c(x) < 0.0) {
          states[i] = x;
          break;
        }
      }
    }
  }

  rep.scores.resize(n);
  rep.vc_values.resize(n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      Rng rng(derive_seed(cfg.seed, 0x9c0 + i));
      rep.vc_values[i] = v_c(states[i]);
      rep.scores[i] = score(states[i], rng);
    }
  });

  // delta_0: the most negative V_c among violating samples (0 when clean).
  rep.delta_0 = 0.0;
  int base_violations = 0;
  for (int i = 0; i < n; ++i) {
    if (rep.scores[i] >= 0.0) {
      ++base_violations;
      rep.delta_0 = std::min(rep.delta_0, rep.vc_values[i]);
    }
  }
  rep.violation_count = base_violations;
  rep.min_achievable_eps = min_epsilon(n, 1, cfg.beta_s);

  // Sweep M uniform levels in [delta_0, 0], most conservative first; keep
  // the largest level whose achieved epsilon still passes.
  const int m = base_violations == 0 ? 1 : cfg.n_levels;
  bool any_pass = false;
  double delta_star = rep.delta_0;
  for (int j = 0; j < m; ++j) {
    LevelRow row;
    row.delta = m == 1 ? 0.0
                       : rep.delta_0 + (0.0 - rep.delta_0) * static_cast<double>(j) / (m - 1);
    for (int i = 0; i < n; ++i)
      if (rep.vc_values[i] < row.delta && rep.scores[i] >= 0.0) ++row.k;
    row.alpha = static_cast<double>(row.k + 1) / (n + 1);
    // l = floor((n+1) alpha) = k + 1 exactly; the epsilon guards the float
    // round-trip through alpha, and l caps at n when every sample violates.
    row.l = std::min(n, static_cast<int>(std::floor((n + 1) * row.alpha + 1e-9)));
    row.achieved_eps = min_epsilon(n, row.l, cfg.beta_s);
    row.pass = row.achieved_eps <= cfg.epsilon_s;
    if (row.pass) {
      any_pass = true;
      delta_star = row.delta;
    }
    rep.levels.push_back(row);
  }

  rep.feasible = any_pass;
  rep.delta_star = any_pass ? delta_star : rep.delta_0;

  // Conformal quantile at the selected level: with k violations among the
  // n_sub samples inside S_{delta*}, this is the largest negative score.
  {
    std::vector<double> sub;
    int k_sub = 0;
    for (int i = 0; i < n; ++i) {
      // All samples satisfy V_c < 0, so delta* = 0 keeps every one.
      if (rep.vc_values[i] < rep.delta_star || rep.delta_star >= 0.0) {
        sub.push_back(rep.scores[i]);
        if (rep.scores[i] >= 0.0) ++k_sub;
      }
    }
    if (!sub.empty()) {
      const double alpha = static_cast<double>(k_sub + 1) / (sub.size() + 1);
      rep.quantile = conformal_quantile(sub, alpha);
    }
  }
  return rep;
}

CalibrationReport calibrate_boat(const actor::OneStepActor& a,
                                 const critics::CriticBundle& crit,
                                 const CalibrationConfig& cfg) {
  const ValueFn v_c = [&crit](const Vec2& x) { return critics::v_c_value(crit, x); };
  const ScoreFn score = [&a, &cfg](const Vec2& x, Rng& rng) {
    return policy_safety_score(a, x, cfg.rollout_horizon, cfg.dt, cfg.rollouts_per_state, rng);
  };
  const StateSampler sampler = [](Rng& rng) { return env::sample_uniform_state(rng); };
  return calibrate_delta(v_c, score, sampler, cfg);
}

void save_report(const CalibrationReport& r, const std::string& path) {
  nlohmann::json j;
  j["feasible"] = r.feasible;
  j["delta_star"] = r.delta_star;
  j["delta_0"] = r.delta_0;
  j["quantile"] = r.quantile;
  j["min_achievable_eps"] = r.min_achievable_eps;
  j["epsilon_s"] = r.epsilon_s;
  j["beta_s"] = r.beta_s;
  j["n_samples"] = r.n_samples;
  j["violation_count"] = r.violation_count;
  j["scores"] = r.scores;
  j["vc_values"] = r.vc_values;
  nlohmann::json levels = nlohmann::json::array();
  for (const LevelRow& row : r.levels) {
    levels.push_back({{"delta", row.delta},
                      {"k", row.k},
                      {"alpha", row.alpha},
                      {"l", row.l},
                      {"achieved_eps", row.achieved_eps},
                      {"pass", row.pass}});
  }
  j["levels"] = levels;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  out << j.dump(2) << "\n";
}

CalibrationReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  CalibrationReport r;
  r.feasible = j.at("feasible").get<bool>();
  r.delta_star = j.at("delta_star").get<double>();
  r.delta_0 = j.at("delta_0").get<double>();
  r.quantile = j.at("quantile").get<double>();
  r.min_achievable_eps = j.at("min_achievable_eps").get<double>();
  r.epsilon_s = j.at("epsilon_s").get<double>();
  r.beta_s = j.at("beta_s").get<double>();
  r.n_samples = j.at("n_samples").get<int>();
  r.violation_count = j.at("violation_count").get<int>();
  r.scores = j.at("scores").get<std::vector<double>>();
  r.vc_values = j.at("vc_values").get<std::vector<double>>();
  for (const auto& row : j.at("levels")) {
    LevelRow lr;
    lr.delta = row.at("delta").get<double>();
    lr.k = row.at("k").get<int>();
    lr.alpha = row.at("alpha").get<double>();
    lr.l = row.at("l").get<int>();
    lr.achieved_eps = row.at("achieved_eps").get<double>();
    lr.pass = row.at("pass").get<bool>();
    r.levels.push_back(lr);
  }
  return r;
}

}  // namespace safefql::conformal
