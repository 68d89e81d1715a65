#include "safefql/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace safefql::config {

namespace {

struct KeyBinding {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(trim(value));
  T v{};
  in >> v;
  if (in.fail() || !in.eof())
    throw ConfigError("config: cannot parse '" + value + "' for key " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: cannot parse '" + value + "' as bool for key " + key);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(trim(value));
  while (std::getline(in, item, ',')) out.push_back(parse_number<int>(key, item));
  if (out.empty()) throw ConfigError("config: empty list for key " + key);
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string format_double(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

#define NUM_KEY(name, field, type)                                                  \
  KeyBinding {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_number<type>(name, v); }, \
        [](const RunConfig& c) { return format_double(static_cast<double>(c.field)); }       \
  }
#define INT_KEY(name, field, type)                                                  \
  KeyBinding {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_number<type>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                           \
  }
#define BOOL_KEY(name, field)                                                        \
  KeyBinding {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, \
        [](const RunConfig& c) { return c.field ? "true" : "false"; }                \
  }
#define STR_KEY(name, field)                                                         \
  KeyBinding {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = trim(v); },             \
        [](const RunConfig& c) { return c.field; }                                   \
  }
#define LIST_KEY(name, field)                                                        \
  KeyBinding {                                                                       \
    name, [](RunConfig& c, const std::string& v) { c.field = parse_int_list(name, v); }, \
        [](const RunConfig& c) { return format_int_list(c.field); }                  \
  }

const std::vector<KeyBinding>& bindings() {
  static const std::vector<KeyBinding> table = {
      NUM_KEY("env.dt", env_dt, double),
      INT_KEY("env.horizon", env_horizon, int),
      INT_KEY("data.n_traj", data_n_traj, int),
      INT_KEY("data.seed", data_seed, std::uint64_t),
      LIST_KEY("net.critic_hidden", net_critic_hidden),
      LIST_KEY("net.policy_hidden", net_policy_hidden),
      NUM_KEY("train.lr", train_lr, double),
      NUM_KEY("train.gamma", train_gamma, double),
      NUM_KEY("train.tau", train_tau, double),
      NUM_KEY("train.ema_rate", train_ema_rate, double),
      INT_KEY("train.batch_size", train_batch_size, int),
      INT_KEY("train.critic_steps", train_critic_steps, std::int64_t),
      INT_KEY("train.flow_steps", train_flow_steps, std::int64_t),
      INT_KEY("train.actor_steps", train_actor_steps, std::int64_t),
      NUM_KEY("train.lambda", train_lambda, double),
      NUM_KEY("train.eta", train_eta, double),
      STR_KEY("train.actor_objective", train_actor_objective),
      BOOL_KEY("train.reward_twins", train_reward_twins),
      BOOL_KEY("train.distill_full_flow", train_distill_full_flow),
      BOOL_KEY("train.q_norm", train_q_norm),
      STR_KEY("train.next_action_fallback", train_next_action_fallback),
      STR_KEY("train.safety_bootstrap", train_safety_bootstrap),
      INT_KEY("train.log_every", train_log_every, int),
      INT_KEY("train.seed", train_seed, std::uint64_t),
      INT_KEY("flow.k_steps", flow_k_steps, int),
      NUM_KEY("calib.epsilon_s", calib_epsilon_s, double),
      NUM_KEY("calib.beta_s", calib_beta_s, double),
      INT_KEY("calib.n_samples", calib_n_samples, int),
      INT_KEY("calib.n_levels", calib_n_levels, int),
      INT_KEY("calib.rollout_horizon", calib_rollout_horizon, int),
      INT_KEY("calib.rollouts_per_state", calib_rollouts_per_state, int),
      INT_KEY("calib.seed", calib_seed, std::uint64_t),
      INT_KEY("eval.n_episodes", eval_n_episodes, int),
      INT_KEY("eval.rejection_n", eval_rejection_n, int),
      BOOL_KEY("eval.timing", eval_timing),
      INT_KEY("eval.seed", eval_seed, std::uint64_t),
      INT_KEY("bench.n_calls", bench_n_calls, int),
      LIST_KEY("bench.rejection_n", bench_rejection_n),
      INT_KEY("oracle.resolution", oracle_resolution, int),
      INT_KEY("oracle.actions", oracle_actions, int),
      NUM_KEY("oracle.gamma", oracle_gamma, double),
      NUM_KEY("oracle.dt", oracle_dt, double),
      NUM_KEY("oracle.tol", oracle_tol, double),
      INT_KEY("oracle.max_iters", oracle_max_iters, int),
      NUM_KEY("oracle.dead_band", oracle_dead_band, double),
      INT_KEY("oracle.probes", oracle_probes, int),
      INT_KEY("oracle.seed", oracle_seed, std::uint64_t),
  };
  return table;
}

#undef NUM_KEY
#undef INT_KEY
#undef BOOL_KEY
#undef STR_KEY
#undef LIST_KEY

}  // namespace

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  require(env_dt > 0.0, "env.dt must be positive");
  require(env_horizon >= 1, "env.horizon >= 1");
  require(data_n_traj >= 1, "data.n_traj >= 1");
  for (int h : net_critic_hidden) require(h >= 1, "net.critic_hidden dims >= 1");
  for (int h : net_policy_hidden) require(h >= 1, "net.policy_hidden dims >= 1");
  require(train_lr > 0.0, "train.lr must be positive");
  require(train_gamma > 0.0 && train_gamma < 1.0, "train.gamma in (0,1)");
  require(train_tau > 0.5 && train_tau < 1.0, "train.tau in (0.5,1)");
  require(train_ema_rate > 0.0 && train_ema_rate <= 1.0, "train.ema_rate in (0,1]");
  require(train_batch_size >= 1, "train.batch_size >= 1");
  require(train_critic_steps >= 1 && train_flow_steps >= 1 && train_actor_steps >= 1,
          "training step counts >= 1");
  require(train_lambda >= 0.0, "train.lambda >= 0");
  require(train_eta > 0.0, "train.eta > 0");
  require(train_actor_objective == "gated" || train_actor_objective == "naive",
          "train.actor_objective is 'gated' or 'naive'");
  require(train_next_action_fallback == "behavior" || train_next_action_fallback == "self",
          "train.next_action_fallback is 'behavior' or 'self'");
  require(train_safety_bootstrap == "value_net" || train_safety_bootstrap == "twin_next_action",
          "train.safety_bootstrap is 'value_net' or 'twin_next_action'");
  require(flow_k_steps >= 1, "flow.k_steps >= 1");
  require(calib_epsilon_s > 0.0 && calib_epsilon_s < 1.0, "calib.epsilon_s in (0,1)");
  require(calib_beta_s > 0.0 && calib_beta_s < 1.0, "calib.beta_s in (0,1)");
  require(calib_n_samples >= 1, "calib.n_samples >= 1");
  require(calib_n_levels >= 2, "calib.n_levels >= 2");
  require(calib_rollout_horizon >= 1, "calib.rollout_horizon >= 1");
  require(calib_rollouts_per_state >= 1, "calib.rollouts_per_state >= 1");
  require(eval_n_episodes >= 1, "eval.n_episodes >= 1");
  require(eval_rejection_n >= 1, "eval.rejection_n >= 1");
  require(bench_n_calls >= 1, "bench.n_calls >= 1");
  for (int n : bench_rejection_n) require(n >= 1, "bench.rejection_n entries >= 1");
  require(oracle_resolution >= 50, "oracle.resolution >= 50");
  require(oracle_actions >= 9, "oracle.actions >= 9");
  require(oracle_gamma >= 0.0 && oracle_gamma <= 1.0, "oracle.gamma in [0,1]");
  require(oracle_tol > 0.0, "oracle.tol > 0");
  require(oracle_dead_band >= 0.0, "oracle.dead_band >= 0");
  require(oracle_probes >= 1, "oracle.probes >= 1");
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& b : bindings()) keys.push_back(b.name);
  return keys;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& b : bindings()) {
    if (b.name == key) {
      b.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                        ": expected key = value");
    set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::map<std::string, std::string>& overrides) {
  for (const auto& [key, value] : overrides) set_key(cfg, key, value);
}

void apply_master_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.data_seed = derive_seed(seed, 101);
  cfg.train_seed = derive_seed(seed, 102);
  cfg.calib_seed = derive_seed(seed, 103);
  cfg.eval_seed = derive_seed(seed, 104);
  cfg.oracle_seed = derive_seed(seed, 105);
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& b : bindings()) out += b.name + " = " + b.get(cfg) + "\n";
  return out;
}

}  // namespace safefql::config
