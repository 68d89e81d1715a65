#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "safefql/pipeline.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace safefql;
namespace fs = std::filesystem;

namespace {

// The CLI binary sits next to the test working directory (ctest runs these
// from the build root).
std::string cli_binary() {
  if (const char* env = std::getenv("SAFEFQL_BIN")) return env;
  return "./safefql";
}

int run_cli(const std::string& args) {
  const std::string cmd = cli_binary() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Tiny desk profile: small nets, short runs, enough calibration samples to
// stay feasible at epsilon_s = 0.05 (needs N_s >= 59).
const std::string kTinyFlags =
    " --data.n_traj 6 --env.horizon 30 --net.critic_hidden 8,8 --net.policy_hidden 8,8"
    " --train.critic_steps 200 --train.flow_steps 200 --train.actor_steps 200"
    " --train.batch_size 16 --train.log_every 50 --calib.n_samples 60"
    " --calib.n_levels 5 --calib.rollout_horizon 30 --eval.n_episodes 12"
    " --eval.rejection_n 2 --flow.k_steps 4";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("test_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::vector<std::string> csv_column(const std::string& path, int col) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (int c = 0; c <= col; ++c) std::getline(ss, cell, ',');
    out.push_back(cell);
  }
  return out;
}

}  // namespace

TEST_CASE("cli pipeline end to end at tiny scale") {
  TempDir dir("cli");
  const std::string base = "--out " + dir.str() + kTinyFlags;

  SUBCASE("config errors exit with code 2") {
    CHECK(run_cli("--train.tau 0.4 " + base + " gen-data") == 2);
    CHECK(run_cli("--no.such.key 1 " + base + " gen-data") == 2);
    CHECK(run_cli(base + " train warp") == 2);
  }

  SUBCASE("phase ordering is enforced with exit code 3") {
    REQUIRE(run_cli(base + " gen-data") == 0);
    CHECK(run_cli(base + " train actor") == 3);
    CHECK(run_cli(base + " train flow") == 3);
    CHECK(run_cli(base + " calibrate") == 3);
    CHECK(run_cli(base + " eval safefql") == 3);
    CHECK(run_cli(base + " bench") == 3);
  }

  SUBCASE("training without a dataset is an ordering error") {
    CHECK(run_cli(base + " train critics") == 3);
  }

  SUBCASE("full run: gen-data, train all, calibrate, eval, bench, oracle") {
    REQUIRE(run_cli(base + " gen-data") == 0);

    // Dataset generation is byte-deterministic.
    const std::string ds = dir.str() + "/boat_dataset.sfqd";
    const std::string first = slurp(ds);
    REQUIRE(run_cli(base + " gen-data") == 0);
    CHECK(slurp(ds) == first);

    REQUIRE(run_cli(base + " train all") == 0);
    for (const char* name :
         {"/checkpoints/critics.json", "/checkpoints/critics_qr1.sfql",
          "/checkpoints/flow_teacher.sfql", "/checkpoints/actor.sfql",
          "/critic_metrics.csv", "/flow_metrics.csv", "/actor_metrics.csv"})
      CHECK(fs::exists(dir.str() + name));

    // Retraining one phase with the same seed reproduces the checkpoint.
    const std::string ckpt = dir.str() + "/checkpoints/critics_qc1.sfql";
    const std::string before = slurp(ckpt);
    REQUIRE(run_cli(base + " train critics") == 0);
    CHECK(slurp(ckpt) == before);

    // Calibration succeeds (N_s = 60 keeps k = 0 feasible) and reruns are
    // byte-identical.
    REQUIRE(run_cli(base + " calibrate") == 0);
    const std::string calib = dir.str() + "/calibration.json";
    const std::string calib_bytes = slurp(calib);
    REQUIRE(run_cli(base + " calibrate") == 0);
    CHECK(slurp(calib) == calib_bytes);

    // Paired evaluation: identical initial-state lists across modes, and
    // byte-identical JSON on rerun.
    for (const char* mode : {"safefql", "rejection", "random", "zero"})
      REQUIRE(run_cli(base + " eval " + std::string(mode)) == 0);
    const auto x0_safefql = csv_column(dir.str() + "/eval_safefql_episodes.csv", 1);
    const auto x0_zero = csv_column(dir.str() + "/eval_zero_episodes.csv", 1);
    CHECK(x0_safefql == x0_zero);
    const std::string eval_json = dir.str() + "/eval_safefql.json";
    const std::string eval_bytes = slurp(eval_json);
    REQUIRE(run_cli(base + " eval safefql") == 0);
    CHECK(slurp(eval_json) == eval_bytes);
    CHECK(eval_bytes.find("mean_action_latency_us") == std::string::npos);

    // Rejection-mode report carries its N.
    CHECK(slurp(dir.str() + "/eval_rejection.json").find("\"rejection_n\": 2") !=
          std::string::npos);

    // Bench runs and reports ratios.
    REQUIRE(run_cli(base + " bench --bench.n_calls 200 --bench.rejection_n 1,2") == 0);
    CHECK(slurp(dir.str() + "/bench.json").find("flow_over_one_step") != std::string::npos);

    // Oracle at coarse resolution, including the agreement block.
    REQUIRE(run_cli(base +
                    " oracle --oracle.resolution 50 --oracle.tol 1e-4 --oracle.probes 100") ==
            0);
    CHECK(fs::exists(dir.str() + "/oracle_grid.bin"));
    CHECK(fs::exists(dir.str() + "/oracle_grid.csv"));
    CHECK(slurp(dir.str() + "/oracle_report.json").find("sign_agreement") != std::string::npos);
  }

  SUBCASE("calibration infeasibility exits 4 and still writes the report") {
    REQUIRE(run_cli(base + " gen-data") == 0);
    REQUIRE(run_cli(base + " train all") == 0);
    CHECK(run_cli(base + " calibrate --calib.n_samples 10") == 4);
    CHECK(slurp(dir.str() + "/calibration.json").find("\"feasible\": false") !=
          std::string::npos);
  }
}

TEST_CASE("train all resumes by skipping completed phases") {
  TempDir dir("resume");
  const std::string base = "--out " + dir.str() + kTinyFlags;
  REQUIRE(run_cli(base + " gen-data") == 0);
  REQUIRE(run_cli(base + " train critics") == 0);
  const std::string ckpt = dir.str() + "/checkpoints/critics_qc1.sfql";
  const std::string before = slurp(ckpt);
  // `train all` must not retrain critics (actor/flow get trained now).
  REQUIRE(run_cli(base + " --train.seed 99 train all") == 0);
  CHECK(slurp(ckpt) == before);
  CHECK(fs::exists(dir.str() + "/checkpoints/actor.sfql"));
}

TEST_CASE("master seed derives all phase seeds") {
  TempDir dir("seed");
  const std::string base = "--out " + dir.str() + kTinyFlags;
  REQUIRE(run_cli("--seed 31 " + base + " gen-data") == 0);
  const std::string a = slurp(dir.str() + "/boat_dataset.sfqd");
  REQUIRE(run_cli("--seed 31 " + base + " gen-data") == 0);
  CHECK(slurp(dir.str() + "/boat_dataset.sfqd") == a);
  REQUIRE(run_cli("--seed 32 " + base + " gen-data") == 0);
  CHECK(slurp(dir.str() + "/boat_dataset.sfqd") != a);
}

TEST_CASE("library-level eval restricts initial states to the calibrated set") {
  // Exercise cmd_eval's delta_override path directly.
  TempDir dir("evalset");
  config::RunConfig cfg;
  cfg.data_n_traj = 4;
  cfg.env_horizon = 20;
  cfg.net_critic_hidden = {8, 8};
  cfg.net_policy_hidden = {8, 8};
  cfg.train_critic_steps = 100;
  cfg.train_flow_steps = 100;
  cfg.train_actor_steps = 100;
  cfg.train_batch_size = 8;
  cfg.eval_n_episodes = 10;
  cfg.flow_k_steps = 2;
  const auto paths = pipeline::Paths::with_defaults(dir.str());
  pipeline::cmd_gen_data(cfg, paths);
  pipeline::cmd_train(cfg, pipeline::Phase::kAll, paths);

  const auto crit = critics::load_bundle(paths.checkpoint_dir);
  const auto report =
      pipeline::cmd_eval(cfg, pipeline::EvalMode::kZero, paths, /*delta_override=*/0.0);
  CHECK(report.init_set == "calibrated");
  for (const auto& ep : report.episodes) {
    CHECK(env::safety_margin(ep.x0) < 0.0);
    CHECK(critics::v_c_value(crit, ep.x0) < 0.0);
  }
}
