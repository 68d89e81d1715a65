#include "safefql/boat_env.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>

namespace safefql::env {

namespace {

// Shares the checkpoint helpers' style but carries its own header.
struct File {
  std::FILE* f = nullptr;
  File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {
    if (!f) throw IoError("cannot open " + path);
  }
  ~File() {
    if (f) std::fclose(f);
  }
  File(const File&) = delete;
  File& operator=(const File&) = delete;
};

template <typename T>
void write_pod(std::FILE* f, T v) {
  if (std::fwrite(&v, 1, sizeof(T), f) != sizeof(T)) throw IoError("short write");
}
template <typename T>
T read_pod(std::FILE* f) {
  T v;
  if (std::fread(&v, 1, sizeof(T), f) != sizeof(T)) throw IoError("short read");
  return v;
}

}  // namespace

TrajectoryDataset generate_dataset(std::uint64_t n_traj, std::uint64_t horizon, double dt,
                                   std::uint64_t seed) {
  if (n_traj < 1 || horizon < 1) throw ConfigError("generate_dataset: n_traj, horizon >= 1");
  TrajectoryDataset ds;
  ds.n_traj = n_traj;
  ds.horizon = horizon;
  ds.dt = dt;
  ds.seed = seed;
  ds.transitions.resize(n_traj * horizon);

  parallel_for(n_traj, [&](std::size_t t0, std::size_t t1) {
    for (std::size_t t = t0; t < t1; ++t) {
      Rng rng(derive_seed(seed, t));
      Vec2 x = sample_uniform_state(rng);
      for (std::uint64_t k = 0; k < horizon; ++k) {
        const Vec2 a = sample_disk_action(rng);
        const Vec2 x_next = dynamics_step(x, a, dt);
        Transition& tr = ds.transitions[t * horizon + k];
        tr.state = x.cast<float>();
        tr.action = a.cast<float>();
        tr.reward = static_cast<float>(reward(x));
        tr.safety = static_cast<float>(safety_margin(x));
        tr.next_state = x_next.cast<float>();
        // Continue from the stored float state so records chain exactly.
        x = tr.next_state.cast<double>();
      }
    }
  });
  return ds;
}

Rollout rollout(const Policy& policy, const Vec2& x0, int horizon, double dt, Rng& rng) {
  Rollout out;
  out.states.reserve(horizon + 1);
  out.ells.reserve(horizon + 1);
  out.max_ell = -std::numeric_limits<double>::infinity();
  Vec2 x = x0;
  for (int t = 0; t <= horizon; ++t) {
    out.states.push_back(x);
    const double ell = safety_margin(x);
    out.ells.push_back(ell);
    out.cumulative_reward += reward(x);
    if (ell > 0.0) ++out.violations;
    if (ell > out.max_ell) out.max_ell = ell;
    if (!in_bounds(x)) out.exited_bounds = true;
    if (t == horizon) break;
    const Vec2 a = project_to_disk(policy(x, rng));
    x = dynamics_step(x, a, dt);
  }
  return out;
}

void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
  File file(path, "wb");
  std::FILE* f = file.f;
  if (std::fwrite("SFQD", 1, 4, f) != 4) throw IoError("short write");
  write_pod<std::uint16_t>(f, kDatasetVersion);
  write_pod<std::uint64_t>(f, ds.n_traj);
  write_pod<std::uint64_t>(f, ds.horizon);
  write_pod<double>(f, ds.dt);
  write_pod<std::uint64_t>(f, ds.seed);
  for (const Transition& tr : ds.transitions) {
    const float rec[8] = {tr.state.x(),      tr.state.y(), tr.action.x(), tr.action.y(),
                          tr.reward,         tr.safety,    tr.next_state.x(),
                          tr.next_state.y()};
    if (std::fwrite(rec, sizeof(float), 8, f) != 8) throw IoError("short write");
  }

  nlohmann::json meta;
  meta["magic"] = "SFQD";
  meta["version"] = kDatasetVersion;
  meta["n_traj"] = ds.n_traj;
  meta["horizon"] = ds.horizon;
  meta["dt"] = ds.dt;
  meta["seed"] = ds.seed;
  meta["transitions"] = ds.transitions.size();
  std::ofstream side(path + ".json");
  if (!side) throw IoError("cannot open " + path + ".json");
  side << meta.dump(2) << "\n";
}

TrajectoryDataset load_dataset(const std::string& path) {
  File file(path, "rb");
  std::FILE* f = file.f;
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4) throw IoError("short read");
  if (std::memcmp(magic, "SFQD", 4) != 0) throw IoError(path + ": not an SFQD dataset");
  const auto version = read_pod<std::uint16_t>(f);
  if (version != kDatasetVersion) throw IoError(path + ": unsupported dataset version");
  TrajectoryDataset ds;
  ds.n_traj = read_pod<std::uint64_t>(f);
  ds.horizon = read_pod<std::uint64_t>(f);
  ds.dt = read_pod<double>(f);
  ds.seed = read_pod<std::uint64_t>(f);
  ds.transitions.resize(ds.n_traj * ds.horizon);
  for (Transition& tr : ds.transitions) {
    float rec[8];
    if (std::fread(rec, sizeof(float), 8, f) != 8) throw IoError("short read");
    tr.state = {rec[0], rec[1]};
    tr.action = {rec[2], rec[3]};
    tr.reward = rec[4];
    tr.safety = rec[5];
    tr.next_state = {rec[6], rec[7]};
  }
  return ds;
}

}  // namespace safefql::env
