#include "safefql/grid_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace safefql::oracle {

namespace {

std::vector<Vec2> action_set(int n_actions) {
  if (n_actions < 9) throw ConfigError("value_iteration: need >= 8 directions plus zero");
  std::vector<Vec2> actions;
  actions.reserve(n_actions);
  actions.emplace_back(0.0, 0.0);
  const int dirs = n_actions - 1;
  for (int d = 0; d < dirs; ++d) {
    const double th = 2.0 * M_PI * d / dirs;
    actions.emplace_back(std::cos(th), std::sin(th));
  }
  return actions;
}

double bilinear(const Eigen::MatrixXd& v, const GridConfig& cfg, double x1, double x2) {
  const double f1 = (x1 - env::kX1Min) / (env::kX1Max - env::kX1Min) * (cfg.n1 - 1);
  const double f2 = (x2 - env::kX2Min) / (env::kX2Max - env::kX2Min) * (cfg.n2 - 1);
  const double c1 = std::clamp(f1, 0.0, static_cast<double>(cfg.n1 - 1));
  const double c2 = std::clamp(f2, 0.0, static_cast<double>(cfg.n2 - 1));
  const int i0 = std::min(static_cast<int>(c1), cfg.n1 - 2);
  const int j0 = std::min(static_cast<int>(c2), cfg.n2 - 2);
  const double t1 = c1 - i0;
  const double t2 = c2 - j0;
  return (1 - t2) * ((1 - t1) * v(j0, i0) + t1 * v(j0, i0 + 1)) +
         t2 * ((1 - t1) * v(j0 + 1, i0) + t1 * v(j0 + 1, i0 + 1));
}

}  // namespace

GridValue value_iteration(const GridConfig& cfg) {
  if (cfg.n1 < 50 || cfg.n2 < 50) throw ConfigError("value_iteration: resolution >= 50x50");
  if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ConfigError("value_iteration: gamma in [0,1]");
  GridValue grid;
  grid.cfg = cfg;

  const auto actions = action_set(cfg.n_actions);

  Eigen::MatrixXd ell(cfg.n2, cfg.n1);
  for (int j = 0; j < cfg.n2; ++j)
    for (int i = 0; i < cfg.n1; ++i)
      ell(j, i) = env::safety_margin({grid.x1_at(i), grid.x2_at(j)});

  // Precompute each node/action successor once; the map is stationary.
  std::vector<Vec2> succ(static_cast<std::size_t>(cfg.n1) * cfg.n2 * actions.size());
  parallel_for(static_cast<std::size_t>(cfg.n2), [&](std::size_t j0, std::size_t j1) {
    for (std::size_t j = j0; j < j1; ++j)
      for (int i = 0; i < cfg.n1; ++i) {
        const Vec2 x{grid.x1_at(i), grid.x2_at(static_cast<int>(j))};
        for (std::size_t a = 0; a < actions.size(); ++a)
          succ[(j * cfg.n1 + i) * actions.size() + a] = env::dynamics_step(x, actions[a], cfg.dt);
      }
  });

  if (cfg.gamma == 0.0) {
    // Myopic limit: the backup term vanishes and the value is the margin.
    grid.values = std::move(ell);
    grid.iterations = 0;
    grid.final_residual = 0.0;
    return grid;
  }

  Eigen::MatrixXd v = ell;
  Eigen::MatrixXd v_next(cfg.n2, cfg.n1);
  double residual = std::numeric_limits<double>::infinity();
  int iter = 0;
  for (; iter < cfg.max_iters && residual > cfg.tol; ++iter) {
    parallel_for(static_cast<std::size_t>(cfg.n2), [&](std::size_t j0, std::size_t j1) {
      for (std::size_t j = j0; j < j1; ++j)
        for (int i = 0; i < cfg.n1; ++i) {
          double best = std::numeric_limits<double>::infinity();
          const std::size_t base = (j * cfg.n1 + i) * actions.size();
          for (std::size_t a = 0; a < actions.size(); ++a) {
            const Vec2& nx = succ[base + a];
            best = std::min(best, bilinear(v, cfg, nx.x(), nx.y()));
          }
          v_next(j, i) = std::max(ell(j, i), cfg.gamma * best);
        }
    });
    residual = (v_next - v).cwiseAbs().maxCoeff();
    grid.residual_history.push_back(residual);
    v.swap(v_next);
  }
  if (residual > cfg.tol)
    throw NumericError("value_iteration: no convergence after " +
                       std::to_string(cfg.max_iters) + " iterations (residual " +
                       std::to_string(residual) + ")");
  grid.values = std::move(v);
  grid.iterations = iter;
  grid.final_residual = residual;
  return grid;
}

double interp_value(const GridValue& grid, const Vec2& x) {
  return bilinear(grid.values, grid.cfg, x.x(), x.y());
}

Feasibility oracle_sign(const GridValue& grid, const Vec2& x) {
  const double v = interp_value(grid, x);
  if (std::abs(v) <= grid.cfg.dead_band) return Feasibility::kBoundary;
  return v < 0.0 ? Feasibility::kFeasible : Feasibility::kInfeasible;
}

void save_grid(const GridValue& grid, const std::string& bin_path, const std::string& csv_path) {
  {
    std::FILE* f = std::fopen(bin_path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + bin_path);
    auto w = [&](const void* p, std::size_t n) {
      if (std::fwrite(p, 1, n, f) != n) {
        std::fclose(f);
        throw IoError("short write");
      }
    };
    w("SFQG", 4);
    const std::uint16_t version = 1;
    w(&version, sizeof version);
    const std::uint32_t n1 = grid.cfg.n1, n2 = grid.cfg.n2, na = grid.cfg.n_actions;
    w(&n1, sizeof n1);
    w(&n2, sizeof n2);
    w(&na, sizeof na);
    w(&grid.cfg.gamma, sizeof grid.cfg.gamma);
    w(&grid.cfg.dt, sizeof grid.cfg.dt);
    w(&grid.cfg.tol, sizeof grid.cfg.tol);
    w(&grid.cfg.dead_band, sizeof grid.cfg.dead_band);
    for (int j = 0; j < grid.cfg.n2; ++j)
      for (int i = 0; i < grid.cfg.n1; ++i) {
        const float fv = static_cast<float>(grid.values(j, i));
        w(&fv, sizeof fv);
      }
    std::fclose(f);
  }
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot open " + csv_path);
    csv << "x1,x2,value\n";
    for (int j = 0; j < grid.cfg.n2; ++j)
      for (int i = 0; i < grid.cfg.n1; ++i)
        csv << grid.x1_at(i) << "," << grid.x2_at(j) << "," << grid.values(j, i) << "\n";
  }
}

GridValue load_grid(const std::string& bin_path) {
  std::FILE* f = std::fopen(bin_path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + bin_path);
  auto r = [&](void* p, std::size_t n) {
    if (std::fread(p, 1, n, f) != n) {
      std::fclose(f);
      throw IoError("short read");
    }
  };
  char magic[4];
  r(magic, 4);
  if (std::memcmp(magic, "SFQG", 4) != 0) {
    std::fclose(f);
    throw IoError(bin_path + ": not an SFQG grid");
  }
  std::uint16_t version;
  r(&version, sizeof version);
  GridValue grid;
  std::uint32_t n1, n2, na;
  r(&n1, sizeof n1);
  r(&n2, sizeof n2);
  r(&na, sizeof na);
  grid.cfg.n1 = static_cast<int>(n1);
  grid.cfg.n2 = static_cast<int>(n2);
  grid.cfg.n_actions = static_cast<int>(na);
  r(&grid.cfg.gamma, sizeof grid.cfg.gamma);
  r(&grid.cfg.dt, sizeof grid.cfg.dt);
  r(&grid.cfg.tol, sizeof grid.cfg.tol);
  r(&grid.cfg.dead_band, sizeof grid.cfg.dead_band);
  grid.values.resize(grid.cfg.n2, grid.cfg.n1);
  for (int j = 0; j < grid.cfg.n2; ++j)
    for (int i = 0; i < grid.cfg.n1; ++i) {
      float fv;
      r(&fv, sizeof fv);
      grid.values(j, i) = fv;
    }
  std::fclose(f);
  return grid;
}

Agreement compare_with_critics(const GridValue& grid, const critics::CriticBundle& crit,
                               int n_probes, std::uint64_t seed) {
  Agreement agg;
  Rng rng(derive_seed(seed, 0x0aac1e));
  const std::uint64_t cap = static_cast<std::uint64_t>(n_probes) * 10000ULL;
  std::uint64_t proposals = 0;
  while (agg.n_compared < n_probes) {
    if (++proposals > cap)
      throw InfeasibleError("compare_with_critics: dead band excludes nearly all of X");
    const Vec2 x = env::sample_uniform_state(rng);
    const Feasibility sign = oracle_sign(grid, x);
    if (sign == Feasibility::kBoundary) {
      ++agg.n_excluded;
      continue;
    }
    const Vec2 a = rng.disk();
    const double qc = critics::q_c_value(crit, x, a);
    const bool critic_infeasible = qc >= 0.0;
    ++agg.n_compared;
    if (critic_infeasible == (sign == Feasibility::kInfeasible)) ++agg.n_agree;
  }
  agg.fraction = static_cast<double>(agg.n_agree) / agg.n_compared;
  return agg;
}

}  // namespace safefql::oracle
