// Independent ground truth for the safety boundary: dynamic programming of
// the max-backup safety value on a state grid with a discretized action set.
#pragma once

#include "safefql/boat_env.hpp"
#include "safefql/critics.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace safefql::oracle {

struct GridConfig {
  int n1 = 100;           // nodes along x1
  int n2 = 100;           // nodes along x2
  int n_actions = 17;     // boundary directions + the zero action
  double gamma = 0.99;
  double dt = 0.005;
  double tol = 1e-6;
  int max_iters = 20000;
  double dead_band = 0.1;
};

struct GridValue {
  GridConfig cfg;
  Eigen::MatrixXd values;  // n2 rows (x2) by n1 cols (x1), node-centered
  int iterations = 0;
  double final_residual = 0.0;
  std::vector<double> residual_history;  // sup-norm change per iteration

  double x1_at(int i) const { return env::kX1Min + (env::kX1Max - env::kX1Min) * i / (cfg.n1 - 1); }
  double x2_at(int j) const { return env::kX2Min + (env::kX2Max - env::kX2Min) * j / (cfg.n2 - 1); }
};

// Iterates V <- max{ l(x), gamma * min_a V(step(x, a, dt)) } with bilinear
// interpolation until the sup-norm change drops below tol. Steps leaving X
// are clamped to the boundary for interpolation. gamma = 1 gives the
// undiscounted worst-case-margin value.
GridValue value_iteration(const GridConfig& cfg);

// Bilinear interpolation of the converged values at x (clamped to X).
double interp_value(const GridValue& grid, const Vec2& x);

enum class Feasibility { kFeasible, kInfeasible, kBoundary };

// Sign with a dead band: values within +-dead_band are excluded from
// comparisons.
Feasibility oracle_sign(const GridValue& grid, const Vec2& x);

// Flat binary dump (header + float32 row-major values) plus a CSV of
// (x1, x2, value) rows for plotting level sets.
void save_grid(const GridValue& grid, const std::string& bin_path, const std::string& csv_path);
GridValue load_grid(const std::string& bin_path);

struct Agreement {
  int n_compared = 0;    // probes outside the dead band
  int n_agree = 0;
  int n_excluded = 0;    // probes discarded by the dead band
  double fraction = 0.0;
};

// Sign agreement between the grid oracle and the learned pessimistic Q_c
// evaluated at (x, behavior action), over probes sampled uniformly from X
// until n_probes fall outside the dead band.
Agreement compare_with_critics(const GridValue& grid, const critics::CriticBundle& crit,
                               int n_probes, std::uint64_t seed);

}  // namespace safefql::oracle
