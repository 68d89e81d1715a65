// Phase-2 behavior modeling: conditional flow-matching teacher trained by
// behavioral cloning, K-step Euler action sampling and the one-step teacher
// map used as the distillation target.
#pragma once

#include "safefql/boat_env.hpp"
#include "safefql/mlp.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace safefql::flow {

// Velocity-field network over (state || interpolant action || time scalar).
struct FlowTeacher {
  nn::ParamSetF net;  // 5 -> ... -> 2
  int k_steps = 10;
};

// Straight-line interpolant x_t = (1 - t) z + t a.
inline Vec2 interpolate(const Vec2& z, const Vec2& a, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate: t in [0,1]");
  return (1.0 - t) * z + t * a;
}

inline Eigen::VectorXf velocity_input(const Vec2& x, const Vec2& y, double t) {
  Eigen::VectorXf in(5);
  in << static_cast<float>(x.x()), static_cast<float>(x.y()), static_cast<float>(y.x()),
      static_cast<float>(y.y()), static_cast<float>(t);
  return in;
}

inline Vec2 velocity(const FlowTeacher& teacher, const Vec2& x, const Vec2& y, double t) {
  const Eigen::VectorXf out = nn::mlp_forward<float>(teacher.net, velocity_input(x, y, t));
  return {static_cast<double>(out(0)), static_cast<double>(out(1))};
}

// Explicit Euler over [0, 1] with K uniform steps and left-endpoint time
// evaluation: y_{k+1} = y_k + (1/K) v(y_k, k/K).
template <typename VelocityFn>
Vec2 integrate_velocity(const VelocityFn& v, const Vec2& z, int k_steps) {
  if (k_steps < 1) throw ConfigError("integrate_velocity: k_steps >= 1");
  Vec2 y = z;
  const double h = 1.0 / k_steps;
  for (int k = 0; k < k_steps; ++k) {
    y += h * v(y, static_cast<double>(k) * h);
    if (!y.allFinite()) throw NumericError("integrate_velocity: non-finite state");
  }
  return y;
}

// K-step flow sample, projected onto the unit action disk.
inline Vec2 integrate_flow(const FlowTeacher& teacher, const Vec2& x, const Vec2& z,
                           int k_steps_override = 0) {
  const int k = k_steps_override > 0 ? k_steps_override : teacher.k_steps;
  const Vec2 y = integrate_velocity(
      [&](const Vec2& pos, double t) { return velocity(teacher, x, pos, t); }, z, k);
  return project_to_disk(y);
}

// Single Euler step over [0, 1]: z + v(x, z, 0), projected. Identical to
// integrate_flow with K = 1 by construction.
inline Vec2 one_step_teacher(const FlowTeacher& teacher, const Vec2& x, const Vec2& z) {
  return integrate_flow(teacher, x, z, 1);
}

// Mean over the batch of ||v(x, x_t, t) - (a - z)||^2 with fresh z ~ N(0,I)
// and t ~ U[0,1] per sample.
double flow_matching_loss(const env::TrajectoryDataset& ds, const std::vector<std::size_t>& idx,
                          const FlowTeacher& teacher, Rng& rng);

struct FlowConfig {
  std::vector<int> hidden{256, 256, 256};
  int k_steps = 10;
  double lr = 3e-4;
  int batch_size = 256;
  std::int64_t steps = 500000;
  std::uint64_t seed = 0;
  int log_every = 1000;
};

FlowTeacher train_flow_teacher(const env::TrajectoryDataset& ds, const FlowConfig& cfg,
                               const std::string& metrics_csv_path = "");

void save_teacher(const FlowTeacher& t, const std::string& dir);
FlowTeacher load_teacher(const std::string& dir);
bool teacher_exists(const std::string& dir);

}  // namespace safefql::flow
