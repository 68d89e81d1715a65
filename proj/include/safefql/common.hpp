// Shared basics: error types, seeded RNG streams, small parallel helpers.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace safefql {

using Vec2 = Eigen::Vector2d;
using Vec2f = Eigen::Vector2f;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SpecError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct OrderingError : Error {
  using Error::Error;
};
struct InfeasibleError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Independent stream seed for worker `stream` of a run seeded with `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  splitmix64(s);
  return splitmix64(s);
}

// Counter-free splitmix64 stream. All sampling in the project goes through
// this class so that runs are reproducible independent of the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x2545f4914f6cdd1dULL) {
    splitmix64(state_);
  }

  std::uint64_t next() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }

  // Box-Muller pair of independent standard normals.
  std::pair<double, double> normal2() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    return {r * std::cos(t), r * std::sin(t)};
  }

  double normal() { return normal2().first; }

  // Uniform over the closed unit disk, by rejection from the square.
  Vec2 disk() {
    for (;;) {
      const double x = uniform(-1.0, 1.0);
      const double y = uniform(-1.0, 1.0);
      if (x * x + y * y <= 1.0) return {x, y};
    }
  }

 private:
  std::uint64_t state_;
};

// Radial projection onto the closed unit disk.
inline Vec2 project_to_disk(const Vec2& a) {
  const double n = a.norm();
  return n > 1.0 ? Vec2(a / n) : a;
}

inline Vec2f project_to_disk(const Vec2f& a) {
  const float n = a.norm();
  return n > 1.0f ? Vec2f(a / n) : a;
}

// Runs fn(begin, end) over [0, total) split across worker threads. Workers
// write to disjoint index ranges, so results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t total, Fn&& fn) {
  if (total == 0) return;
  std::size_t workers = std::thread::hardware_concurrency();
  if (workers == 0) workers = 1;
  if (workers > total) workers = total;
  if (workers == 1) {
    fn(std::size_t{0}, total);
    return;
  }
  const std::size_t chunk = (total + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(total, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace safefql
