// ReLU multilayer perceptrons with exact reverse-mode gradients, Adam
// updates and EMA target copies. Templated on scalar so the same code path
// runs in float for training and double for finite-difference checks.
#pragma once

#include "safefql/common.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

namespace safefql::nn {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Instrumentation: one count per sample column pushed through a forward pass.
inline std::atomic<std::uint64_t> g_forward_evals{0};

inline std::uint64_t forward_eval_count() {
  return g_forward_evals.load(std::memory_order_relaxed);
}
inline void reset_forward_eval_count() {
  g_forward_evals.store(0, std::memory_order_relaxed);
}

struct LayerSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;

  void validate() const {
    if (input_dim < 1 || output_dim < 1)
      throw SpecError("LayerSpec: dims must be >= 1");
    if (hidden.empty()) throw SpecError("LayerSpec: hidden list must be non-empty");
    for (int h : hidden)
      if (h < 1) throw SpecError("LayerSpec: hidden dims must be >= 1");
  }

  // [input, hidden..., output]
  std::vector<int> dims() const {
    std::vector<int> d;
    d.reserve(hidden.size() + 2);
    d.push_back(input_dim);
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(output_dim);
    return d;
  }

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }

  std::int64_t param_count() const {
    const auto d = dims();
    std::int64_t n = 0;
    for (std::size_t l = 0; l + 1 < d.size(); ++l)
      n += static_cast<std::int64_t>(d[l + 1]) * d[l] + d[l + 1];
    return n;
  }

  bool operator==(const LayerSpec& o) const {
    return input_dim == o.input_dim && hidden == o.hidden && output_dim == o.output_dim;
  }
};

template <typename S>
struct Gradients {
  std::vector<Matrix<S>> w;
  std::vector<Vector<S>> b;
};

// One network's parameters, Adam moments and EMA target copy.
template <typename S>
struct ParamSet {
  LayerSpec spec;
  std::vector<Matrix<S>> w;       // w[l]: dims[l+1] x dims[l]
  std::vector<Vector<S>> b;       // b[l]: dims[l+1]
  std::vector<Matrix<S>> ema_w;
  std::vector<Vector<S>> ema_b;
  std::vector<Matrix<S>> m_w, v_w;
  std::vector<Vector<S>> m_b, v_b;
  std::uint64_t adam_steps = 0;
};

enum class Weights { kOnline, kTarget };

template <typename S>
ParamSet<S> mlp_zero(const LayerSpec& spec) {
  spec.validate();
  ParamSet<S> p;
  p.spec = spec;
  const auto d = spec.dims();
  const int L = spec.layer_count();
  for (int l = 0; l < L; ++l) {
    p.w.push_back(Matrix<S>::Zero(d[l + 1], d[l]));
    p.b.push_back(Vector<S>::Zero(d[l + 1]));
    p.m_w.push_back(Matrix<S>::Zero(d[l + 1], d[l]));
    p.m_b.push_back(Vector<S>::Zero(d[l + 1]));
    p.v_w.push_back(Matrix<S>::Zero(d[l + 1], d[l]));
    p.v_b.push_back(Vector<S>::Zero(d[l + 1]));
  }
  p.ema_w = p.w;
  p.ema_b = p.b;
  return p;
}

// He fan-in initialization: w ~ N(0, 2/fan_in), biases zero, EMA copy equal
// to the online weights, Adam moments zero.
template <typename S>
ParamSet<S> mlp_init(const LayerSpec& spec, std::uint64_t seed) {
  ParamSet<S> p = mlp_zero<S>(spec);
  Rng rng(derive_seed(seed, 0x6d6c70));
  const auto d = spec.dims();
  for (int l = 0; l < spec.layer_count(); ++l) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(d[l]));
    for (Eigen::Index r = 0; r < p.w[l].rows(); ++r)
      for (Eigen::Index c = 0; c < p.w[l].cols(); ++c)
        p.w[l](r, c) = static_cast<S>(stddev * rng.normal());
  }
  p.ema_w = p.w;
  p.ema_b = p.b;
  return p;
}

// Activations per layer: acts[0] is the input, acts[l+1] the (post-ReLU)
// output of layer l; the last entry is the linear network output.
template <typename S>
struct ForwardTrace {
  std::vector<Matrix<S>> acts;
};

template <typename S>
const Matrix<S>& mlp_forward_trace(const ParamSet<S>& p, const Matrix<S>& input,
                                   ForwardTrace<S>& trace, Weights which = Weights::kOnline) {
  if (input.rows() != p.spec.input_dim)
    throw ShapeError("mlp_forward: input has " + std::to_string(input.rows()) +
                     " rows, expected " + std::to_string(p.spec.input_dim));
  const auto& w = which == Weights::kOnline ? p.w : p.ema_w;
  const auto& b = which == Weights::kOnline ? p.b : p.ema_b;
  const int L = p.spec.layer_count();
  trace.acts.assign(1, input);
  for (int l = 0; l < L; ++l) {
    Matrix<S> z = (w[l] * trace.acts.back()).colwise() + b[l];
    if (l + 1 < L) z = z.cwiseMax(S(0));
    trace.acts.push_back(std::move(z));
  }
  g_forward_evals.fetch_add(static_cast<std::uint64_t>(input.cols()),
                            std::memory_order_relaxed);
  return trace.acts.back();
}

template <typename S>
Matrix<S> mlp_forward_batch(const ParamSet<S>& p, const Matrix<S>& input,
                            Weights which = Weights::kOnline) {
  ForwardTrace<S> trace;
  mlp_forward_trace(p, input, trace, which);
  return trace.acts.back();
}

template <typename S>
Vector<S> mlp_forward(const ParamSet<S>& p, const Vector<S>& input,
                      Weights which = Weights::kOnline) {
  return mlp_forward_batch(p, Matrix<S>(input), which);
}

// Reverse-mode gradients of sum_j upstream_jᵀ · output_j. ReLU subgradient
// at exactly zero is zero. Returns the gradient w.r.t. the input columns.
template <typename S>
Matrix<S> mlp_backward(const ParamSet<S>& p, const ForwardTrace<S>& trace,
                       const Matrix<S>& upstream, Gradients<S>* grads) {
  const int L = p.spec.layer_count();
  if (upstream.rows() != p.spec.output_dim || upstream.cols() != trace.acts[0].cols())
    throw ShapeError("mlp_backward: upstream shape mismatch");
  if (grads) {
    grads->w.resize(L);
    grads->b.resize(L);
  }
  Matrix<S> u = upstream;
  for (int l = L - 1; l >= 0; --l) {
    if (grads) {
      grads->w[l].noalias() = u * trace.acts[l].transpose();
      grads->b[l] = u.rowwise().sum();
    }
    Matrix<S> prev = p.w[l].transpose() * u;
    if (l > 0)
      prev.array() *= (trace.acts[l].array() > S(0)).template cast<S>();
    u = std::move(prev);
  }
  return u;
}

// Single-sample convenience: gradients of upstreamᵀ·output.
template <typename S>
Matrix<S> mlp_backward(const ParamSet<S>& p, const Vector<S>& input,
                       const Vector<S>& upstream, Gradients<S>* grads) {
  ForwardTrace<S> trace;
  mlp_forward_trace(p, Matrix<S>(input), trace);
  return mlp_backward(p, trace, Matrix<S>(upstream), grads);
}

template <typename S>
void check_shapes_match(const ParamSet<S>& p, const Gradients<S>& g) {
  if (static_cast<int>(g.w.size()) != p.spec.layer_count() ||
      static_cast<int>(g.b.size()) != p.spec.layer_count())
    throw ShapeError("adam_step: gradient layer count mismatch");
  for (std::size_t l = 0; l < g.w.size(); ++l)
    if (g.w[l].rows() != p.w[l].rows() || g.w[l].cols() != p.w[l].cols() ||
        g.b[l].size() != p.b[l].size())
      throw ShapeError("adam_step: gradient shape mismatch at layer " + std::to_string(l));
}

// Bias-corrected Adam update. beta1/beta2/eps follow the usual defaults;
// the learning rate is the caller's.
template <typename S>
void adam_step(ParamSet<S>& p, const Gradients<S>& g, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  check_shapes_match(p, g);
  for (std::size_t l = 0; l < g.w.size(); ++l)
    if (!g.w[l].allFinite() || !g.b[l].allFinite())
      throw NumericError("adam_step: non-finite gradient at layer " + std::to_string(l));
  p.adam_steps += 1;
  const double t = static_cast<double>(p.adam_steps);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(beta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(beta2, t)));
  const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
  const S a = static_cast<S>(lr), e = static_cast<S>(eps);
  for (std::size_t l = 0; l < g.w.size(); ++l) {
    p.m_w[l] = b1 * p.m_w[l] + (S(1) - b1) * g.w[l];
    p.v_w[l] = b2 * p.v_w[l].array() + (S(1) - b2) * g.w[l].array().square();
    p.w[l].array() -= a * (c1 * p.m_w[l].array()) / ((c2 * p.v_w[l].array()).sqrt() + e);
    p.m_b[l] = b1 * p.m_b[l] + (S(1) - b1) * g.b[l];
    p.v_b[l] = b2 * p.v_b[l].array() + (S(1) - b2) * g.b[l].array().square();
    p.b[l].array() -= a * (c1 * p.m_b[l].array()) / ((c2 * p.v_b[l].array()).sqrt() + e);
  }
}

// ema <- (1 - rate) * ema + rate * online, elementwise.
template <typename S>
void ema_update(ParamSet<S>& p, double rate) {
  if (!(rate > 0.0 && rate <= 1.0))
    throw ConfigError("ema_update: rate must be in (0, 1]");
  const S r = static_cast<S>(rate);
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    p.ema_w[l] = (S(1) - r) * p.ema_w[l] + r * p.w[l];
    p.ema_b[l] = (S(1) - r) * p.ema_b[l] + r * p.b[l];
  }
}

// --- checkpoint io ----------------------------------------------------------
//
// Binary layout (little endian): magic "SFQL", u16 version, u32 layer count,
// u32 dims[layer count + 1], then float32 blocks in order: per-layer weights
// (row major) and biases, per-layer EMA copies, per-layer Adam m, per-layer
// Adam v, u64 step count.

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

struct File {
  std::FILE* f = nullptr;
  explicit File(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {
    if (!f) throw IoError("cannot open " + path);
  }
  ~File() {
    if (f) std::fclose(f);
  }
  File(const File&) = delete;
  File& operator=(const File&) = delete;
};

inline void write_bytes(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("short write");
}
inline void read_bytes(std::FILE* f, void* p, std::size_t n) {
  if (std::fread(p, 1, n, f) != n) throw IoError("short read");
}

template <typename T>
void write_pod(std::FILE* f, T v) {
  write_bytes(f, &v, sizeof(T));
}
template <typename T>
T read_pod(std::FILE* f) {
  T v;
  read_bytes(f, &v, sizeof(T));
  return v;
}

template <typename S>
void write_mat_f32(std::FILE* f, const Matrix<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_pod<float>(f, static_cast<float>(m(r, c)));
}
template <typename S>
void write_vec_f32(std::FILE* f, const Vector<S>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) write_pod<float>(f, static_cast<float>(v(i)));
}
template <typename S>
void read_mat_f32(std::FILE* f, Matrix<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(read_pod<float>(f));
}
template <typename S>
void read_vec_f32(std::FILE* f, Vector<S>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<S>(read_pod<float>(f));
}

}  // namespace detail

template <typename S>
void save_params(const ParamSet<S>& p, const std::string& path) {
  using namespace detail;
  File file(path, "wb");
  std::FILE* f = file.f;
  write_bytes(f, "SFQL", 4);
  write_pod<std::uint16_t>(f, kCheckpointVersion);
  const auto d = p.spec.dims();
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(p.spec.layer_count()));
  for (int dim : d) write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(dim));
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    write_mat_f32(f, p.w[l]);
    write_vec_f32(f, p.b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    write_mat_f32(f, p.ema_w[l]);
    write_vec_f32(f, p.ema_b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    write_mat_f32(f, p.m_w[l]);
    write_vec_f32(f, p.m_b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    write_mat_f32(f, p.v_w[l]);
    write_vec_f32(f, p.v_b[l]);
  }
  write_pod<std::uint64_t>(f, p.adam_steps);
}

template <typename S>
ParamSet<S> load_params(const std::string& path) {
  using namespace detail;
  File file(path, "rb");
  std::FILE* f = file.f;
  char magic[4];
  read_bytes(f, magic, 4);
  if (std::memcmp(magic, "SFQL", 4) != 0) throw IoError(path + ": not an SFQL checkpoint");
  const auto version = read_pod<std::uint16_t>(f);
  if (version != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
  const auto layers = read_pod<std::uint32_t>(f);
  if (layers < 2 || layers > 64) throw IoError(path + ": implausible layer count");
  std::vector<int> dims(layers + 1);
  for (auto& dim : dims) dim = static_cast<int>(read_pod<std::uint32_t>(f));
  LayerSpec spec;
  spec.input_dim = dims.front();
  spec.output_dim = dims.back();
  spec.hidden.assign(dims.begin() + 1, dims.end() - 1);
  ParamSet<S> p = mlp_zero<S>(spec);
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    read_mat_f32(f, p.w[l]);
    read_vec_f32(f, p.b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    read_mat_f32(f, p.ema_w[l]);
    read_vec_f32(f, p.ema_b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    read_mat_f32(f, p.m_w[l]);
    read_vec_f32(f, p.m_b[l]);
  }
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    read_mat_f32(f, p.v_w[l]);
    read_vec_f32(f, p.v_b[l]);
  }
  p.adam_steps = read_pod<std::uint64_t>(f);
  return p;
}

using ParamSetF = ParamSet<float>;
using GradientsF = Gradients<float>;

}  // namespace safefql::nn
