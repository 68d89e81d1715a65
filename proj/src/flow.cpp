#include "safefql/flow.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace safefql::flow {

namespace {

using Eigen::Index;
using Eigen::MatrixXf;

// Assembles the flow-matching regression pair for a batch: inputs
// [x; x_t; t] and the constant-velocity targets a - z.
void assemble(const env::TrajectoryDataset& ds, const std::vector<std::size_t>& idx, Rng& rng,
              MatrixXf& input, MatrixXf& target) {
  const Index B = static_cast<Index>(idx.size());
  input.resize(5, B);
  target.resize(2, B);
  for (Index j = 0; j < B; ++j) {
    const env::Transition& tr = ds.transitions[idx[j]];
    const auto [z1, z2] = rng.normal2();
    const float t = static_cast<float>(rng.uniform());
    const float a1 = tr.action.x(), a2 = tr.action.y();
    input(0, j) = tr.state.x();
    input(1, j) = tr.state.y();
    input(2, j) = (1.0f - t) * static_cast<float>(z1) + t * a1;
    input(3, j) = (1.0f - t) * static_cast<float>(z2) + t * a2;
    input(4, j) = t;
    target(0, j) = a1 - static_cast<float>(z1);
    target(1, j) = a2 - static_cast<float>(z2);
  }
}

}  // namespace

double flow_matching_loss(const env::TrajectoryDataset& ds, const std::vector<std::size_t>& idx,
                          const FlowTeacher& teacher, Rng& rng) {
  if (idx.empty()) throw ConfigError("flow_matching_loss: empty batch");
  MatrixXf input, target;
  assemble(ds, idx, rng, input, target);
  const MatrixXf out = nn::mlp_forward_batch<float>(teacher.net, input);
  return (out - target).array().cast<double>().square().colwise().sum().mean();
}

FlowTeacher train_flow_teacher(const env::TrajectoryDataset& ds, const FlowConfig& cfg,
                               const std::string& metrics_csv_path) {
  if (ds.transitions.empty()) throw ConfigError("train_flow_teacher: empty dataset");
  FlowTeacher teacher;
  teacher.k_steps = cfg.k_steps;
  teacher.net = nn::mlp_init<float>(nn::LayerSpec{5, cfg.hidden, 2}, derive_seed(cfg.seed, 11));
  Rng rng(derive_seed(cfg.seed, 0xf10));

  std::ofstream csv;
  if (!metrics_csv_path.empty()) {
    csv.open(metrics_csv_path);
    if (!csv) throw IoError("cannot open " + metrics_csv_path);
    csv << "step,l_flow\n";
  }

  std::vector<std::size_t> idx(cfg.batch_size);
  MatrixXf input, target;
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : idx) i = rng.index(ds.transitions.size());
    assemble(ds, idx, rng, input, target);

    nn::ForwardTrace<float> trace;
    const MatrixXf& out = nn::mlp_forward_trace(teacher.net, input, trace);
    const MatrixXf err = out - target;
    const double loss = err.array().cast<double>().square().colwise().sum().mean();
    if (!std::isfinite(loss))
      throw NumericError("train_flow_teacher: non-finite loss at step " + std::to_string(step));

    const MatrixXf upstream = (2.0f / static_cast<float>(cfg.batch_size)) * err;
    nn::GradientsF grads;
    nn::mlp_backward(teacher.net, trace, upstream, &grads);
    nn::adam_step(teacher.net, grads, cfg.lr);
    nn::ema_update(teacher.net, 0.005);

    if (csv.is_open() && (step % cfg.log_every == 0 || step == cfg.steps))
      csv << step << "," << loss << "\n";
  }
  return teacher;
}

void save_teacher(const FlowTeacher& t, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nn::save_params(t.net, dir + "/flow_teacher.sfql");
  nlohmann::json meta;
  meta["k_steps"] = t.k_steps;
  meta["input_dim"] = t.net.spec.input_dim;
  meta["hidden"] = t.net.spec.hidden;
  meta["output_dim"] = t.net.spec.output_dim;
  std::ofstream out(dir + "/flow_teacher.json");
  if (!out) throw IoError("cannot open " + dir + "/flow_teacher.json");
  out << meta.dump(2) << "\n";
}

bool teacher_exists(const std::string& dir) {
  return std::filesystem::exists(dir + "/flow_teacher.json");
}

FlowTeacher load_teacher(const std::string& dir) {
  if (!teacher_exists(dir))
    throw OrderingError("flow teacher checkpoint missing in " + dir +
                        " (run `train flow` first)");
  FlowTeacher t;
  t.net = nn::load_params<float>(dir + "/flow_teacher.sfql");
  std::ifstream in(dir + "/flow_teacher.json");
  nlohmann::json meta = nlohmann::json::parse(in);
  t.k_steps = meta.at("k_steps").get<int>();
  return t;
}

}  // namespace safefql::flow
