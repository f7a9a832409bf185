#include "mop/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "mop/rng.hpp"

namespace mop {

std::string_view loss_kind_name(LossKind kind) {
  return kind == LossKind::l2_norm ? "l2_norm" : "squared_l2";
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "l2_norm") {
    return LossKind::l2_norm;
  }
  if (name == "squared_l2") {
    return LossKind::squared_l2;
  }
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected l2_norm or squared_l2)");
}

void TrainConfig::validate() const {
  std::ostringstream problems;
  if (num_systems == 0) problems << " num_systems must be >= 1;";
  if (horizon == 0) problems << " horizon must be >= 1;";
  if (batch_size == 0) problems << " batch_size must be >= 1;";
  if (!(learning_rate > 0.0)) problems << " learning_rate must be positive;";
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    problems << " betas must lie in [0, 1);";
  }
  if (!(epsilon > 0.0)) problems << " epsilon must be positive;";
  if (!(grad_clip > 0.0)) problems << " grad_clip must be positive;";
  if (checkpoint_every == 0) problems << " checkpoint_every must be >= 1;";
  if (horizon > model.max_context) {
    problems << " horizon " << horizon << " exceeds model.max_context " << model.max_context
             << ";";
  }
  const std::string msg = problems.str();
  if (!msg.empty()) {
    throw ConfigError("invalid train config:" + msg);
  }
  model.validate();
  const DistributionSpec spec = distribution_preset(preset);
  if (spec.output_dim != model.output_dim || spec.input_dim() != model.control_dim) {
    throw ConfigError("model token layout (output_dim " + std::to_string(model.output_dim) +
                      ", control_dim " + std::to_string(model.control_dim) +
                      ") does not match preset " + preset + " (output_dim " +
                      std::to_string(spec.output_dim) + ", input_dim " +
                      std::to_string(spec.input_dim()) + ")");
  }
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["preset"] = c.preset;
  j["model"] = to_json(c.model);
  j["num_systems"] = c.num_systems;
  j["horizon"] = c.horizon;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["seed"] = c.seed;
  j["loss"] = std::string(loss_kind_name(c.loss));
  j["grad_clip"] = c.grad_clip;
  j["checkpoint_every"] = c.checkpoint_every;
  j["fresh_trajectories"] = c.fresh_trajectories;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw ConfigError("train config must be a JSON object");
  }
  TrainConfig c;
  std::vector<std::string> bad;
  static const std::set<std::string> known = {
      "preset", "model",   "num_systems", "horizon", "steps",     "batch_size",
      "learning_rate", "beta1", "beta2", "epsilon", "seed", "loss",
      "grad_clip", "checkpoint_every", "fresh_trajectories"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) {
      bad.push_back(key);
    }
  }
  auto read_size = [&](const char* key, std::size_t& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_unsigned()) {
      bad.emplace_back(key);
      return;
    }
    dst = j[key].get<std::size_t>();
  };
  auto read_double = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) {
      bad.emplace_back(key);
      return;
    }
    dst = j[key].get<double>();
  };
  read_size("num_systems", c.num_systems);
  read_size("horizon", c.horizon);
  read_size("steps", c.steps);
  read_size("batch_size", c.batch_size);
  read_size("checkpoint_every", c.checkpoint_every);
  read_double("learning_rate", c.learning_rate);
  read_double("beta1", c.beta1);
  read_double("beta2", c.beta2);
  read_double("epsilon", c.epsilon);
  read_double("grad_clip", c.grad_clip);
  if (j.contains("seed")) {
    if (j["seed"].is_number_unsigned()) {
      c.seed = j["seed"].get<std::uint64_t>();
    } else {
      bad.emplace_back("seed");
    }
  }
  if (j.contains("preset")) {
    if (j["preset"].is_string()) {
      c.preset = j["preset"].get<std::string>();
    } else {
      bad.emplace_back("preset");
    }
  }
  if (j.contains("loss")) {
    try {
      c.loss = parse_loss_kind(j["loss"].is_string() ? j["loss"].get<std::string>() : "");
    } catch (const ConfigError&) {
      bad.emplace_back("loss");
    }
  }
  if (j.contains("fresh_trajectories")) {
    if (j["fresh_trajectories"].is_boolean()) {
      c.fresh_trajectories = j["fresh_trajectories"].get<bool>();
    } else {
      bad.emplace_back("fresh_trajectories");
    }
  }
  std::string model_error;
  if (j.contains("model")) {
    try {
      c.model = model_config_from_json(j["model"]);
    } catch (const ConfigError& e) {
      bad.emplace_back("model");
      model_error = e.what();
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid train config keys:";
    for (const auto& k : bad) {
      msg += " " + k;
    }
    if (!model_error.empty()) {
      msg += " (" + model_error + ")";
    }
    throw ConfigError(msg);
  }
  try {
    distribution_preset(c.preset);
  } catch (const UnknownPresetError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TaskInstance MetaDataset::task(std::size_t i) const {
  const MetaSystemRecord& r = systems.at(i);
  if (i < tasks.size()) {
    return tasks[i];
  }
  return sample_task(spec, r.system_seed, r.index);
}

Trajectory MetaDataset::trajectory(std::size_t i, std::optional<std::size_t> fresh_step) const {
  const MetaSystemRecord& r = systems.at(i);
  const std::uint64_t seed =
      fresh_step ? derive_seed(r.system_seed, 2 + *fresh_step) : r.trajectory_seed;
  return simulate_task(task(i), horizon + 1, seed);
}

nlohmann::ordered_json MetaDataset::manifest() const {
  nlohmann::ordered_json j;
  j["preset"] = spec.name;
  j["num_systems"] = systems.size();
  j["horizon"] = horizon;
  j["seed"] = seed;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& r : systems) {
    list.push_back({r.index, r.system_seed, r.trajectory_seed});
  }
  j["systems"] = std::move(list);
  return j;
}

std::string MetaDataset::hash() const { return fnv1a_hex(manifest().dump()); }

MetaDataset build_meta_dataset(std::string_view preset, std::size_t num_systems,
                               std::size_t horizon, std::uint64_t seed) {
  MetaDataset d;
  d.spec = distribution_preset(preset);
  d.horizon = horizon;
  d.seed = seed;
  d.systems.reserve(num_systems);
  for (std::size_t i = 0; i < num_systems; ++i) {
    const std::uint64_t s = derive_seed(seed, SeedSpace::train_systems, i);
    d.systems.push_back({i, s, derive_seed(s, 1)});
  }
  std::vector<TaskInstance> tasks(num_systems);
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(num_systems);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      tasks[k] = sample_task(d.spec, d.systems[k].system_seed, k);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
  d.tasks = std::move(tasks);
  return d;
}

template <typename Real>
PackedBatch<Real> pack_batch(const ModelConfig& config, std::span<const TrainingExample> examples) {
  if (examples.empty()) {
    throw std::invalid_argument("pack_batch: empty batch");
  }
  std::vector<const TrainingExample*> order;
  for (const auto& e : examples) {
    order.push_back(&e);
  }
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->system_index < b->system_index;
  });
  const std::size_t steps = order.front()->trajectory.length();
  if (steps < 2) {
    throw std::invalid_argument("pack_batch: trajectories need at least two outputs");
  }
  const std::size_t seq = steps - 1;
  const std::size_t m = config.output_dim;
  PackedBatch<Real> out;
  out.batch = order.size();
  out.seq = seq;
  out.tokens = Tensor<Real>({out.batch * seq, config.token_dim()});
  out.targets = Tensor<Real>({out.batch * seq, m});
  for (std::size_t b = 0; b < order.size(); ++b) {
    const Trajectory& traj = order[b]->trajectory;
    if (traj.length() != steps) {
      throw ShapeError("pack_batch: trajectories differ in length");
    }
    const Tensor<Real> tokens = make_tokens<Real>(config, traj.ys, traj.us);
    for (std::size_t t = 0; t < seq; ++t) {
      const auto src = tokens.row(t);
      std::copy(src.begin(), src.end(), out.tokens.row(b * seq + t).begin());
      for (std::size_t i = 0; i < m; ++i) {
        out.targets(b * seq + t, i) = static_cast<Real>(traj.ys(t + 1, i));
      }
    }
  }
  return out;
}

template <typename Real>
Var loss_node(Graph<Real>& graph, Var predictions, Var targets, LossKind kind) {
  Var residual = graph.sub(predictions, targets);
  Var per_row =
      kind == LossKind::l2_norm ? graph.row_norm(residual) : graph.row_squared_norm(residual);
  return graph.mean(per_row);
}

template <typename Real>
double batch_loss(const TransformerWeights<Real>& weights,
                  std::span<const TrainingExample> examples, LossKind kind) {
  PackedBatch<Real> packed = pack_batch<Real>(weights.config, examples);
  Graph<Real> graph;
  const std::vector<Var> params = bind_parameters(graph, weights, false);
  Var pred = build_forward(graph, weights.config, params, std::move(packed.tokens), packed.batch,
                           packed.seq);
  Var loss = loss_node(graph, pred, graph.constant(std::move(packed.targets)), kind);
  return static_cast<double>(graph.value(loss)[0]);
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step,
                                       std::size_t dataset_size, std::size_t batch_size) {
  Rng rng(derive_seed(seed, SeedSpace::batches, step));
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) {
    i = rng.index(dataset_size);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.ckpt", step);
  return buf;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

std::string format_log_row(const TrainStepLog& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.3f\n", row.step, row.loss, row.grad_norm,
                row.wallclock_s);
  return buf;
}

// Rows of an earlier loss.csv with step < start, kept when resuming.
std::vector<std::string> previous_rows(const std::filesystem::path& csv, std::size_t start) {
  std::vector<std::string> rows;
  std::ifstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) {
      continue;
    }
    const std::size_t step = std::stoull(line.substr(0, line.find(',')));
    if (step < start) {
      rows.push_back(line + "\n");
    }
  }
  return rows;
}

template <typename Real>
void adam_update(TransformerWeights<Real>& weights, AdamState<Real>& adam,
                 const std::vector<Tensor<Real>>& grads, double scale, const TrainConfig& cfg) {
  std::vector<Tensor<Real>*> w, m, v;
  weights.for_each([&](const std::string&, Tensor<Real>& t) { w.push_back(&t); });
  adam.m.for_each([&](const std::string&, Tensor<Real>& t) { m.push_back(&t); });
  adam.v.for_each([&](const std::string&, Tensor<Real>& t) { v.push_back(&t); });
  adam.t += 1;
  const double t = static_cast<double>(adam.t);
  const Real b1 = static_cast<Real>(cfg.beta1);
  const Real b2 = static_cast<Real>(cfg.beta2);
  const Real c1 = static_cast<Real>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const Real c2 = static_cast<Real>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const Real lr = static_cast<Real>(cfg.learning_rate);
  const Real eps = static_cast<Real>(cfg.epsilon);
  const Real s = static_cast<Real>(scale);
  for (std::size_t k = 0; k < w.size(); ++k) {
    Real* wp = w[k]->ptr();
    Real* mp = m[k]->ptr();
    Real* vp = v[k]->ptr();
    const Real* gp = grads[k].ptr();
    const std::size_t n = w[k]->size();
    for (std::size_t i = 0; i < n; ++i) {
      const Real g = gp[i] * s;
      mp[i] = b1 * mp[i] + (Real(1) - b1) * g;
      vp[i] = b2 * vp[i] + (Real(1) - b2) * g * g;
      wp[i] -= lr * (mp[i] * c1) / (std::sqrt(vp[i] * c2) + eps);
    }
  }
}

template <typename Real>
TrainResult train_impl(const TrainConfig& cfg, const TrainOptions& opt) {
  namespace fs = std::filesystem;
  const auto t_begin = std::chrono::steady_clock::now();
  const MetaDataset dataset =
      build_meta_dataset(cfg.preset, cfg.num_systems, cfg.horizon, cfg.seed);

  Checkpoint<Real> state;
  std::size_t start = 0;
  if (opt.resume) {
    state = load_checkpoint<Real>(*opt.resume);
    if (to_json(state.weights.config) != to_json(cfg.model)) {
      throw ConfigError("resume checkpoint model config differs from the train config");
    }
    if (!state.adam) {
      throw CheckpointError("resume checkpoint has no optimizer state");
    }
    start = state.step;
    if (start > cfg.steps) {
      throw ConfigError("resume checkpoint step " + std::to_string(start) +
                        " is beyond the configured steps");
    }
  } else {
    state.weights = init_weights<Real>(cfg.model, cfg.seed);
    state.adam = AdamState<Real>{zero_weights<Real>(cfg.model), zero_weights<Real>(cfg.model), 0};
  }
  state.metadata = nlohmann::ordered_json::object();
  state.metadata["tool_version"] = kToolVersion;
  state.metadata["train_config"] = to_json(cfg);
  state.metadata["dataset_hash"] = dataset.hash();

  const fs::path ckpt_dir = opt.out_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  const fs::path csv_path = opt.out_dir / "loss.csv";
  std::vector<std::string> kept;
  if (opt.resume && fs::exists(csv_path)) {
    kept = previous_rows(csv_path, start);
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "step,loss,grad_norm,wallclock_s\n";
  for (const auto& row : kept) {
    csv << row;
  }
  csv.flush();

  TrainResult result;
  result.dataset_hash = dataset.hash();
  std::vector<fs::path> written;

  for (std::size_t step = start; step < cfg.steps; ++step) {
    const std::vector<std::size_t> indices =
        batch_indices(cfg.seed, step, dataset.size(), cfg.batch_size);
    std::vector<TrainingExample> examples(indices.size());
    std::exception_ptr failure;
    const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(indices.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < count; ++b) {
      try {
        const std::size_t i = indices[static_cast<std::size_t>(b)];
        examples[static_cast<std::size_t>(b)] = {
            i, dataset.trajectory(i, cfg.fresh_trajectories ? std::optional<std::size_t>(step)
                                                            : std::nullopt)};
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) {
      std::rethrow_exception(failure);
    }

    PackedBatch<Real> packed = pack_batch<Real>(cfg.model, examples);
    Graph<Real> graph;
    const std::vector<Var> params = bind_parameters(graph, state.weights, true);
    Var pred = build_forward(graph, cfg.model, params, std::move(packed.tokens), packed.batch,
                             packed.seq);
    Var loss = loss_node(graph, pred, graph.constant(std::move(packed.targets)), cfg.loss);
    const double loss_value = static_cast<double>(graph.value(loss)[0]);

    auto diverge = [&](const std::string& why) {
      state.step = step;
      save_checkpoint(opt.out_dir / "last_good.ckpt", state);
      throw TrainingDivergedError("training diverged at step " + std::to_string(step) + ": " +
                                  why + "; weights before this step saved to " +
                                  (opt.out_dir / "last_good.ckpt").string());
    };
    if (!std::isfinite(loss_value) || loss_value > 1e6) {
      diverge("loss " + std::to_string(loss_value));
    }

    graph.backward(loss);
    std::vector<Tensor<Real>> grads;
    grads.reserve(params.size());
    double sq = 0.0;
    for (const Var p : params) {
      grads.push_back(graph.grad(p));
      for (const Real g : grads.back().data()) {
        sq += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    const double grad_norm = std::sqrt(sq);
    if (!std::isfinite(grad_norm)) {
      diverge("non-finite gradient");
    }
    const double scale = grad_norm > cfg.grad_clip ? cfg.grad_clip / grad_norm : 1.0;
    adam_update(state.weights, *state.adam, grads, scale, cfg);

    TrainStepLog row{step, loss_value, grad_norm,
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
                         .count()};
    csv << format_log_row(row);
    csv.flush();
    result.log.push_back(row);
    if (!opt.quiet && (step % 100 == 0 || step + 1 == cfg.steps)) {
      std::fprintf(stderr, "step %zu loss %.6f grad_norm %.4f (%.1fs)\n", step, loss_value,
                   grad_norm, row.wallclock_s);
    }
    if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      state.step = step + 1;
      const fs::path p = ckpt_dir / step_name(step + 1);
      save_checkpoint(p, state);
      written.push_back(p);
    }
  }

  state.step = cfg.steps;
  result.final_checkpoint = opt.out_dir / "final.ckpt";
  save_checkpoint(result.final_checkpoint, state);
  written.push_back(result.final_checkpoint);

  nlohmann::ordered_json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["command"] = "train";
  manifest["config"] = to_json(cfg);
  manifest["seed"] = cfg.seed;
  manifest["dataset"] = {{"preset", cfg.preset},
                         {"num_systems", cfg.num_systems},
                         {"horizon", cfg.horizon},
                         {"hash", dataset.hash()}};
  nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
  for (const auto& p : written) {
    hashes[fs::relative(p, opt.out_dir).generic_string()] = file_hash(p);
  }
  manifest["checkpoints"] = std::move(hashes);
  if (opt.resume) {
    manifest["resumed_from_step"] = start;
  }
  manifest["timings"] = {
      {"total_s",
       std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count()}};
  std::ofstream(opt.out_dir / "manifest.json") << manifest.dump(2) << "\n";
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (config.model.precision == Precision::f32) {
    return train_impl<float>(config, options);
  }
  return train_impl<double>(config, options);
}

#define MOP_INSTANTIATE_TRAINING(Real)                                                         \
  template PackedBatch<Real> pack_batch<Real>(const ModelConfig&,                              \
                                              std::span<const TrainingExample>);               \
  template Var loss_node<Real>(Graph<Real>&, Var, Var, LossKind);                              \
  template double batch_loss<Real>(const TransformerWeights<Real>&,                            \
                                   std::span<const TrainingExample>, LossKind);

MOP_INSTANTIATE_TRAINING(float)
MOP_INSTANTIATE_TRAINING(double)

#undef MOP_INSTANTIATE_TRAINING

}  // namespace mop
