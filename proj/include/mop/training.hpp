#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mop/checkpoint.hpp"
#include "mop/model.hpp"
#include "mop/systems.hpp"

namespace mop {

inline constexpr const char* kToolVersion = "mop 0.1.0";

enum class LossKind { l2_norm, squared_l2 };

std::string_view loss_kind_name(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string preset = "linear-dense";
  ModelConfig model;
  std::size_t num_systems = 2000;
  std::size_t horizon = 50;
  std::size_t steps = 5000;
  std::size_t batch_size = 64;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::l2_norm;
  double grad_clip = 1.0;
  std::size_t checkpoint_every = 1000;
  bool fresh_trajectories = false;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// Missing keys keep their defaults; unknown keys or wrong types raise
// ConfigError naming every offending key.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct MetaSystemRecord {
  std::size_t index = 0;
  std::uint64_t system_seed = 0;
  std::uint64_t trajectory_seed = 0;
};

// Source systems are stored as seeds; parameters and trajectories are
// regenerated on demand.
struct MetaDataset {
  DistributionSpec spec;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::vector<MetaSystemRecord> systems;
  std::vector<TaskInstance> tasks;  // sampled once, index-aligned with systems

  std::size_t size() const { return systems.size(); }
  TaskInstance task(std::size_t i) const;
  // horizon + 1 outputs. With a step index, noise is redrawn for that step
  // (fresh-trajectory mode).
  Trajectory trajectory(std::size_t i, std::optional<std::size_t> fresh_step = std::nullopt) const;
  nlohmann::ordered_json manifest() const;
  // FNV-1a of the serialized manifest, as 16 hex digits.
  std::string hash() const;
};

MetaDataset build_meta_dataset(std::string_view preset, std::size_t num_systems,
                               std::size_t horizon, std::uint64_t seed);

struct TrainingExample {
  std::size_t system_index = 0;
  Trajectory trajectory;
};

// Stacked prompt tokens y_{0:T-1} (with inputs) and targets y_{1:T}, after a
// canonical sort by system index.
template <typename Real>
struct PackedBatch {
  Tensor<Real> tokens;
  Tensor<Real> targets;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

template <typename Real>
PackedBatch<Real> pack_batch(const ModelConfig& config, std::span<const TrainingExample> examples);

// Adds the loss node for predictions against targets: mean over every
// (trajectory, time) row of the per-row norm (or squared norm).
template <typename Real>
Var loss_node(Graph<Real>& graph, Var predictions, Var targets, LossKind kind);

// (1/(B*T)) sum_{i,t} l(y_{i,t+1}, TF(y_{i,0:t})), one forward per batch.
template <typename Real>
double batch_loss(const TransformerWeights<Real>& weights,
                  std::span<const TrainingExample> examples, LossKind kind = LossKind::l2_norm);

// Indices of the batch drawn at a step, sorted.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t step,
                                       std::size_t dataset_size, std::size_t batch_size);

struct TrainStepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double wallclock_s = 0.0;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<TrainStepLog> log;
  std::string dataset_hash;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  bool quiet = true;
};

// Writes checkpoints/step_XXXXXX.ckpt every checkpoint_every steps,
// final.ckpt, loss.csv and manifest.json under out_dir. On divergence the
// weights before the failing step go to last_good.ckpt and
// TrainingDivergedError is thrown.
TrainResult train(const TrainConfig& config, const TrainOptions& options);

std::string fnv1a_hex(std::string_view bytes);

}  // namespace mop
