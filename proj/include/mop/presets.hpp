#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mop/training.hpp"

namespace mop {

struct EvalPlan {
  std::string distribution;
  std::size_t n = 100;
  std::size_t horizon = 50;
  std::vector<std::string> predictors;
  // dist-shift
  double train_variance = 0.01;
  std::vector<double> test_variances;
  // risk-scaling
  std::vector<std::pair<std::size_t, std::size_t>> grid;
  // hard-triangular
  std::size_t power_count = 0;
  std::size_t power_t_max = 50;
  // linear-iid robustness probe
  std::size_t probe_systems = 0;
  std::size_t probe_t = 40;
  std::vector<std::size_t> probe_taus;
  double probe_scale = 1.0;
  std::size_t probe_draws = 256;
};

struct ExperimentPreset {
  std::string name;
  TrainConfig train;
  EvalPlan eval;
};

// Desk-scale training defaults for a system distribution.
TrainConfig desk_train_config(std::string_view distribution, std::uint64_t seed = 0);

// linear-iid, linear-colored, linear-switching, quadrotor, hard-triangular,
// dist-shift, risk-scaling. Only seed fields depend on `seed`.
ExperimentPreset experiment_preset(std::string_view name, std::uint64_t seed = 0);
std::vector<std::string> experiment_preset_names();

}  // namespace mop
