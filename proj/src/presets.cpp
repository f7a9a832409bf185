#include "mop/presets.hpp"

#include <sstream>

namespace mop {

TrainConfig desk_train_config(std::string_view distribution, std::uint64_t seed) {
  const DistributionSpec spec = distribution_preset(distribution);
  TrainConfig c;
  c.preset = spec.name;
  c.seed = seed;
  c.model.output_dim = spec.output_dim;
  c.model.control_dim = spec.input_dim();
  if (spec.switch_time) {
    c.horizon = 2 * *spec.switch_time;
  }
  if (spec.family == SystemFamily::quadrotor) {
    // Outputs reach tens of units over 50 steps; inputs sit near hover
    // thrust mg/2 with m in [0.5, 2].
    c.model.output_scale = 10.0;
    c.model.control_offset = 6.25;
    c.model.control_scale = 2.5;
  }
  return c;
}

std::vector<std::string> experiment_preset_names() {
  return {"linear-iid",      "linear-colored", "linear-switching", "quadrotor",
          "hard-triangular", "dist-shift",     "risk-scaling"};
}

ExperimentPreset experiment_preset(std::string_view name, std::uint64_t seed) {
  ExperimentPreset p;
  p.name = std::string(name);
  auto linear = [&](const char* distribution) {
    p.train = desk_train_config(distribution, seed);
    p.eval.distribution = distribution;
    p.eval.horizon = p.train.horizon;
    p.eval.predictors = {"mop", "kf", "ar-ols"};
  };
  if (name == "linear-iid") {
    linear("linear-dense");
    p.eval.probe_systems = 20;
    p.eval.probe_t = 40;
    p.eval.probe_taus = {5, 10, 15, 20, 25, 30, 35, 38, 39};
  } else if (name == "linear-colored") {
    linear("linear-colored");
  } else if (name == "linear-switching") {
    linear("linear-switching");
  } else if (name == "quadrotor") {
    p.train = desk_train_config("quadrotor", seed);
    p.eval.distribution = "quadrotor";
    p.eval.horizon = p.train.horizon;
    p.eval.predictors = {"mop", "ekf", "ar-ols"};
  } else if (name == "hard-triangular") {
    linear("linear-triangular");
    p.eval.power_count = 100;
    p.eval.power_t_max = 50;
  } else if (name == "dist-shift") {
    linear("linear-dense");
    p.eval.predictors = {"mop", "kf"};
    p.eval.train_variance = distribution_preset("linear-dense").noise_var_w;
    p.eval.test_variances = {0.01, 0.04, 0.09};
  } else if (name == "risk-scaling") {
    linear("linear-dense");
    p.eval.predictors = {"mop", "kf"};
    p.eval.grid = {{500, 50}, {1000, 50}, {2000, 50}, {4000, 50}};
  } else {
    std::ostringstream os;
    os << "unknown experiment '" << name << "'; valid experiments:";
    for (const auto& n : experiment_preset_names()) {
      os << ' ' << n;
    }
    throw UnknownPresetError(os.str());
  }
  return p;
}

}  // namespace mop
