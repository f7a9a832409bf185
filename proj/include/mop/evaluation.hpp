#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mop/baselines.hpp"
#include "mop/model.hpp"
#include "mop/systems.hpp"
#include "mop/training.hpp"

namespace mop {

// Test systems and trajectories (horizon + 1 outputs each) drawn from the
// test seed namespace.
struct EvalSet {
  DistributionSpec spec;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::vector<TaskInstance> tasks;
  std::vector<Trajectory> trajectories;

  std::size_t size() const { return tasks.size(); }
};

EvalSet make_eval_set(const DistributionSpec& spec, std::size_t n, std::size_t horizon,
                      std::uint64_t seed);

class MopPredictor final : public Predictor {
 public:
  explicit MopPredictor(std::shared_ptr<const LoadedModel> model);
  std::string_view id() const override { return "mop"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override;
  // One causal pass over the whole prompt.
  Matrix predict_sequence(const Trajectory& traj) override;
  std::vector<double> predict_from_prefix(const Trajectory& traj, std::size_t t) override;

 private:
  Matrix prompt_outputs(const Trajectory& traj, std::size_t rows) const;
  Matrix prompt_inputs(const Trajectory& traj, std::size_t rows) const;

  std::shared_ptr<const LoadedModel> model_;
  std::vector<double> ys_;
  std::vector<double> us_;
  std::size_t t_ = 0;
};

PredictorFactory mop_factory(std::shared_ptr<const LoadedModel> model);

// "mop" (requires a model) or any baseline name.
PredictorFactory make_predictor_factory(const std::string& name,
                                        std::shared_ptr<const LoadedModel> model);

// Model-aware baseline for a distribution: "kf" for linear, "ekf" for the
// quadrotor.
std::string model_aware_baseline(const DistributionSpec& spec);

// Throws ConfigError when the model's token layout does not fit the preset.
void check_model_matches(const ModelConfig& config, const DistributionSpec& spec,
                         std::size_t horizon);

// Entry k of mean/stderr is time t = k + 1: mean over systems of
// ||yhat_t - y_t||. Systems with a non-finite prediction are listed in
// `failed` and left out of the statistics.
struct ErrorCurve {
  std::string predictor;
  std::string preset;
  std::size_t horizon = 0;
  std::size_t n_systems = 0;
  std::uint64_t seed = 0;
  std::vector<double> mean;
  std::vector<double> stderr_;
  Matrix per_system;                    // rows: kept systems, cols: t = 1..horizon
  std::vector<std::size_t> system_ids;  // EvalSet index of each kept row
  std::vector<std::size_t> failed;
};

ErrorCurve error_curve(const PredictorFactory& factory, const std::string& id, const EvalSet& set);

// Per-system average over t in [lo, hi], then mean and standard error over
// systems.
struct WindowStat {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
};

WindowStat window_stat(const ErrorCurve& curve, std::size_t lo, std::size_t hi);

struct PairedWindow {
  WindowStat a;
  WindowStat b;
  bool ratio_defined = false;
  double ratio = 0.0;
  double ratio_stderr = 0.0;  // delta method over paired systems
  double diff = 0.0;          // a - b
  double diff_stderr = 0.0;   // paired
  double pooled_stderr = 0.0; // sqrt(se_a^2 + se_b^2)
};

PairedWindow compare_window(const ErrorCurve& a, const ErrorCurve& b, std::size_t lo,
                            std::size_t hi);

struct Comparison {
  std::string a;
  std::string b;
  std::vector<std::optional<double>> ratio;  // per t; empty when b's mean < 1e-12
  PairedWindow early;                         // t in [2, 10]
  PairedWindow late;                          // t in [T - 10, T]
};

Comparison compare_predictors(const ErrorCurve& a, const ErrorCurve& b);

// (1/(N*T)) sum_{i,t} ||y_{i,t+1} - yhat_{i,t+1}||, with predictions[i] row t
// predicting y_{t+1}.
double empirical_risk(std::span<const Matrix> predictions, std::span<const Trajectory> trajectories);

struct RiskReport {
  std::string baseline;
  std::size_t n = 0;
  std::size_t horizon = 0;
  double risk_model = 0.0;
  double risk_baseline = 0.0;
  double delta = 0.0;
  double delta_stderr = 0.0;
};

RiskReport excess_risk_from_curves(const ErrorCurve& model, const ErrorCurve& baseline);
RiskReport empirical_excess_risk(const PredictorFactory& model, const EvalSet& set);

double spearman(std::span<const double> x, std::span<const double> y);
double kendall_tau(std::span<const double> x, std::span<const double> y);

struct LogLogFit {
  double slope = 0.0;
  double intercept = 0.0;
};
LogLogFit loglog_fit(std::span<const double> x, std::span<const double> y);

struct ScalingCell {
  std::size_t num_systems = 0;
  std::size_t horizon = 0;
  bool diverged = false;
  std::string note;
  RiskReport risk;
};

struct ScalingReport {
  std::vector<ScalingCell> cells;
  std::size_t cells_in_fit = 0;
  double spearman_delta_vs_mt = 0.0;
  LogLogFit fit;  // log(delta) against log(M*T), positive deltas only
  std::string note;
};

// Produces the final checkpoint for a training config.
using Trainer = std::function<std::filesystem::path(const TrainConfig&)>;

// Trains base (with num_systems/horizon replaced per cell) through `trainer`
// and evaluates each model against the model-aware baseline on a common
// held-out set.
ScalingReport scaling_experiment(const std::vector<std::pair<std::size_t, std::size_t>>& grid,
                                 const TrainConfig& base, const Trainer& trainer,
                                 std::size_t eval_n, std::size_t eval_horizon,
                                 std::uint64_t eval_seed);

ScalingReport scaling_report(std::vector<ScalingCell> cells);

struct RobustnessCell {
  std::size_t system = 0;
  std::size_t t = 0;
  std::size_t tau = 0;
  double delta_loss = 0.0;    // E[l(y_{t+1}, TF(Y_t)) - l(y_{t+1}, TF(Y'_t))]
  double output_shift = 0.0;  // sum_{j=tau}^{t} ||y_j - y'_j||
  double k_hat = 0.0;         // (t - tau) |delta_loss| / output_shift
};

struct RobustnessReport {
  std::size_t t = 0;
  std::size_t draws = 0;
  double scale = 0.0;
  std::vector<RobustnessCell> cells;
  std::vector<std::size_t> gaps;            // t - tau, per swept tau
  std::vector<double> mean_abs_delta;       // per gap, over systems
  std::vector<double> mean_k_hat;           // per gap
  double k_max = 0.0;
  double k_median = 0.0;
  double k_q90 = 0.0;
  double kendall_tau_gap_vs_delta = 0.0;
};

// Linear presets only. Paired trajectories share every noise draw except
// (w_tau, v_tau), which is shifted by scale * sigma * xi.
RobustnessReport robustness_probe(const PredictorFactory& model, const DistributionSpec& spec,
                                  std::size_t systems, std::size_t t,
                                  const std::vector<std::size_t>& taus, double scale,
                                  std::size_t draws, std::uint64_t seed);

struct MatrixPowerStudy {
  std::vector<double> mean_norms;  // mean ||A^t||_2 for t = 0..t_max
  double overshoot_of_mean = 0.0;  // max_t mean_norms[t] / mean_norms[0]
  std::vector<double> overshoot;   // per system max_t ||A^t|| / ||A^0||
  double overshoot_mean = 0.0;
  double overshoot_stderr = 0.0;
};

MatrixPowerStudy matrix_power_profile(std::span<const Matrix> matrices, std::size_t t_max);
MatrixPowerStudy matrix_power_study(SamplingMode mode, std::size_t count, std::size_t t_max,
                                    std::uint64_t seed);

struct ShiftEntry {
  double variance = 0.0;
  ErrorCurve mop;
  ErrorCurve baseline;
  PairedWindow late;
};

struct DistributionShiftReport {
  double train_variance = 0.0;
  std::vector<ShiftEntry> entries;
};

DistributionShiftReport distribution_shift_sweep(const PredictorFactory& model,
                                                 const DistributionSpec& base,
                                                 double train_variance,
                                                 const std::vector<double>& test_variances,
                                                 std::size_t n, std::size_t horizon,
                                                 std::uint64_t seed);

}  // namespace mop
