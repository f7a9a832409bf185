#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mop/systems.hpp"
#include "mop/tensor.hpp"

namespace mop {

// Predicted mean and covariance of the state at the next observation time.
struct KalmanState {
  Matrix mean;  // n x 1
  Matrix cov;   // n x n

  static KalmanState zero(std::size_t n);
  static KalmanState unit_covariance(std::size_t n);
};

struct FilterStep {
  KalmanState state;
  Matrix prediction;  // m x 1, predicted y_{t+1}
  Matrix innovation;  // m x 1, y_t - C xhat_t
};

// Dynamics seen by the filter: x_{t+1} = f(x_t, u_t) + w, y = C x + v.
class FilterDynamics {
 public:
  virtual ~FilterDynamics() = default;
  virtual Matrix propagate(const Matrix& mean, std::span<const double> u) const = 0;
  virtual Matrix jacobian(const Matrix& mean, std::span<const double> u) const = 0;
  virtual const Matrix& output_matrix() const = 0;
  virtual double process_std() const = 0;
  virtual double output_std() const = 0;
};

class LinearDynamics final : public FilterDynamics {
 public:
  explicit LinearDynamics(LinearSystem system) : system_(std::move(system)) {}
  Matrix propagate(const Matrix& mean, std::span<const double> u) const override;
  Matrix jacobian(const Matrix& mean, std::span<const double> u) const override;
  const Matrix& output_matrix() const override { return system_.C; }
  double process_std() const override { return system_.sigma_w; }
  double output_std() const override { return system_.sigma_v; }

 private:
  LinearSystem system_;
};

class QuadrotorDynamics final : public FilterDynamics {
 public:
  explicit QuadrotorDynamics(QuadrotorSystem system) : system_(std::move(system)) {}
  Matrix propagate(const Matrix& mean, std::span<const double> u) const override;
  Matrix jacobian(const Matrix& mean, std::span<const double> u) const override;
  const Matrix& output_matrix() const override { return system_.C; }
  double process_std() const override { return system_.sigma_w; }
  double output_std() const override { return system_.sigma_v; }

 private:
  QuadrotorSystem system_;
};

// Standard update/predict recursion with covariance symmetrization.
FilterStep kf_step(const KalmanState& state, std::span<const double> y, const LinearSystem& system);

// Same recursion with A replaced by the Jacobian at the posterior mean and
// f used for mean propagation.
FilterStep ekf_step(const KalmanState& state, std::span<const double> y,
                    std::span<const double> u, const FilterDynamics& dynamics);
FilterStep ekf_step(const KalmanState& state, std::span<const double> y,
                    std::span<const double> u, const QuadrotorSystem& system);

inline constexpr double kArRidge = 1e-6;

// Online least squares for y_{t+1} = a1 y_t + a2 y_{t-1}.
struct ARState {
  std::size_t output_dim = 0;
  double ridge = kArRidge;
  Matrix gram;          // 2m x 2m
  Matrix cross;         // 2m x m
  Matrix coefficients;  // m x 2m, [a1 a2]
  std::vector<double> prev;   // y_{t-1}
  std::vector<double> prev2;  // y_{t-2}
  std::size_t observed = 0;

  static ARState create(std::size_t output_dim, double ridge = kArRidge);
};

std::pair<ARState, std::vector<double>> ar_ols_step(ARState state, std::span<const double> y);

// ---------------------------------------------------------------------------
// Uniform predictor interface: observe y_t (and u_t), emit a prediction of
// y_{t+1}.

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string_view id() const = 0;
  virtual std::vector<double> observe(std::span<const double> y, std::span<const double> u) = 0;
  // Row t is the prediction of y_{t+1} made after observing y_{0:t}; rows
  // cover t = 0..steps-2.
  virtual Matrix predict_sequence(const Trajectory& traj);
  // Prediction of y_{t+1} from y_{0:t} on a fresh predictor.
  virtual std::vector<double> predict_from_prefix(const Trajectory& traj, std::size_t t);
};

class KalmanPredictor final : public Predictor {
 public:
  // The filter assumes white noise at the marginal variance of the task's
  // noise model and follows a dynamics switch when the task has one.
  explicit KalmanPredictor(const TaskInstance& task, bool unit_initial_covariance = false);
  std::string_view id() const override { return "kf"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override;
  const KalmanState& state() const { return state_; }

 private:
  LinearSystem before_;
  std::optional<LinearSystem> after_;
  std::size_t switch_time_ = 0;
  KalmanState state_;
  std::size_t t_ = 0;
};

class ExtendedKalmanPredictor final : public Predictor {
 public:
  explicit ExtendedKalmanPredictor(std::unique_ptr<FilterDynamics> dynamics);
  explicit ExtendedKalmanPredictor(const TaskInstance& task);
  std::string_view id() const override { return "ekf"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override;

 private:
  std::unique_ptr<FilterDynamics> dynamics_;
  KalmanState state_;
};

class ArOlsPredictor final : public Predictor {
 public:
  explicit ArOlsPredictor(std::size_t output_dim) : state_(ARState::create(output_dim)) {}
  std::string_view id() const override { return "ar-ols"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override;
  const ARState& state() const { return state_; }

 private:
  ARState state_;
};

class ZeroPredictor final : public Predictor {
 public:
  explicit ZeroPredictor(std::size_t output_dim) : dim_(output_dim) {}
  std::string_view id() const override { return "zero"; }
  std::vector<double> observe(std::span<const double>, std::span<const double>) override {
    return std::vector<double>(dim_, 0.0);
  }

 private:
  std::size_t dim_;
};

// Plumbing check: returns the true next output.
class OraclePredictor final : public Predictor {
 public:
  explicit OraclePredictor(Trajectory traj) : traj_(std::move(traj)) {}
  std::string_view id() const override { return "oracle"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override;

 private:
  Trajectory traj_;
  std::size_t t_ = 0;
};

using PredictorFactory =
    std::function<std::unique_ptr<Predictor>(const TaskInstance&, const Trajectory&)>;

// "kf", "ekf", "ar-ols", "zero", "oracle".
PredictorFactory baseline_factory(std::string_view name);

}  // namespace mop
