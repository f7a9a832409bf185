#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mop/rng.hpp"
#include "mop/tensor.hpp"

namespace mop {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownPresetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kDivergenceNorm = 1e9;

enum class SamplingMode { dense, upper_triangular };

// x_{t+1} = A x_t + w_{t+1},  y_t = C x_t + v_t
struct LinearSystem {
  Matrix A;
  Matrix C;
  double sigma_w = 0.1;
  double sigma_v = 0.1;

  std::size_t state_dim() const { return A.rows(); }
  std::size_t output_dim() const { return C.rows(); }
};

// Planar quadrotor with state (x, z, phi, xdot, zdot, phidot) and two rotor
// thrusts as input.
struct QuadrotorSystem {
  static constexpr std::size_t kStateDim = 6;
  static constexpr std::size_t kInputDim = 2;

  double mass = 1.0;
  double arm = 1.0;
  double inertia = 1.0;
  double gravity = 10.0;
  double tau = 0.1;
  Matrix C = Matrix::matrix(3, kStateDim);
  double sigma_w = 0.1;
  double sigma_v = 0.1;

  double hover_thrust() const { return 0.5 * mass * gravity; }
};

enum class NoiseKind { iid, moving_average };

// Moving-average noise: w_t = sum_{k=0}^{window-1} eta_{t-k}, with eta drawn
// at the system's per-coordinate innovation variance.
struct NoiseModel {
  NoiseKind kind = NoiseKind::iid;
  std::size_t window = 1;

  static NoiseModel iid() { return {}; }
  static NoiseModel moving_average(std::size_t window = 5) {
    return {NoiseKind::moving_average, window};
  }
  // Marginal variance multiplier relative to the innovation variance.
  double variance_factor() const {
    return kind == NoiseKind::iid ? 1.0 : static_cast<double>(window);
  }
};

struct SwitchSpec {
  std::size_t time = 0;
  LinearSystem replacement;
};

// Row t of ys/xs/us holds y_t, x_t, u_t. xs and us may be empty.
struct Trajectory {
  Matrix ys;
  Matrix xs;
  Matrix us;
  std::uint64_t seed = 0;
  std::size_t rejections = 0;

  std::size_t length() const { return ys.rows(); }
};

// Noise realizations indexed by time: w row t enters x_t, v row t enters y_t.
// Row 0 of w is drawn but unused (x_0 = 0).
struct NoiseSequence {
  Matrix w;
  Matrix v;
};

struct StabilityProfile {
  double rho = 0.0;
  double c_rho = 0.0;
  double l_rho = 0.0;
  bool unstable = false;
  std::vector<double> power_norms;  // ||A^t||_2 for t = 0..t_max
};

LinearSystem sample_linear_system(Rng& rng, std::size_t n, std::size_t m, double target_rho,
                                  SamplingMode mode, double sigma_w = 0.1, double sigma_v = 0.1);

// Innovations for the window-1 steps before t = 0 are drawn first, so row 0
// already sums a full window.
Matrix colored_noise_sequence(Rng& rng, std::size_t steps, double variance, std::size_t window,
                              std::size_t dim);

NoiseSequence draw_noise(Rng& rng, std::size_t steps, std::size_t state_dim,
                         std::size_t output_dim, double sigma_w, double sigma_v,
                         const NoiseModel& noise);

// Deterministic propagation from x_0 = 0. Under a switch, A and C of the
// replacement apply to every time index >= switch time.
Trajectory propagate_linear(const LinearSystem& system, const NoiseSequence& noise,
                            const std::optional<SwitchSpec>& switch_spec = std::nullopt);

Trajectory simulate(const LinearSystem& system, std::size_t steps, const NoiseModel& noise,
                    Rng& rng, const std::optional<SwitchSpec>& switch_spec = std::nullopt);

using QuadState = std::array<double, QuadrotorSystem::kStateDim>;
using QuadInput = std::array<double, QuadrotorSystem::kInputDim>;

QuadState quadrotor_step(const QuadState& state, const QuadInput& u, const QuadState& noise,
                         const QuadrotorSystem& system);

// d(quadrotor_step)/d(state), noise-free.
Matrix quadrotor_jacobian(const QuadState& state, const QuadInput& u,
                          const QuadrotorSystem& system);

QuadrotorSystem sample_quadrotor(Rng& rng, double sigma_w = 0.1, double sigma_v = 0.1);

// Hover thrust plus independent uniform [-perturbation, perturbation] per rotor.
Matrix sample_random_inputs(Rng& rng, std::size_t steps, const QuadrotorSystem& system,
                            double perturbation = 0.5);

Trajectory propagate_quadrotor(const QuadrotorSystem& system, const Matrix& inputs,
                               const NoiseSequence& noise);

Trajectory simulate_quadrotor(const QuadrotorSystem& system, std::size_t steps, Rng& rng,
                              double perturbation = 0.5);

StabilityProfile contraction_profile(const Matrix& A, std::size_t t_max);

// ---------------------------------------------------------------------------
// System distributions

enum class SystemFamily { linear, quadrotor };

struct DistributionSpec {
  std::string name;
  SystemFamily family = SystemFamily::linear;
  SamplingMode mode = SamplingMode::dense;
  std::size_t state_dim = 10;
  std::size_t output_dim = 5;
  double target_rho = 0.95;
  double noise_var_w = 0.01;
  double noise_var_v = 0.01;
  NoiseModel noise;
  std::optional<std::size_t> switch_time;
  double input_perturbation = 0.5;

  std::size_t input_dim() const {
    return family == SystemFamily::quadrotor ? QuadrotorSystem::kInputDim : 0;
  }
};

// Names: linear-dense, linear-colored, linear-switching, linear-triangular,
// quadrotor.
DistributionSpec distribution_preset(std::string_view name);
std::vector<std::string> distribution_preset_names();

struct TaskInstance {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::variant<LinearSystem, QuadrotorSystem> system;
  std::optional<SwitchSpec> switch_spec;
  NoiseModel noise;
  double input_perturbation = 0.5;

  bool is_quadrotor() const { return std::holds_alternative<QuadrotorSystem>(system); }
  const LinearSystem& linear() const { return std::get<LinearSystem>(system); }
  const QuadrotorSystem& quadrotor() const { return std::get<QuadrotorSystem>(system); }
  std::size_t output_dim() const;
  std::size_t input_dim() const;
};

TaskInstance sample_task(const DistributionSpec& spec, std::uint64_t seed, std::size_t index = 0);

// Quadrotor trajectories that diverge are redrawn from derived seeds (up to
// 100 attempts); the count is reported in Trajectory::rejections.
Trajectory simulate_task(const TaskInstance& task, std::size_t steps, std::uint64_t seed);

// Same as simulate_task but with an explicit noise realization (linear only).
Trajectory simulate_task_with_noise(const TaskInstance& task, const NoiseSequence& noise);
NoiseSequence draw_task_noise(const TaskInstance& task, std::size_t steps, std::uint64_t seed);

}  // namespace mop
