#include "mop/systems.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mop {

namespace {

double vector_norm(std::span<const double> v) {
  double s = 0.0;
  for (double e : v) {
    s += e * e;
  }
  return std::sqrt(s);
}

void check_divergence(std::span<const double> state, std::size_t t) {
  const double nrm = vector_norm(state);
  if (!(nrm <= kDivergenceNorm)) {
    throw DivergenceError("state norm exceeded 1e9 at t=" + std::to_string(t));
  }
}

Matrix uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  Matrix out = Matrix::matrix(rows, cols);
  for (double& v : out.data()) {
    v = rng.uniform(lo, hi);
  }
  return out;
}

}  // namespace

LinearSystem sample_linear_system(Rng& rng, std::size_t n, std::size_t m, double target_rho,
                                  SamplingMode mode, double sigma_w, double sigma_v) {
  if (n == 0 || m == 0) {
    throw std::invalid_argument("sample_linear_system: dimensions must be >= 1");
  }
  if (!(target_rho > 0.0 && target_rho < 1.0)) {
    throw std::invalid_argument("sample_linear_system: target spectral radius must be in (0, 1)");
  }
  LinearSystem sys;
  sys.sigma_w = sigma_w;
  sys.sigma_v = sigma_v;
  if (mode == SamplingMode::upper_triangular) {
    sys.A = Matrix::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        sys.A(i, j) = (i == j) ? rng.uniform(-0.95, 0.95) : rng.uniform(-1.0, 1.0);
      }
    }
  } else {
    constexpr int kMaxAttempts = 100;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      Matrix a = uniform_matrix(rng, n, n, -1.0, 1.0);
      const double rho = spectral_radius(a);
      if (rho < 1e-9) {
        continue;
      }
      sys.A = scale(a, target_rho / rho);
      ok = true;
    }
    if (!ok) {
      throw std::runtime_error("sample_linear_system: could not draw a matrix with nonzero "
                               "spectral radius in 100 attempts");
    }
  }
  sys.C = uniform_matrix(rng, m, n, 0.0, 1.0);
  return sys;
}

Matrix colored_noise_sequence(Rng& rng, std::size_t steps, double variance, std::size_t window,
                              std::size_t dim) {
  if (window == 0) {
    throw std::invalid_argument("colored_noise_sequence: window must be >= 1");
  }
  const double sd = std::sqrt(variance);
  const std::size_t total = steps + window - 1;
  Matrix eta = Matrix::matrix(total, dim);
  for (double& v : eta.data()) {
    v = rng.normal(sd);
  }
  Matrix out = Matrix::matrix(steps, dim);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t k = 0; k < window; ++k) {
      const std::size_t src = t + window - 1 - k;
      for (std::size_t d = 0; d < dim; ++d) {
        out(t, d) += eta(src, d);
      }
    }
  }
  return out;
}

NoiseSequence draw_noise(Rng& rng, std::size_t steps, std::size_t state_dim,
                         std::size_t output_dim, double sigma_w, double sigma_v,
                         const NoiseModel& noise) {
  NoiseSequence seq;
  if (noise.kind == NoiseKind::moving_average) {
    seq.w = colored_noise_sequence(rng, steps, sigma_w * sigma_w, noise.window, state_dim);
    seq.v = colored_noise_sequence(rng, steps, sigma_v * sigma_v, noise.window, output_dim);
    return seq;
  }
  seq.w = Matrix::matrix(steps, state_dim);
  seq.v = Matrix::matrix(steps, output_dim);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < state_dim; ++i) {
      seq.w(t, i) = rng.normal(sigma_w);
    }
    for (std::size_t i = 0; i < output_dim; ++i) {
      seq.v(t, i) = rng.normal(sigma_v);
    }
  }
  return seq;
}

Trajectory propagate_linear(const LinearSystem& system, const NoiseSequence& noise,
                            const std::optional<SwitchSpec>& switch_spec) {
  const std::size_t steps = noise.v.rows();
  const std::size_t n = system.state_dim();
  const std::size_t m = system.output_dim();
  if (steps == 0) {
    throw std::invalid_argument("propagate_linear: trajectory length must be >= 1");
  }
  if (noise.w.cols() != n || noise.v.cols() != m || noise.w.rows() != steps) {
    throw ShapeError("propagate_linear: noise dimensions do not match the system");
  }
  if (switch_spec && (switch_spec->replacement.state_dim() != n ||
                      switch_spec->replacement.output_dim() != m)) {
    throw ShapeError("propagate_linear: replacement system has different dimensions");
  }
  Trajectory traj;
  traj.ys = Matrix::matrix(steps, m);
  traj.xs = Matrix::matrix(steps, n);
  std::vector<double> x(n, 0.0);
  std::vector<double> next(n, 0.0);
  auto active = [&](std::size_t t) -> const LinearSystem& {
    return (switch_spec && t >= switch_spec->time) ? switch_spec->replacement : system;
  };
  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0) {
      const Matrix& A = active(t - 1).A;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          s += A(i, j) * x[j];
        }
        next[i] = s + noise.w(t, i);
      }
      x.swap(next);
      check_divergence(x, t);
    }
    const Matrix& C = active(t).C;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s += C(i, j) * x[j];
      }
      traj.ys(t, i) = s + noise.v(t, i);
    }
    std::copy(x.begin(), x.end(), traj.xs.row(t).begin());
  }
  return traj;
}

Trajectory simulate(const LinearSystem& system, std::size_t steps, const NoiseModel& noise,
                    Rng& rng, const std::optional<SwitchSpec>& switch_spec) {
  if (steps == 0) {
    throw std::invalid_argument("simulate: trajectory length must be >= 1");
  }
  const NoiseSequence seq = draw_noise(rng, steps, system.state_dim(), system.output_dim(),
                                       system.sigma_w, system.sigma_v, noise);
  return propagate_linear(system, seq, switch_spec);
}

QuadState quadrotor_step(const QuadState& s, const QuadInput& u, const QuadState& noise,
                         const QuadrotorSystem& sys) {
  const double c = std::cos(s[2]);
  const double sn = std::sin(s[2]);
  const double tau = sys.tau;
  QuadState out;
  out[0] = s[0] + (s[3] * c - s[4] * sn) * tau;
  out[1] = s[1] + (s[3] * sn + s[4] * c) * tau;
  out[2] = s[2] + s[5] * tau;
  out[3] = s[3] + (s[4] * s[5] - sys.gravity * sn) * tau;
  out[4] = s[4] + (-s[3] * s[5] - sys.gravity * c + (u[0] + u[1]) / sys.mass) * tau;
  out[5] = (u[0] - u[1]) * sys.arm * tau / sys.inertia;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += noise[i];
  }
  return out;
}

Matrix quadrotor_jacobian(const QuadState& s, const QuadInput& /*u*/, const QuadrotorSystem& sys) {
  const double c = std::cos(s[2]);
  const double sn = std::sin(s[2]);
  const double tau = sys.tau;
  Matrix F = Matrix::matrix(6, 6);
  F(0, 0) = 1.0;
  F(0, 2) = (-s[3] * sn - s[4] * c) * tau;
  F(0, 3) = c * tau;
  F(0, 4) = -sn * tau;
  F(1, 1) = 1.0;
  F(1, 2) = (s[3] * c - s[4] * sn) * tau;
  F(1, 3) = sn * tau;
  F(1, 4) = c * tau;
  F(2, 2) = 1.0;
  F(2, 5) = tau;
  F(3, 2) = -sys.gravity * c * tau;
  F(3, 3) = 1.0;
  F(3, 4) = s[5] * tau;
  F(3, 5) = s[4] * tau;
  F(4, 2) = sys.gravity * sn * tau;
  F(4, 3) = -s[5] * tau;
  F(4, 4) = 1.0;
  F(4, 5) = -s[3] * tau;
  return F;
}

QuadrotorSystem sample_quadrotor(Rng& rng, double sigma_w, double sigma_v) {
  QuadrotorSystem sys;
  sys.mass = rng.uniform(0.5, 2.0);
  sys.arm = rng.uniform(0.5, 2.0);
  sys.inertia = rng.uniform(0.5, 2.0);
  sys.C = uniform_matrix(rng, 3, QuadrotorSystem::kStateDim, 0.0, 1.0);
  sys.sigma_w = sigma_w;
  sys.sigma_v = sigma_v;
  return sys;
}

Matrix sample_random_inputs(Rng& rng, std::size_t steps, const QuadrotorSystem& system,
                            double perturbation) {
  Matrix u = Matrix::matrix(steps, QuadrotorSystem::kInputDim);
  const double hover = system.hover_thrust();
  for (double& v : u.data()) {
    v = hover + rng.uniform(-perturbation, perturbation);
  }
  return u;
}

Trajectory propagate_quadrotor(const QuadrotorSystem& system, const Matrix& inputs,
                               const NoiseSequence& noise) {
  const std::size_t steps = noise.v.rows();
  if (inputs.rows() != steps || noise.w.rows() != steps) {
    throw ShapeError("propagate_quadrotor: inputs/noise length mismatch");
  }
  Trajectory traj;
  traj.ys = Matrix::matrix(steps, system.C.rows());
  traj.xs = Matrix::matrix(steps, QuadrotorSystem::kStateDim);
  traj.us = inputs;
  QuadState x{};
  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0) {
      QuadState w;
      std::copy(noise.w.row(t).begin(), noise.w.row(t).end(), w.begin());
      x = quadrotor_step(x, {inputs(t - 1, 0), inputs(t - 1, 1)}, w, system);
      check_divergence(x, t);
    }
    for (std::size_t i = 0; i < system.C.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < QuadrotorSystem::kStateDim; ++j) {
        s += system.C(i, j) * x[j];
      }
      traj.ys(t, i) = s + noise.v(t, i);
    }
    std::copy(x.begin(), x.end(), traj.xs.row(t).begin());
  }
  return traj;
}

Trajectory simulate_quadrotor(const QuadrotorSystem& system, std::size_t steps, Rng& rng,
                              double perturbation) {
  const Matrix inputs = sample_random_inputs(rng, steps, system, perturbation);
  const NoiseSequence noise = draw_noise(rng, steps, QuadrotorSystem::kStateDim, system.C.rows(),
                                         system.sigma_w, system.sigma_v, NoiseModel::iid());
  return propagate_quadrotor(system, inputs, noise);
}

StabilityProfile contraction_profile(const Matrix& A, std::size_t t_max) {
  if (t_max == 0) {
    throw std::invalid_argument("contraction_profile: t_max must be >= 1");
  }
  StabilityProfile profile;
  profile.rho = spectral_radius(A);
  profile.power_norms.reserve(t_max + 1);
  Matrix power = Matrix::identity(A.rows());
  for (std::size_t t = 0; t <= t_max; ++t) {
    profile.power_norms.push_back(t == 0 ? 1.0 : spectral_norm(power));
    power = matmul(power, A);
  }
  if (profile.rho >= 1.0) {
    profile.unstable = true;
    return profile;
  }
  double c = 0.0;
  for (std::size_t t = 0; t <= t_max; ++t) {
    const double denom = std::pow(profile.rho, static_cast<double>(t));
    if (denom > 0.0) {
      c = std::max(c, profile.power_norms[t] / denom);
    }
  }
  profile.c_rho = c;
  profile.l_rho = c / (1.0 - profile.rho);
  return profile;
}

DistributionSpec distribution_preset(std::string_view name) {
  DistributionSpec spec;
  spec.name = std::string(name);
  if (name == "linear-dense") {
    return spec;
  }
  if (name == "linear-colored") {
    spec.noise = NoiseModel::moving_average(5);
    return spec;
  }
  if (name == "linear-switching") {
    spec.switch_time = 50;
    return spec;
  }
  if (name == "linear-triangular") {
    spec.mode = SamplingMode::upper_triangular;
    return spec;
  }
  if (name == "quadrotor") {
    spec.family = SystemFamily::quadrotor;
    spec.state_dim = QuadrotorSystem::kStateDim;
    spec.output_dim = 3;
    return spec;
  }
  std::ostringstream os;
  os << "unknown preset '" << name << "'; valid presets:";
  for (const auto& n : distribution_preset_names()) {
    os << ' ' << n;
  }
  throw UnknownPresetError(os.str());
}

std::vector<std::string> distribution_preset_names() {
  return {"linear-dense", "linear-colored", "linear-switching", "linear-triangular", "quadrotor"};
}

std::size_t TaskInstance::output_dim() const {
  return is_quadrotor() ? quadrotor().C.rows() : linear().output_dim();
}

std::size_t TaskInstance::input_dim() const {
  return is_quadrotor() ? QuadrotorSystem::kInputDim : 0;
}

TaskInstance sample_task(const DistributionSpec& spec, std::uint64_t seed, std::size_t index) {
  Rng rng(seed);
  TaskInstance task;
  task.index = index;
  task.seed = seed;
  task.noise = spec.noise;
  task.input_perturbation = spec.input_perturbation;
  const double sw = std::sqrt(spec.noise_var_w);
  const double sv = std::sqrt(spec.noise_var_v);
  if (spec.family == SystemFamily::quadrotor) {
    task.system = sample_quadrotor(rng, sw, sv);
    return task;
  }
  task.system = sample_linear_system(rng, spec.state_dim, spec.output_dim, spec.target_rho,
                                     spec.mode, sw, sv);
  if (spec.switch_time) {
    SwitchSpec sw_spec;
    sw_spec.time = *spec.switch_time;
    sw_spec.replacement = sample_linear_system(rng, spec.state_dim, spec.output_dim,
                                               spec.target_rho, spec.mode, sw, sv);
    task.switch_spec = std::move(sw_spec);
  }
  return task;
}

NoiseSequence draw_task_noise(const TaskInstance& task, std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  if (task.is_quadrotor()) {
    const auto& q = task.quadrotor();
    return draw_noise(rng, steps, QuadrotorSystem::kStateDim, q.C.rows(), q.sigma_w, q.sigma_v,
                      NoiseModel::iid());
  }
  const auto& s = task.linear();
  return draw_noise(rng, steps, s.state_dim(), s.output_dim(), s.sigma_w, s.sigma_v, task.noise);
}

Trajectory simulate_task_with_noise(const TaskInstance& task, const NoiseSequence& noise) {
  if (task.is_quadrotor()) {
    throw std::invalid_argument("simulate_task_with_noise: quadrotor tasks need inputs");
  }
  return propagate_linear(task.linear(), noise, task.switch_spec);
}

Trajectory simulate_task(const TaskInstance& task, std::size_t steps, std::uint64_t seed) {
  if (steps == 0) {
    throw std::invalid_argument("simulate_task: trajectory length must be >= 1");
  }
  if (!task.is_quadrotor()) {
    Rng rng(seed);
    Trajectory traj = simulate(task.linear(), steps, task.noise, rng, task.switch_spec);
    traj.seed = seed;
    return traj;
  }
  constexpr std::size_t kMaxAttempts = 100;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, attempt);
    Rng rng(s);
    try {
      Trajectory traj = simulate_quadrotor(task.quadrotor(), steps, rng, task.input_perturbation);
      traj.seed = s;
      traj.rejections = attempt;
      return traj;
    } catch (const DivergenceError&) {
    }
  }
  throw DivergenceError("simulate_task: quadrotor trajectory diverged in 100 attempts");
}

}  // namespace mop
