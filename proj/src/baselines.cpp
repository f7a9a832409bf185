#include "mop/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace mop {

namespace {

Matrix column_of(std::span<const double> v) { return Matrix::column(v); }

Matrix add_diagonal(Matrix a, double value) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    a(i, i) += value;
  }
  return a;
}

bool all_zero(const Matrix& a) {
  for (double v : a.data()) {
    if (v != 0.0) {
      return false;
    }
  }
  return true;
}

struct Posterior {
  Matrix mean;
  Matrix cov;
  Matrix innovation;
};

Posterior measurement_update(const KalmanState& prior, std::span<const double> y, const Matrix& C,
                             double sigma_v) {
  if (y.size() != C.rows()) {
    throw ShapeError("filter: observation has " + std::to_string(y.size()) +
                     " entries, output matrix has " + std::to_string(C.rows()) + " rows");
  }
  const Matrix Ct = C.transposed();
  const Matrix PCt = matmul(prior.cov, Ct);
  const Matrix S = add_diagonal(matmul(C, PCt), sigma_v * sigma_v);
  Posterior post;
  post.innovation = sub(column_of(y), matmul(C, prior.mean));
  if (all_zero(PCt)) {
    // No state uncertainty: the gain is zero, even if S is singular.
    post.mean = prior.mean;
    post.cov = prior.cov;
    return post;
  }
  // S K^T = C P, using symmetry of S and P.
  const Matrix K = solve_linear(S, PCt.transposed()).transposed();
  post.mean = add(prior.mean, matmul(K, post.innovation));
  const std::size_t n = prior.cov.rows();
  const Matrix IKC = sub(Matrix::identity(n), matmul(K, C));
  post.cov = symmetrized(matmul(IKC, prior.cov));
  return post;
}

KalmanState time_update(const Posterior& post, const Matrix& F, Matrix propagated_mean,
                        double sigma_w) {
  KalmanState next;
  next.mean = std::move(propagated_mean);
  next.cov = symmetrized(
      add_diagonal(matmul(matmul(F, post.cov), F.transposed()), sigma_w * sigma_w));
  return next;
}

void repair_covariance(Matrix& cov) {
  bool negative = false;
  for (std::size_t i = 0; i < cov.rows(); ++i) {
    negative = negative || cov(i, i) < -1e-10;
  }
  if (negative) {
    cov = add_diagonal(std::move(cov), 1e-9);
  }
}

std::vector<double> to_vector(const Matrix& col) {
  return std::vector<double>(col.data().begin(), col.data().end());
}

}  // namespace

KalmanState KalmanState::zero(std::size_t n) {
  return {Matrix::matrix(n, 1), Matrix::matrix(n, n)};
}

KalmanState KalmanState::unit_covariance(std::size_t n) {
  return {Matrix::matrix(n, 1), Matrix::identity(n)};
}

Matrix LinearDynamics::propagate(const Matrix& mean, std::span<const double>) const {
  return matmul(system_.A, mean);
}

Matrix LinearDynamics::jacobian(const Matrix&, std::span<const double>) const { return system_.A; }

Matrix QuadrotorDynamics::propagate(const Matrix& mean, std::span<const double> u) const {
  QuadState s;
  std::copy(mean.data().begin(), mean.data().end(), s.begin());
  const QuadState next = quadrotor_step(s, {u[0], u[1]}, QuadState{}, system_);
  return Matrix::column(next);
}

Matrix QuadrotorDynamics::jacobian(const Matrix& mean, std::span<const double> u) const {
  QuadState s;
  std::copy(mean.data().begin(), mean.data().end(), s.begin());
  return quadrotor_jacobian(s, {u[0], u[1]}, system_);
}

FilterStep kf_step(const KalmanState& state, std::span<const double> y, const LinearSystem& system) {
  const Posterior post = measurement_update(state, y, system.C, system.sigma_v);
  FilterStep out;
  out.state = time_update(post, system.A, matmul(system.A, post.mean), system.sigma_w);
  out.prediction = matmul(system.C, out.state.mean);
  out.innovation = post.innovation;
  return out;
}

FilterStep ekf_step(const KalmanState& state, std::span<const double> y,
                    std::span<const double> u, const FilterDynamics& dynamics) {
  const Matrix& C = dynamics.output_matrix();
  const Posterior post = measurement_update(state, y, C, dynamics.output_std());
  const Matrix F = dynamics.jacobian(post.mean, u);
  FilterStep out;
  out.state = time_update(post, F, dynamics.propagate(post.mean, u), dynamics.process_std());
  repair_covariance(out.state.cov);
  out.prediction = matmul(C, out.state.mean);
  out.innovation = post.innovation;
  return out;
}

FilterStep ekf_step(const KalmanState& state, std::span<const double> y,
                    std::span<const double> u, const QuadrotorSystem& system) {
  return ekf_step(state, y, u, QuadrotorDynamics(system));
}

ARState ARState::create(std::size_t output_dim, double ridge) {
  ARState s;
  s.output_dim = output_dim;
  s.ridge = ridge;
  s.gram = Matrix::matrix(2 * output_dim, 2 * output_dim);
  s.cross = Matrix::matrix(2 * output_dim, output_dim);
  s.coefficients = Matrix::matrix(output_dim, 2 * output_dim);
  return s;
}

std::pair<ARState, std::vector<double>> ar_ols_step(ARState state, std::span<const double> y) {
  const std::size_t m = state.output_dim;
  if (y.size() != m) {
    throw ShapeError("ar_ols_step: observation dimension mismatch");
  }
  if (state.observed >= 2) {
    std::vector<double> z(2 * m);
    std::copy(state.prev.begin(), state.prev.end(), z.begin());
    std::copy(state.prev2.begin(), state.prev2.end(), z.begin() + static_cast<std::ptrdiff_t>(m));
    for (std::size_t i = 0; i < 2 * m; ++i) {
      for (std::size_t j = 0; j < 2 * m; ++j) {
        state.gram(i, j) += z[i] * z[j];
      }
      for (std::size_t j = 0; j < m; ++j) {
        state.cross(i, j) += z[i] * y[j];
      }
    }
  }
  state.prev2 = state.prev;
  state.prev.assign(y.begin(), y.end());
  ++state.observed;

  if (state.observed < 3) {
    return {std::move(state), std::vector<double>(y.begin(), y.end())};
  }
  const Matrix theta = solve_linear(add_diagonal(state.gram, state.ridge), state.cross);
  state.coefficients = theta.transposed();
  std::vector<double> pred(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      s += state.coefficients(i, j) * state.prev[j];
      s += state.coefficients(i, m + j) * state.prev2[j];
    }
    pred[i] = s;
  }
  return {std::move(state), std::move(pred)};
}

Matrix Predictor::predict_sequence(const Trajectory& traj) {
  const std::size_t steps = traj.length();
  if (steps < 2) {
    return Matrix::matrix(0, traj.ys.cols());
  }
  Matrix out = Matrix::matrix(steps - 1, traj.ys.cols());
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    std::span<const double> u;
    if (!traj.us.empty()) {
      u = traj.us.row(t);
    }
    const std::vector<double> pred = observe(traj.ys.row(t), u);
    if (pred.size() != out.cols()) {
      throw ShapeError("predictor '" + std::string(id()) + "' returned wrong output dimension");
    }
    std::copy(pred.begin(), pred.end(), out.row(t).begin());
  }
  return out;
}

std::vector<double> Predictor::predict_from_prefix(const Trajectory& traj, std::size_t t) {
  if (t >= traj.length()) {
    throw std::out_of_range("predict_from_prefix: t beyond trajectory");
  }
  std::vector<double> last;
  for (std::size_t j = 0; j <= t; ++j) {
    std::span<const double> u;
    if (!traj.us.empty()) {
      u = traj.us.row(j);
    }
    last = observe(traj.ys.row(j), u);
  }
  return last;
}

KalmanPredictor::KalmanPredictor(const TaskInstance& task, bool unit_initial_covariance) {
  if (task.is_quadrotor()) {
    throw std::invalid_argument("kf: task is not linear; use ekf");
  }
  const double f = std::sqrt(task.noise.variance_factor());
  before_ = task.linear();
  before_.sigma_w *= f;
  before_.sigma_v *= f;
  if (task.switch_spec) {
    after_ = task.switch_spec->replacement;
    after_->sigma_w *= f;
    after_->sigma_v *= f;
    switch_time_ = task.switch_spec->time;
  }
  const std::size_t n = before_.state_dim();
  state_ = unit_initial_covariance ? KalmanState::unit_covariance(n) : KalmanState::zero(n);
}

std::vector<double> KalmanPredictor::observe(std::span<const double> y, std::span<const double>) {
  const bool switched = after_ && t_ >= switch_time_;
  const bool next_switched = after_ && t_ + 1 >= switch_time_;
  const LinearSystem& now = switched ? *after_ : before_;
  const LinearSystem& next = next_switched ? *after_ : before_;
  if (&now == &next) {
    FilterStep step = kf_step(state_, y, now);
    state_ = std::move(step.state);
    ++t_;
    return to_vector(step.prediction);
  }
  // Dynamics from t to t+1 follow the system active at t; the output map at
  // t+1 may already be the replacement.
  const Posterior post = measurement_update(state_, y, now.C, now.sigma_v);
  state_ = time_update(post, now.A, matmul(now.A, post.mean), now.sigma_w);
  ++t_;
  return to_vector(matmul(next.C, state_.mean));
}

ExtendedKalmanPredictor::ExtendedKalmanPredictor(std::unique_ptr<FilterDynamics> dynamics)
    : dynamics_(std::move(dynamics)),
      state_(KalmanState::zero(dynamics_->output_matrix().cols())) {}

ExtendedKalmanPredictor::ExtendedKalmanPredictor(const TaskInstance& task)
    : ExtendedKalmanPredictor(task.is_quadrotor()
                                  ? std::unique_ptr<FilterDynamics>(
                                        std::make_unique<QuadrotorDynamics>(task.quadrotor()))
                                  : std::unique_ptr<FilterDynamics>(
                                        std::make_unique<LinearDynamics>(task.linear()))) {}

std::vector<double> ExtendedKalmanPredictor::observe(std::span<const double> y,
                                                     std::span<const double> u) {
  FilterStep step = ekf_step(state_, y, u, *dynamics_);
  state_ = std::move(step.state);
  return to_vector(step.prediction);
}

std::vector<double> ArOlsPredictor::observe(std::span<const double> y, std::span<const double>) {
  auto [next, pred] = ar_ols_step(std::move(state_), y);
  state_ = std::move(next);
  return pred;
}

std::vector<double> OraclePredictor::observe(std::span<const double>, std::span<const double>) {
  const std::size_t next = std::min(t_ + 1, traj_.length() - 1);
  ++t_;
  const auto row = traj_.ys.row(next);
  return std::vector<double>(row.begin(), row.end());
}

PredictorFactory baseline_factory(std::string_view name) {
  if (name == "kf") {
    return [](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
      return std::make_unique<KalmanPredictor>(task);
    };
  }
  if (name == "ekf") {
    return [](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
      return std::make_unique<ExtendedKalmanPredictor>(task);
    };
  }
  if (name == "ar-ols") {
    return [](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
      return std::make_unique<ArOlsPredictor>(task.output_dim());
    };
  }
  if (name == "zero") {
    return [](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
      return std::make_unique<ZeroPredictor>(task.output_dim());
    };
  }
  if (name == "oracle") {
    return [](const TaskInstance&, const Trajectory& traj) -> std::unique_ptr<Predictor> {
      return std::make_unique<OraclePredictor>(traj);
    };
  }
  throw std::invalid_argument("unknown baseline predictor '" + std::string(name) +
                              "'; valid: kf ekf ar-ols zero oracle");
}

}  // namespace mop
