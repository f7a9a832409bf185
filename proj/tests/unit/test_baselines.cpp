#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"
#include "mop/baselines.hpp"
#include "test_util.hpp"

using namespace mop;

namespace {

LinearSystem scalar_system(double a, double c, double sw, double sv) {
  LinearSystem s;
  s.A = Matrix::from_rows({{a}});
  s.C = Matrix::from_rows({{c}});
  s.sigma_w = sw;
  s.sigma_v = sv;
  return s;
}

TaskInstance linear_task(LinearSystem s) {
  TaskInstance t;
  t.system = std::move(s);
  return t;
}

double trace(const Matrix& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, i);
  return s;
}

// Batch ridge fit of y_{t} on (y_{t-1}, y_{t-2}) for scalar data, by Cramer's rule.
std::pair<double, double> scalar_ridge(const std::vector<double>& y, double lambda) {
  double g11 = lambda, g12 = 0.0, g22 = lambda, c1 = 0.0, c2 = 0.0;
  for (std::size_t t = 2; t < y.size(); ++t) {
    g11 += y[t - 1] * y[t - 1];
    g12 += y[t - 1] * y[t - 2];
    g22 += y[t - 2] * y[t - 2];
    c1 += y[t - 1] * y[t];
    c2 += y[t - 2] * y[t];
  }
  const double det = g11 * g22 - g12 * g12;
  return {(c1 * g22 - g12 * c2) / det, (g11 * c2 - g12 * c1) / det};
}

std::vector<double> run_ar(const std::vector<double>& y, ARState& state) {
  std::vector<double> preds;
  for (double v : y) {
    auto [next, pred] = ar_ols_step(std::move(state), std::span<const double>(&v, 1));
    state = std::move(next);
    preds.push_back(pred[0]);
  }
  return preds;
}

}  // namespace

TEST_CASE("scalar filter with a = 0 predicts the prior mean") {
  const LinearSystem s = scalar_system(0.0, 1.0, 0.1, 0.1);
  KalmanState st = KalmanState::zero(1);
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const double y = rng.normal();
    const FilterStep step = kf_step(st, std::span<const double>(&y, 1), s);
    CHECK(step.prediction[0] == 0.0);
    st = step.state;
  }
}

TEST_CASE("scalar Riccati fixed point") {
  const double a = 0.9, q = 0.01, r = 0.01;
  double p = 0.0;
  for (int i = 0; i < 100000; ++i) p = a * a * p * r / (p + r) + q;
  CHECK(std::abs(p - (a * a * p * r / (p + r) + q)) <= 1e-15);

  const LinearSystem s = scalar_system(a, 1.0, 0.1, 0.1);
  KalmanState st = KalmanState::zero(1);
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const double y = rng.normal(0.2);
    st = kf_step(st, std::span<const double>(&y, 1), s).state;
  }
  CHECK(std::abs(st.cov[0] - p) <= 1e-8);
}

TEST_CASE("noise-free filtering is exact") {
  Rng rng(3);
  LinearSystem s = sample_linear_system(rng, 6, 3, 0.95, SamplingMode::dense, 0.0, 0.0);
  const Trajectory traj = simulate(s, 40, NoiseModel::iid(), rng);
  KalmanPredictor kf(linear_task(s));
  const Matrix pred = kf.predict_sequence(traj);
  for (std::size_t t = 0; t + 1 < traj.length(); ++t)
    for (std::size_t j = 0; j < 3; ++j) CHECK(pred(t, j) == traj.ys(t + 1, j));
}

TEST_CASE("innovations are white") {
  Rng rng(4);
  const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::dense);
  const Trajectory traj = simulate(s, 2000, NoiseModel::iid(), rng);
  KalmanState st = KalmanState::zero(10);
  Matrix innov = Matrix::matrix(2000, 5);
  for (std::size_t t = 0; t < 2000; ++t) {
    const FilterStep step = kf_step(st, traj.ys.row(t), s);
    for (std::size_t j = 0; j < 5; ++j) innov(t, j) = step.innovation[j];
    st = step.state;
  }
  for (std::size_t j = 0; j < 5; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < 2000; ++t) mean += innov(t, j);
    mean /= 2000.0;
    double c0 = 0.0, c1 = 0.0;
    for (std::size_t t = 0; t < 2000; ++t) {
      const double d = innov(t, j) - mean;
      c0 += d * d;
      if (t > 0) c1 += d * (innov(t - 1, j) - mean);
    }
    CHECK(std::abs(c1 / c0) <= 0.05);
  }
}

TEST_CASE("covariance trace converges and stays symmetric PSD") {
  Rng rng(5);
  const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::dense);
  KalmanState st = KalmanState::zero(10);
  const std::vector<double> y(5, 0.0);
  double prev = 0.0, last_delta = 1.0;
  for (int t = 0; t < 1000; ++t) {
    st = kf_step(st, y, s).state;
    last_delta = std::abs(trace(st.cov) - prev);
    prev = trace(st.cov);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(st.cov(i, i) >= -1e-10);
      for (std::size_t j = 0; j < 10; ++j) REQUIRE(st.cov(i, j) == st.cov(j, i));
    }
  }
  CHECK(last_delta < 1e-10);
}

TEST_CASE("quadrotor Jacobian") {
  QuadrotorSystem q;
  const Matrix j0 = quadrotor_jacobian(QuadState{}, {q.hover_thrust(), q.hover_thrust()}, q);
  CHECK(j0(0, 3) == doctest::Approx(0.1).epsilon(1e-14));

  Rng rng(6);
  const double h = 1e-6;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const QuadrotorSystem sys = sample_quadrotor(rng);
    QuadState x;
    for (double& v : x) v = rng.uniform(-2.0, 2.0);
    const QuadInput u{rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0)};
    const Matrix jac = quadrotor_jacobian(x, u, sys);
    for (std::size_t k = 0; k < 6; ++k) {
      QuadState up = x, down = x;
      up[k] += h;
      down[k] -= h;
      const QuadState fu = quadrotor_step(up, u, QuadState{}, sys);
      const QuadState fd = quadrotor_step(down, u, QuadState{}, sys);
      for (std::size_t i = 0; i < 6; ++i)
        worst = std::max(worst, std::abs(jac(i, k) - (fu[i] - fd[i]) / (2 * h)));
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("EKF is exact on a noise-free hover trajectory") {
  Rng rng(7);
  const QuadrotorSystem q = sample_quadrotor(rng);
  Matrix u = Matrix::matrix(60, 2, q.hover_thrust());
  Rng nr(8);
  const NoiseSequence noise = draw_noise(nr, 60, 6, 3, 0.0, 0.0, NoiseModel::iid());
  const Trajectory traj = propagate_quadrotor(q, u, noise);
  TaskInstance task;
  task.system = q;
  ExtendedKalmanPredictor ekf(task);
  const Matrix pred = ekf.predict_sequence(traj);
  for (std::size_t t = 0; t + 1 < traj.length(); ++t)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(pred(t, j) - traj.ys(t + 1, j)) <= 1e-9);
}

TEST_CASE("EKF reduces to KF on linear dynamics") {
  Rng rng(9);
  const LinearSystem s = sample_linear_system(rng, 10, 5, 0.95, SamplingMode::dense);
  const Trajectory traj = simulate(s, 100, NoiseModel::iid(), rng);
  KalmanPredictor kf(linear_task(s));
  ExtendedKalmanPredictor ekf(std::make_unique<LinearDynamics>(s));
  CHECK(kf.predict_sequence(traj) == ekf.predict_sequence(traj));
}

TEST_CASE("AR-OLS falls back to the last output") {
  ARState st = ARState::create(2);
  const std::vector<double> y0{1.0, 2.0}, y1{3.0, -1.0};
  auto [s1, p0] = ar_ols_step(std::move(st), y0);
  CHECK(p0 == y0);
  auto [s2, p1] = ar_ols_step(std::move(s1), y1);
  CHECK(p1 == y1);
}

TEST_CASE("AR-OLS on a geometric sequence") {
  std::vector<double> y{1.0};
  for (int t = 0; t < 20; ++t) y.push_back(0.5 * y.back());
  ARState st = ARState::create(1);
  const auto preds = run_ar(y, st);
  // y_{t-1} = 2 y_t makes the regressors collinear; the ridge picks the
  // minimum-norm pair on the line a1 + 2 a2 = 0.5.
  const auto [a1, a2] = scalar_ridge(y, kArRidge);
  CHECK(st.coefficients(0, 0) == doctest::Approx(a1).epsilon(1e-9));
  CHECK(st.coefficients(0, 1) == doctest::Approx(a2).epsilon(1e-9));
  CHECK(std::abs(a1 + 2 * a2 - 0.5) <= 1e-3);
  for (std::size_t t = 2; t + 1 < y.size(); ++t)
    CHECK(std::abs(preds[t] - y[t + 1]) <= 1e-3 * y[t]);
}

TEST_CASE("AR-OLS recovers a two-lag recursion") {
  std::vector<double> y{1.0, -1.0};
  while (y.size() < 51) y.push_back(0.3 * y[y.size() - 1] + 0.2 * y[y.size() - 2]);
  ARState st = ARState::create(1);
  run_ar(y, st);
  CHECK(std::abs(st.coefficients(0, 0) - 0.3) <= 1e-2);
  CHECK(std::abs(st.coefficients(0, 1) - 0.2) <= 1e-2);
  const auto [a1, a2] = scalar_ridge(y, kArRidge);
  CHECK(st.coefficients(0, 0) == doctest::Approx(a1).epsilon(1e-8));
  CHECK(st.coefficients(0, 1) == doctest::Approx(a2).epsilon(1e-8));
}

TEST_CASE("AR-OLS Gram stays symmetric") {
  Rng rng(10);
  ARState st = ARState::create(3);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> y{rng.normal(), rng.normal(), rng.normal()};
    st = ar_ols_step(std::move(st), y).first;
  }
  CHECK(st.gram == st.gram.transposed());
  for (std::size_t i = 0; i < 6; ++i) CHECK(st.gram(i, i) >= 0.0);
}

TEST_CASE("KF dominates AR-OLS on average") {
  const auto spec = distribution_preset("linear-dense");
  const std::size_t systems = 200, steps = 40;
  std::vector<double> kf_err(steps - 1, 0.0), ar_err(steps - 1, 0.0);
  for (std::size_t i = 0; i < systems; ++i) {
    const TaskInstance task = sample_task(spec, 11, i);
    const Trajectory traj = simulate_task(task, steps, derive_seed(11, i));
    KalmanPredictor kf(task);
    ArOlsPredictor ar(task.output_dim());
    const Matrix pk = kf.predict_sequence(traj), pa = ar.predict_sequence(traj);
    for (std::size_t t = 0; t + 1 < steps; ++t) {
      double ek = 0.0, ea = 0.0;
      for (std::size_t j = 0; j < traj.ys.cols(); ++j) {
        ek += std::pow(pk(t, j) - traj.ys(t + 1, j), 2);
        ea += std::pow(pa(t, j) - traj.ys(t + 1, j), 2);
      }
      kf_err[t] += std::sqrt(ek);
      ar_err[t] += std::sqrt(ea);
    }
  }
  for (std::size_t t = 5; t + 1 < steps; ++t) CHECK(kf_err[t] <= ar_err[t]);
}

TEST_CASE("prefix predictions agree with sequence predictions") {
  const auto spec = distribution_preset("linear-dense");
  const TaskInstance task = sample_task(spec, 12, 0);
  const Trajectory traj = simulate_task(task, 30, 13);
  for (const char* name : {"kf", "ar-ols", "zero"}) {
    const auto factory = baseline_factory(name);
    const Matrix seq = factory(task, traj)->predict_sequence(traj);
    REQUIRE(seq.rows() == 29);
    for (std::size_t t : {0, 1, 5, 28}) {
      const auto p = factory(task, traj)->predict_from_prefix(traj, t);
      for (std::size_t j = 0; j < p.size(); ++j) CHECK(p[j] == seq(t, j));
    }
    CHECK_THROWS_AS(factory(task, traj)->predict_from_prefix(traj, 30), std::out_of_range);
  }
  CHECK_THROWS(baseline_factory("nope"));
}

TEST_CASE("oracle predictor returns the truth") {
  const auto spec = distribution_preset("linear-dense");
  const TaskInstance task = sample_task(spec, 14, 0);
  const Trajectory traj = simulate_task(task, 20, 15);
  const Matrix pred = baseline_factory("oracle")(task, traj)->predict_sequence(traj);
  for (std::size_t t = 0; t + 1 < 20; ++t)
    for (std::size_t j = 0; j < 5; ++j) CHECK(pred(t, j) == traj.ys(t + 1, j));
}
