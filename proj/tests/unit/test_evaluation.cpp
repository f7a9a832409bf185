#include <cmath>
#include <filesystem>
#include <memory>
#include <vector>

#include "doctest.h"
#include "mop/evaluation.hpp"
#include "test_util.hpp"

using namespace mop;

namespace {

class OffsetKalman final : public Predictor {
 public:
  OffsetKalman(const TaskInstance& task, double offset) : kf_(task), offset_(offset) {}
  std::string_view id() const override { return "kf+c"; }
  std::vector<double> observe(std::span<const double> y, std::span<const double> u) override {
    auto p = kf_.observe(y, u);
    for (double& v : p) v += offset_;
    return p;
  }

 private:
  KalmanPredictor kf_;
  double offset_;
};

class NanPredictor final : public Predictor {
 public:
  explicit NanPredictor(std::size_t dim) : dim_(dim) {}
  std::string_view id() const override { return "nan"; }
  std::vector<double> observe(std::span<const double>, std::span<const double>) override {
    return std::vector<double>(dim_, std::nan(""));
  }

 private:
  std::size_t dim_;
};

LinearSystem scalar_system(double a, double sigma) {
  LinearSystem s;
  s.A = Matrix::from_rows({{a}});
  s.C = Matrix::from_rows({{1.0}});
  s.sigma_w = sigma;
  s.sigma_v = sigma;
  return s;
}

EvalSet scalar_set(double a, double sigma, std::size_t n, std::size_t horizon, std::uint64_t seed) {
  EvalSet set;
  set.spec = distribution_preset("linear-dense");
  set.spec.state_dim = 1;
  set.spec.output_dim = 1;
  set.horizon = horizon;
  set.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    TaskInstance task;
    task.index = i;
    task.system = scalar_system(a, sigma);
    Rng rng(derive_seed(seed, i));
    set.trajectories.push_back(simulate(task.linear(), horizon + 1, NoiseModel::iid(), rng));
    set.tasks.push_back(task);
  }
  return set;
}

}  // namespace

TEST_CASE("oracle curve is zero") {
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 20, 30, 1);
  CHECK(set.size() == 20);
  CHECK(set.trajectories[0].length() == 31);
  const ErrorCurve c = error_curve(baseline_factory("oracle"), "oracle", set);
  REQUIRE(c.mean.size() == 30);
  for (std::size_t k = 0; k < 30; ++k) {
    CHECK(c.mean[k] == 0.0);
    CHECK(c.stderr_[k] == 0.0);
  }
  CHECK(c.n_systems == 20);
  CHECK(c.failed.empty());
}

TEST_CASE("zero predictor without process noise measures the output noise") {
  DistributionSpec spec = distribution_preset("linear-dense");
  spec.noise_var_w = 0.0;
  const EvalSet set = make_eval_set(spec, 2000, 20, 2);
  const ErrorCurve c = error_curve(baseline_factory("zero"), "zero", set);
  // Monte-Carlo oracle for E||v|| with v ~ N(0, 0.01 I_5)
  Rng rng(3);
  double sum = 0.0, sq = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    double n2 = 0.0;
    for (int j = 0; j < 5; ++j) n2 += std::pow(rng.normal(0.1), 2);
    sum += std::sqrt(n2);
    sq += n2;
  }
  const double oracle = sum / draws;
  const double oracle_se = std::sqrt((sq / draws - oracle * oracle) / draws);
  CHECK(oracle == doctest::Approx(0.1 * std::sqrt(2.0) * std::tgamma(3.0) / std::tgamma(2.5)).epsilon(0.01));
  for (std::size_t k = 0; k < c.mean.size(); ++k)
    CHECK(std::abs(c.mean[k] - oracle) <= 4.0 * std::hypot(c.stderr_[k], oracle_se));
}

TEST_CASE("Kalman curve is flat") {
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 100, 50, 4);
  const ErrorCurve kf = error_curve(baseline_factory("kf"), "kf", set);
  const double pooled = std::hypot(kf.stderr_[9], kf.stderr_[44]);
  CHECK(std::abs(kf.mean[9] - kf.mean[44]) <= 3.0 * pooled);
}

TEST_CASE("predictor comparisons") {
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 100, 50, 5);
  const ErrorCurve kf = error_curve(baseline_factory("kf"), "kf", set);
  const ErrorCurve zero = error_curve(baseline_factory("zero"), "zero", set);

  const Comparison self = compare_predictors(kf, kf);
  for (const auto& r : self.ratio) {
    REQUIRE(r.has_value());
    CHECK(*r == 1.0);
  }
  CHECK(self.early.a.lo == 2);
  CHECK(self.early.a.hi == 10);
  CHECK(self.late.a.lo == 40);
  CHECK(self.late.a.hi == 50);
  CHECK(self.late.ratio == 1.0);
  CHECK(self.late.diff == 0.0);

  const Comparison zk = compare_predictors(zero, kf);
  CHECK(zk.late.ratio > 1.0);
  for (std::size_t k = 39; k < 50; ++k) CHECK(*zk.ratio[k] > 1.0);

  const EvalSet other = make_eval_set(distribution_preset("linear-dense"), 100, 50, 6);
  const ErrorCurve kf2 = error_curve(baseline_factory("kf"), "kf", other);
  const WindowStat w1 = window_stat(kf, 40, 50), w2 = window_stat(kf2, 40, 50);
  CHECK(std::abs(w1.mean / w2.mean - 1.0) <= 3.0 * std::hypot(w1.stderr_, w2.stderr_) / w2.mean);
  CHECK_THROWS_AS(compare_window(kf, kf2, 40, 50), std::invalid_argument);
  const PairedWindow w = compare_window(zero, kf, 40, 50);
  CHECK(w.pooled_stderr == doctest::Approx(std::hypot(w.a.stderr_, w.b.stderr_)));
  CHECK(w.diff == doctest::Approx(w.a.mean - w.b.mean));

  const ErrorCurve oracle = error_curve(baseline_factory("oracle"), "oracle", set);
  const Comparison undefined = compare_predictors(kf, oracle);
  for (const auto& r : undefined.ratio) CHECK_FALSE(r.has_value());
  CHECK_FALSE(undefined.late.ratio_defined);
}

TEST_CASE("window statistics") {
  ErrorCurve c;
  c.horizon = 4;
  c.per_system = Matrix::from_rows({{1, 2, 3, 4}, {3, 4, 5, 6}});
  c.mean = {2, 3, 4, 5};
  c.stderr_ = {1, 1, 1, 1};
  c.n_systems = 2;
  const WindowStat w = window_stat(c, 2, 3);
  CHECK(w.mean == doctest::Approx(3.5));
  // per-system window means 2.5 and 4.5
  CHECK(w.stderr_ == doctest::Approx(1.0));
}

TEST_CASE("non-finite predictions are flagged") {
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 5, 10, 7);
  PredictorFactory f = [](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
    if (task.index == 2) return std::make_unique<NanPredictor>(task.output_dim());
    return std::make_unique<KalmanPredictor>(task);
  };
  const ErrorCurve c = error_curve(f, "mixed", set);
  CHECK(c.failed == std::vector<std::size_t>{2});
  CHECK(c.n_systems == 4);
  CHECK(c.system_ids == std::vector<std::size_t>{0, 1, 3, 4});
  for (double m : c.mean) CHECK(std::isfinite(m));
}

TEST_CASE("excess risk") {
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 100, 30, 8);
  SUBCASE("the filter itself") {
    const RiskReport r = empirical_excess_risk(baseline_factory("kf"), set);
    CHECK(r.baseline == "kf");
    CHECK(std::abs(r.delta) <= 3.0 * r.delta_stderr);
    CHECK(r.delta == 0.0);
  }
  SUBCASE("a constant offset") {
    const double c = 0.05;
    PredictorFactory f = [&](const TaskInstance& task, const Trajectory&) -> std::unique_ptr<Predictor> {
      return std::make_unique<OffsetKalman>(task, c);
    };
    const RiskReport r = empirical_excess_risk(f, set);
    double oracle = 0.0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      KalmanPredictor kf(set.tasks[i]);
      const Matrix pred = kf.predict_sequence(set.trajectories[i]);
      for (std::size_t t = 0; t < pred.rows(); ++t) {
        double e2 = 0.0, ec2 = 0.0;
        for (std::size_t j = 0; j < pred.cols(); ++j) {
          const double e = pred(t, j) - set.trajectories[i].ys(t + 1, j);
          e2 += e * e;
          ec2 += (e + c) * (e + c);
        }
        oracle += std::sqrt(ec2) - std::sqrt(e2);
      }
    }
    oracle /= static_cast<double>(set.size() * set.horizon);
    CHECK(r.delta == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(r.delta > 0.0);
  }
  SUBCASE("an untrained model") {
    ModelConfig cfg;
    cfg.precision = Precision::f64;
    auto model = std::make_shared<const LoadedModel>(init_weights<double>(cfg, 1));
    const RiskReport r = empirical_excess_risk(mop_factory(model), set);
    CHECK(r.delta >= 5.0 * r.delta_stderr);
  }
  const ErrorCurve kf = error_curve(baseline_factory("kf"), "kf", set);
  const ErrorCurve ar = error_curve(baseline_factory("ar-ols"), "ar-ols", set);
  const RiskReport rr = excess_risk_from_curves(ar, kf);
  CHECK(rr.risk_model >= 0.0);
  CHECK(rr.delta == doctest::Approx(rr.risk_model - rr.risk_baseline));
}

TEST_CASE("model-aware baselines") {
  CHECK(model_aware_baseline(distribution_preset("linear-dense")) == "kf");
  CHECK(model_aware_baseline(distribution_preset("quadrotor")) == "ekf");
  ModelConfig cfg;
  CHECK_THROWS_AS(check_model_matches(cfg, distribution_preset("quadrotor"), 50), ConfigError);
  CHECK_NOTHROW(check_model_matches(cfg, distribution_preset("linear-dense"), 50));
  CHECK_THROWS_AS(check_model_matches(cfg, distribution_preset("linear-dense"), 200), ConfigError);
  CHECK_THROWS(make_predictor_factory("mop", nullptr));
}

TEST_CASE("mop predictor interfaces agree") {
  ModelConfig cfg;
  cfg.precision = Precision::f64;
  auto model = std::make_shared<const LoadedModel>(init_weights<double>(cfg, 2));
  const EvalSet set = make_eval_set(distribution_preset("linear-dense"), 1, 20, 9);
  const Trajectory& traj = set.trajectories[0];
  MopPredictor batch(model);
  const Matrix seq = batch.predict_sequence(traj);
  MopPredictor stepper(model);
  for (std::size_t t = 0; t + 1 < traj.length(); ++t) {
    const auto p = stepper.observe(traj.ys.row(t), {});
    const auto q = MopPredictor(model).predict_from_prefix(traj, t);
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(p[j] == doctest::Approx(seq(t, j)).epsilon(1e-12));
      CHECK(q[j] == doctest::Approx(seq(t, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("rank correlations") {
  const std::vector<double> x{1, 2, 3, 4, 5, 6}, y{2, 1, 4, 3, 6, 5};
  CHECK(spearman(x, y) == doctest::Approx(0.8285714285714287));
  CHECK(kendall_tau(x, y) == doctest::Approx(0.6));
  const std::vector<double> tx{1, 2, 2, 3}, ty{1, 3, 2, 4};
  CHECK(spearman(tx, ty) == doctest::Approx(0.9486832980505139));
  CHECK(kendall_tau(tx, ty) == doctest::Approx(0.912870929175277));
  const std::vector<double> rev{6, 5, 4, 3, 2, 1};
  CHECK(spearman(x, rev) == doctest::Approx(-1.0));
  CHECK(kendall_tau(x, rev) == doctest::Approx(-1.0));
}

TEST_CASE("log-log fit and scaling report") {
  std::vector<double> mt, delta;
  for (double m : {500.0, 1000.0, 2000.0, 4000.0}) {
    mt.push_back(m * 50);
    delta.push_back(3.0 / std::sqrt(m * 50));
  }
  const LogLogFit fit = loglog_fit(mt, delta);
  CHECK(std::abs(fit.slope + 0.5) <= 0.01);
  CHECK(fit.intercept == doctest::Approx(std::log(3.0)));

  std::vector<ScalingCell> cells;
  for (std::size_t i = 0; i < 4; ++i) {
    ScalingCell c;
    c.num_systems = 500u << i;
    c.horizon = 50;
    c.risk.delta = delta[i];
    cells.push_back(c);
  }
  cells.push_back({8000, 50, true, "diverged", {}});
  const ScalingReport r = scaling_report(cells);
  CHECK(r.cells_in_fit == 4);
  CHECK(r.spearman_delta_vs_mt == doctest::Approx(-1.0));
  CHECK(std::abs(r.fit.slope + 0.5) <= 0.01);
  CHECK_FALSE(r.note.empty());
}

TEST_CASE("duplicate scaling cells give identical excess risk") {
  TrainConfig base;
  base.model.layers = 1;
  base.model.embed_dim = 8;
  base.model.heads = 2;
  base.model.max_context = 16;
  base.model.precision = Precision::f64;
  base.steps = 3;
  base.batch_size = 4;
  const auto root = std::filesystem::temp_directory_path() / "mop_scaling_test";
  std::filesystem::remove_all(root);
  int run = 0;
  Trainer trainer = [&](const TrainConfig& cfg) {
    const auto dir = root / std::to_string(run++);
    std::filesystem::create_directories(dir);
    return train(cfg, {dir, std::nullopt, true}).final_checkpoint;
  };
  const ScalingReport r = scaling_experiment({{8, 10}, {8, 10}}, base, trainer, 10, 10, 3);
  REQUIRE(r.cells.size() == 2);
  CHECK(r.cells[0].risk.delta == r.cells[1].risk.delta);
  CHECK(r.cells[0].risk.n == 10);
}

TEST_CASE("robustness probe") {
  const auto spec = distribution_preset("linear-dense");
  const std::vector<std::size_t> taus{5, 10, 15};
  const RobustnessReport zero = robustness_probe(baseline_factory("kf"), spec, 3, 20, taus, 0.0, 16, 1);
  REQUIRE(zero.cells.size() == 9);
  for (const auto& c : zero.cells) {
    CHECK(c.delta_loss == 0.0);
    CHECK(c.output_shift == 0.0);
    CHECK(c.k_hat == 0.0);
  }
  const RobustnessReport r = robustness_probe(baseline_factory("kf"), spec, 3, 20, taus, 1.0, 16, 1);
  CHECK(r.gaps == std::vector<std::size_t>{15, 10, 5});
  for (const auto& c : r.cells) {
    CHECK(std::isfinite(c.k_hat));
    CHECK(c.k_hat >= 0.0);
    CHECK(c.output_shift > 0.0);
  }
  CHECK(r.k_max >= r.k_q90);
  CHECK(r.k_q90 >= r.k_median);
  const RobustnessReport again = robustness_probe(baseline_factory("kf"), spec, 3, 20, taus, 1.0, 16, 1);
  CHECK(again.k_max == r.k_max);
  CHECK_THROWS(robustness_probe(baseline_factory("ekf"), distribution_preset("quadrotor"), 1, 20, taus, 1.0, 4, 1));
}

TEST_CASE("matrix power profiles") {
  const std::vector<Matrix> jordan{Matrix::from_rows({{0.9, 1.0}, {0.0, 0.9}})};
  const MatrixPowerStudy j = matrix_power_profile(jordan, 20);
  for (std::size_t t = 0; t <= 20; ++t) {
    const double d = std::pow(0.9, static_cast<double>(t));
    const double off = t == 0 ? 0.0 : static_cast<double>(t) * std::pow(0.9, static_cast<double>(t) - 1);
    CHECK(j.mean_norms[t] == doctest::Approx(spectral_norm(Matrix::from_rows({{d, off}, {0.0, d}}))).epsilon(1e-9));
  }

  const MatrixPowerStudy dense = matrix_power_study(SamplingMode::dense, 100, 50, 1);
  for (std::size_t t = 5; t < 50; ++t) CHECK(dense.mean_norms[t + 1] <= dense.mean_norms[t]);
  const MatrixPowerStudy tri = matrix_power_study(SamplingMode::upper_triangular, 100, 50, 1);
  CHECK(tri.overshoot_of_mean > dense.overshoot_of_mean);
  CHECK(tri.overshoot_mean > dense.overshoot_mean);
}

TEST_CASE("Kalman error scales with the noise level") {
  const double a = 0.9;
  for (double sigma : {0.1, 0.3}) {
    const EvalSet set = scalar_set(a, sigma, 3000, 30, 11);
    const ErrorCurve kf = error_curve(baseline_factory("kf"), "kf", set);
    const double q = sigma * sigma;
    double p = q;  // prior variance of x_1
    for (std::size_t t = 1; t <= 30; ++t) {
      const double expect = std::sqrt(2.0 / M_PI) * std::sqrt(p + q);
      CHECK(std::abs(kf.mean[t - 1] - expect) <= 4.0 * kf.stderr_[t - 1]);
      p = a * a * p * q / (p + q) + q;
    }
  }
}

TEST_CASE("distribution shift sweep") {
  const auto base = distribution_preset("linear-dense");
  const DistributionShiftReport r =
      distribution_shift_sweep(baseline_factory("kf"), base, 0.01, {0.01, 0.04}, 20, 20, 3);
  CHECK(r.train_variance == 0.01);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[1].variance == 0.04);
  for (const auto& e : r.entries) CHECK(e.late.ratio == 1.0);
  CHECK(r.entries[1].baseline.mean.back() > r.entries[0].baseline.mean.back());
}
