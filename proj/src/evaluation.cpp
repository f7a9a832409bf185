#include "mop/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "mop/checkpoint.hpp"
#include "mop/rng.hpp"

namespace mop {

namespace {

struct MeanStd {
  double mean = 0.0;
  double stderr_ = 0.0;
};

MeanStd mean_stderr(std::span<const double> v) {
  MeanStd out;
  if (v.empty()) {
    return out;
  }
  double s = 0.0;
  for (double x : v) s += x;
  out.mean = s / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return out;
}

double row_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<double> window_means(const ErrorCurve& c, std::size_t lo, std::size_t hi) {
  if (lo < 1 || hi > c.horizon || lo > hi) {
    throw std::invalid_argument("window [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                "] outside 1.." + std::to_string(c.horizon));
  }
  std::vector<double> out(c.per_system.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t t = lo; t <= hi; ++t) {
      s += c.per_system(i, t - 1);
    }
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <typename F>
void parallel_systems(std::size_t n, F&& body) {
  std::exception_ptr failure;
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

}  // namespace

EvalSet make_eval_set(const DistributionSpec& spec, std::size_t n, std::size_t horizon,
                      std::uint64_t seed) {
  EvalSet set;
  set.spec = spec;
  set.horizon = horizon;
  set.seed = seed;
  set.tasks.resize(n);
  set.trajectories.resize(n);
  parallel_systems(n, [&](std::size_t i) {
    const std::uint64_t s = derive_seed(seed, SeedSpace::test_systems, i);
    set.tasks[i] = sample_task(spec, s, i);
    set.trajectories[i] = simulate_task(set.tasks[i], horizon + 1, derive_seed(s, 1));
  });
  return set;
}

MopPredictor::MopPredictor(std::shared_ptr<const LoadedModel> model) : model_(std::move(model)) {
  if (!model_) {
    throw std::invalid_argument("mop predictor needs a model");
  }
}

std::vector<double> MopPredictor::observe(std::span<const double> y, std::span<const double> u) {
  const ModelConfig& c = model_->config();
  ys_.insert(ys_.end(), y.begin(), y.end());
  if (c.control_dim > 0) {
    if (u.size() != c.control_dim) {
      throw ShapeError("mop predictor expects a control input of dimension " +
                       std::to_string(c.control_dim));
    }
    us_.insert(us_.end(), u.begin(), u.end());
  }
  ++t_;
  const Matrix ys({t_, c.output_dim}, ys_);
  const Matrix us = c.control_dim > 0 ? Matrix({t_, c.control_dim}, us_) : Matrix();
  const Matrix out = model_->predict_all(ys, us);
  const auto last = out.row(out.rows() - 1);
  return std::vector<double>(last.begin(), last.end());
}

Matrix MopPredictor::prompt_outputs(const Trajectory& traj, std::size_t rows) const {
  Matrix ys = Matrix::matrix(rows, traj.ys.cols());
  std::copy(traj.ys.data().begin(),
            traj.ys.data().begin() + static_cast<std::ptrdiff_t>(ys.size()), ys.data().begin());
  return ys;
}

Matrix MopPredictor::prompt_inputs(const Trajectory& traj, std::size_t rows) const {
  if (model_->config().control_dim == 0) {
    return Matrix();
  }
  Matrix us = Matrix::matrix(rows, traj.us.cols());
  std::copy(traj.us.data().begin(),
            traj.us.data().begin() + static_cast<std::ptrdiff_t>(us.size()), us.data().begin());
  return us;
}

Matrix MopPredictor::predict_sequence(const Trajectory& traj) {
  const std::size_t steps = traj.length();
  if (steps < 2) {
    return Matrix::matrix(0, model_->config().output_dim);
  }
  return model_->predict_all(prompt_outputs(traj, steps - 1), prompt_inputs(traj, steps - 1));
}

std::vector<double> MopPredictor::predict_from_prefix(const Trajectory& traj, std::size_t t) {
  if (t >= traj.length()) {
    throw std::out_of_range("predict_from_prefix: t beyond trajectory");
  }
  const Matrix out = model_->predict_all(prompt_outputs(traj, t + 1), prompt_inputs(traj, t + 1));
  const auto last = out.row(t);
  return std::vector<double>(last.begin(), last.end());
}

PredictorFactory mop_factory(std::shared_ptr<const LoadedModel> model) {
  return [model](const TaskInstance&, const Trajectory&) -> std::unique_ptr<Predictor> {
    return std::make_unique<MopPredictor>(model);
  };
}

PredictorFactory make_predictor_factory(const std::string& name,
                                        std::shared_ptr<const LoadedModel> model) {
  if (name == "mop") {
    if (!model) {
      throw std::invalid_argument("predictor 'mop' requires a checkpoint");
    }
    return mop_factory(std::move(model));
  }
  return baseline_factory(name);
}

std::string model_aware_baseline(const DistributionSpec& spec) {
  return spec.family == SystemFamily::quadrotor ? "ekf" : "kf";
}

void check_model_matches(const ModelConfig& config, const DistributionSpec& spec,
                         std::size_t horizon) {
  if (config.output_dim != spec.output_dim || config.control_dim != spec.input_dim()) {
    throw ConfigError("checkpoint expects outputs of dimension " +
                      std::to_string(config.output_dim) + " and inputs of dimension " +
                      std::to_string(config.control_dim) + ", preset " + spec.name +
                      " has output dimension " + std::to_string(spec.output_dim) +
                      " and input dimension " + std::to_string(spec.input_dim()));
  }
  if (horizon > config.max_context) {
    throw ConfigError("horizon " + std::to_string(horizon) + " exceeds the model context " +
                      std::to_string(config.max_context));
  }
}

ErrorCurve error_curve(const PredictorFactory& factory, const std::string& id, const EvalSet& set) {
  const std::size_t n = set.size();
  const std::size_t T = set.horizon;
  Matrix errors = Matrix::matrix(n, T);
  std::vector<char> ok(n, 1);
  parallel_systems(n, [&](std::size_t i) {
    const Trajectory& traj = set.trajectories[i];
    auto predictor = factory(set.tasks[i], traj);
    const Matrix pred = predictor->predict_sequence(traj);
    if (pred.rows() != T) {
      throw ShapeError("predictor " + id + " returned " + std::to_string(pred.rows()) +
                       " predictions for horizon " + std::to_string(T));
    }
    for (std::size_t k = 0; k < T; ++k) {
      const double e = row_distance(pred.row(k), traj.ys.row(k + 1));
      if (!std::isfinite(e)) {
        ok[i] = 0;
      }
      errors(i, k) = e;
    }
  });

  ErrorCurve curve;
  curve.predictor = id;
  curve.preset = set.spec.name;
  curve.horizon = T;
  curve.seed = set.seed;
  for (std::size_t i = 0; i < n; ++i) {
    (ok[i] ? curve.system_ids : curve.failed).push_back(i);
  }
  curve.n_systems = curve.system_ids.size();
  curve.per_system = Matrix::matrix(curve.n_systems, T);
  for (std::size_t r = 0; r < curve.n_systems; ++r) {
    const auto src = errors.row(curve.system_ids[r]);
    std::copy(src.begin(), src.end(), curve.per_system.row(r).begin());
  }
  curve.mean.resize(T);
  curve.stderr_.resize(T);
  std::vector<double> column(curve.n_systems);
  for (std::size_t k = 0; k < T; ++k) {
    for (std::size_t r = 0; r < curve.n_systems; ++r) column[r] = curve.per_system(r, k);
    const MeanStd ms = mean_stderr(column);
    curve.mean[k] = ms.mean;
    curve.stderr_[k] = ms.stderr_;
  }
  return curve;
}

WindowStat window_stat(const ErrorCurve& curve, std::size_t lo, std::size_t hi) {
  const std::vector<double> v = window_means(curve, lo, hi);
  const MeanStd ms = mean_stderr(v);
  return {lo, hi, ms.mean, ms.stderr_};
}

PairedWindow compare_window(const ErrorCurve& a, const ErrorCurve& b, std::size_t lo,
                            std::size_t hi) {
  if (a.horizon != b.horizon || a.seed != b.seed || a.preset != b.preset) {
    throw std::invalid_argument("curves " + a.predictor + " and " + b.predictor +
                                " come from different evaluation sets");
  }
  // Pair on systems kept by both curves.
  std::vector<double> wa_all = window_means(a, lo, hi);
  std::vector<double> wb_all = window_means(b, lo, hi);
  std::vector<double> wa, wb;
  for (std::size_t i = 0, j = 0; i < a.system_ids.size() && j < b.system_ids.size();) {
    if (a.system_ids[i] == b.system_ids[j]) {
      wa.push_back(wa_all[i++]);
      wb.push_back(wb_all[j++]);
    } else if (a.system_ids[i] < b.system_ids[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  PairedWindow out;
  const MeanStd sa = mean_stderr(wa);
  const MeanStd sb = mean_stderr(wb);
  out.a = {lo, hi, sa.mean, sa.stderr_};
  out.b = {lo, hi, sb.mean, sb.stderr_};
  out.pooled_stderr = std::hypot(sa.stderr_, sb.stderr_);
  std::vector<double> d(wa.size());
  for (std::size_t i = 0; i < wa.size(); ++i) d[i] = wa[i] - wb[i];
  const MeanStd sd = mean_stderr(d);
  out.diff = sd.mean;
  out.diff_stderr = sd.stderr_;
  if (sb.mean >= 1e-12) {
    out.ratio_defined = true;
    out.ratio = sa.mean / sb.mean;
    std::vector<double> lin(wa.size());
    for (std::size_t i = 0; i < wa.size(); ++i) lin[i] = (wa[i] - out.ratio * wb[i]) / sb.mean;
    out.ratio_stderr = mean_stderr(lin).stderr_;
  }
  return out;
}

Comparison compare_predictors(const ErrorCurve& a, const ErrorCurve& b) {
  Comparison c;
  c.a = a.predictor;
  c.b = b.predictor;
  if (a.horizon != b.horizon || a.seed != b.seed || a.preset != b.preset) {
    throw std::invalid_argument("curves " + a.predictor + " and " + b.predictor +
                                " come from different evaluation sets");
  }
  c.ratio.resize(a.horizon);
  for (std::size_t k = 0; k < a.horizon; ++k) {
    if (b.mean[k] >= 1e-12) c.ratio[k] = a.mean[k] / b.mean[k];
  }
  const std::size_t T = a.horizon;
  c.early = compare_window(a, b, std::min<std::size_t>(2, T), std::min<std::size_t>(10, T));
  c.late = compare_window(a, b, T > 10 ? T - 10 : 1, T);
  return c;
}

double empirical_risk(std::span<const Matrix> predictions,
                      std::span<const Trajectory> trajectories) {
  if (predictions.size() != trajectories.size() || predictions.empty()) {
    throw std::invalid_argument("empirical_risk: need one prediction matrix per trajectory");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Matrix& p = predictions[i];
    const Trajectory& tr = trajectories[i];
    if (p.rows() + 1 != tr.length()) {
      throw ShapeError("empirical_risk: prediction/trajectory length mismatch");
    }
    for (std::size_t t = 0; t < p.rows(); ++t) {
      total += row_distance(p.row(t), tr.ys.row(t + 1));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

RiskReport excess_risk_from_curves(const ErrorCurve& model, const ErrorCurve& baseline) {
  const PairedWindow w = compare_window(model, baseline, 1, model.horizon);
  RiskReport r;
  r.baseline = baseline.predictor;
  r.n = std::min(model.n_systems, baseline.n_systems);
  r.horizon = model.horizon;
  r.risk_model = w.a.mean;
  r.risk_baseline = w.b.mean;
  r.delta = w.diff;
  r.delta_stderr = w.diff_stderr;
  return r;
}

RiskReport empirical_excess_risk(const PredictorFactory& model, const EvalSet& set) {
  const std::string base = model_aware_baseline(set.spec);
  const ErrorCurve m = error_curve(model, "model", set);
  const ErrorCurve b = error_curve(baseline_factory(base), base, set);
  return excess_risk_from_curves(m, b);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length samples of size >= 2");
  }
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const MeanStd mx = mean_stderr(rx);
  const MeanStd my = mean_stderr(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx.mean) * (ry[i] - my.mean);
    sxx += (rx[i] - mx.mean) * (rx[i] - mx.mean);
    syy += (ry[i] - my.mean) * (ry[i] - my.mean);
  }
  if (sxx == 0.0 || syy == 0.0) {
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("kendall_tau: need two equal-length samples of size >= 2");
  }
  // tau-b, which handles ties in either sample.
  double concordant = 0.0, discordant = 0.0, ties_x = 0.0, ties_y = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) {
        continue;
      }
      if (dx == 0.0) {
        ties_x += 1.0;
      } else if (dy == 0.0) {
        ties_y += 1.0;
      } else if ((dx > 0) == (dy > 0)) {
        concordant += 1.0;
      } else {
        discordant += 1.0;
      }
    }
  }
  const double denom =
      std::sqrt((concordant + discordant + ties_x) * (concordant + discordant + ties_y));
  return denom == 0.0 ? 0.0 : (concordant - discordant) / denom;
}

LogLogFit loglog_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("loglog_fit: need at least two points");
  }
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw std::invalid_argument("loglog_fit: values must be positive");
    }
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  if (sxx == 0.0) {
    throw std::invalid_argument("loglog_fit: x values are all equal");
  }
  LogLogFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

ScalingReport scaling_report(std::vector<ScalingCell> cells) {
  ScalingReport report;
  report.cells = std::move(cells);
  std::vector<double> mt, delta;
  for (const auto& c : report.cells) {
    if (!c.diverged) {
      mt.push_back(static_cast<double>(c.num_systems * c.horizon));
      delta.push_back(c.risk.delta);
    }
  }
  report.cells_in_fit = mt.size();
  if (mt.size() >= 2) {
    report.spearman_delta_vs_mt = spearman(mt, delta);
    std::vector<double> px, py;
    for (std::size_t i = 0; i < mt.size(); ++i) {
      if (delta[i] > 0.0) {
        px.push_back(mt[i]);
        py.push_back(delta[i]);
      }
    }
    if (px.size() >= 2 && std::adjacent_find(px.begin(), px.end(), std::not_equal_to<>()) != px.end()) {
      report.fit = loglog_fit(px, py);
    } else if (px.size() >= 2) {
      report.note = "all cells share one M*T; no log-log fit";
    } else {
      report.note = "fewer than two positive deltas; no log-log fit";
    }
  } else {
    report.note = "fewer than two usable cells";
  }
  for (const auto& c : report.cells) {
    if (c.diverged) {
      report.note += (report.note.empty() ? "" : "; ") + std::string("cell (") +
                     std::to_string(c.num_systems) + "," + std::to_string(c.horizon) +
                     ") diverged and is excluded";
    }
  }
  return report;
}

ScalingReport scaling_experiment(const std::vector<std::pair<std::size_t, std::size_t>>& grid,
                                 const TrainConfig& base, const Trainer& trainer,
                                 std::size_t eval_n, std::size_t eval_horizon,
                                 std::uint64_t eval_seed) {
  if (grid.empty()) {
    throw std::invalid_argument("scaling_experiment: empty grid");
  }
  const DistributionSpec spec = distribution_preset(base.preset);
  const EvalSet set = make_eval_set(spec, eval_n, eval_horizon, eval_seed);
  const std::string base_name = model_aware_baseline(spec);
  const ErrorCurve baseline = error_curve(baseline_factory(base_name), base_name, set);
  std::vector<ScalingCell> cells;
  for (const auto& [M, T] : grid) {
    ScalingCell cell;
    cell.num_systems = M;
    cell.horizon = T;
    TrainConfig cfg = base;
    cfg.num_systems = M;
    cfg.horizon = T;
    try {
      const std::filesystem::path ckpt = trainer(cfg);
      auto model = std::make_shared<const LoadedModel>(load_model(ckpt));
      check_model_matches(model->config(), spec, eval_horizon);
      const ErrorCurve m = error_curve(mop_factory(model), "mop", set);
      cell.risk = excess_risk_from_curves(m, baseline);
    } catch (const TrainingDivergedError& e) {
      cell.diverged = true;
      cell.note = e.what();
    }
    cells.push_back(std::move(cell));
  }
  return scaling_report(std::move(cells));
}

RobustnessReport robustness_probe(const PredictorFactory& model, const DistributionSpec& spec,
                                  std::size_t systems, std::size_t t,
                                  const std::vector<std::size_t>& taus, double scale,
                                  std::size_t draws, std::uint64_t seed) {
  if (spec.family != SystemFamily::linear || spec.switch_time ||
      spec.noise.kind != NoiseKind::iid) {
    throw std::invalid_argument("robustness probe needs a linear preset with i.i.d. noise");
  }
  if (taus.empty() || draws == 0 || systems == 0) {
    throw std::invalid_argument("robustness probe needs systems, taus and draws");
  }
  for (std::size_t tau : taus) {
    if (tau < 1 || tau >= t) {
      throw std::invalid_argument("robustness probe: tau must lie in [1, t)");
    }
  }
  RobustnessReport report;
  report.t = t;
  report.draws = draws;
  report.scale = scale;
  report.cells.resize(systems * taus.size());

  parallel_systems(systems, [&](std::size_t s) {
    const std::uint64_t task_seed = derive_seed(seed, SeedSpace::probe, s);
    const TaskInstance task = sample_task(spec, task_seed, s);
    const LinearSystem& sys = task.linear();
    const NoiseSequence noise = draw_task_noise(task, t + 1, derive_seed(task_seed, 1));
    const Trajectory traj = simulate_task_with_noise(task, noise);
    auto base_pred = model(task, traj);
    const std::vector<double> yhat = base_pred->predict_from_prefix(traj, t);

    // Draws of y_{t+1} = C (A x_t + w) + v given the original x_t.
    const std::size_t n = sys.state_dim();
    const std::size_t m = sys.output_dim();
    Rng target_rng(derive_seed(task_seed, 2));
    const Matrix mean_next = matmul(sys.A, Matrix::column(traj.xs.row(t)));
    Matrix targets = Matrix::matrix(draws, m);
    for (std::size_t d = 0; d < draws; ++d) {
      Matrix x = mean_next;
      for (std::size_t i = 0; i < n; ++i) x(i, 0) += target_rng.normal(sys.sigma_w);
      const Matrix y = matmul(sys.C, x);
      for (std::size_t i = 0; i < m; ++i) targets(d, i) = y(i, 0) + target_rng.normal(sys.sigma_v);
    }

    for (std::size_t k = 0; k < taus.size(); ++k) {
      const std::size_t tau = taus[k];
      NoiseSequence shifted = noise;
      Rng rng(derive_seed(task_seed, 1000 + tau));
      for (std::size_t i = 0; i < n; ++i) shifted.w(tau, i) += scale * sys.sigma_w * rng.normal();
      for (std::size_t i = 0; i < m; ++i) shifted.v(tau, i) += scale * sys.sigma_v * rng.normal();
      const Trajectory other = simulate_task_with_noise(task, shifted);
      auto pred = model(task, other);
      const std::vector<double> yhat2 = pred->predict_from_prefix(other, t);

      double delta = 0.0;
      for (std::size_t d = 0; d < draws; ++d) {
        delta += row_distance(targets.row(d), yhat) - row_distance(targets.row(d), yhat2);
      }
      delta /= static_cast<double>(draws);
      double shift = 0.0;
      for (std::size_t j = tau; j <= t; ++j) shift += row_distance(traj.ys.row(j), other.ys.row(j));

      RobustnessCell& cell = report.cells[s * taus.size() + k];
      cell.system = s;
      cell.t = t;
      cell.tau = tau;
      cell.delta_loss = delta;
      cell.output_shift = shift;
      cell.k_hat = shift > 0.0 ? static_cast<double>(t - tau) * std::abs(delta) / shift : 0.0;
    }
  });

  std::vector<double> all_k;
  for (const auto& c : report.cells) all_k.push_back(c.k_hat);
  report.k_max = all_k.empty() ? 0.0 : *std::max_element(all_k.begin(), all_k.end());
  report.k_median = quantile(all_k, 0.5);
  report.k_q90 = quantile(all_k, 0.9);
  std::vector<double> gaps;
  for (std::size_t k = 0; k < taus.size(); ++k) {
    double abs_delta = 0.0, k_hat = 0.0;
    for (std::size_t s = 0; s < systems; ++s) {
      abs_delta += std::abs(report.cells[s * taus.size() + k].delta_loss);
      k_hat += report.cells[s * taus.size() + k].k_hat;
    }
    report.gaps.push_back(t - taus[k]);
    gaps.push_back(static_cast<double>(t - taus[k]));
    report.mean_abs_delta.push_back(abs_delta / static_cast<double>(systems));
    report.mean_k_hat.push_back(k_hat / static_cast<double>(systems));
  }
  if (taus.size() >= 2) {
    report.kendall_tau_gap_vs_delta = kendall_tau(gaps, report.mean_abs_delta);
  }
  return report;
}

MatrixPowerStudy matrix_power_profile(std::span<const Matrix> matrices, std::size_t t_max) {
  MatrixPowerStudy study;
  study.mean_norms.assign(t_max + 1, 0.0);
  for (const Matrix& A : matrices) {
    const StabilityProfile p = contraction_profile(A, t_max);
    double peak = 0.0;
    for (std::size_t t = 0; t <= t_max; ++t) {
      study.mean_norms[t] += p.power_norms[t];
      peak = std::max(peak, p.power_norms[t]);
    }
    study.overshoot.push_back(peak / p.power_norms[0]);
  }
  const double count = static_cast<double>(matrices.size());
  for (double& v : study.mean_norms) v /= count;
  study.overshoot_of_mean =
      *std::max_element(study.mean_norms.begin(), study.mean_norms.end()) / study.mean_norms[0];
  const MeanStd ms = mean_stderr(study.overshoot);
  study.overshoot_mean = ms.mean;
  study.overshoot_stderr = ms.stderr_;
  return study;
}

MatrixPowerStudy matrix_power_study(SamplingMode mode, std::size_t count, std::size_t t_max,
                                    std::uint64_t seed) {
  if (count == 0) {
    throw std::invalid_argument("matrix_power_study: count must be >= 1");
  }
  const DistributionSpec spec =
      distribution_preset(mode == SamplingMode::dense ? "linear-dense" : "linear-triangular");
  std::vector<Matrix> matrices(count);
  parallel_systems(count, [&](std::size_t i) {
    const std::uint64_t s = derive_seed(seed, SeedSpace::test_systems, i);
    matrices[i] = sample_task(spec, s, i).linear().A;
  });
  return matrix_power_profile(matrices, t_max);
}

DistributionShiftReport distribution_shift_sweep(const PredictorFactory& model,
                                                 const DistributionSpec& base,
                                                 double train_variance,
                                                 const std::vector<double>& test_variances,
                                                 std::size_t n, std::size_t horizon,
                                                 std::uint64_t seed) {
  DistributionShiftReport report;
  report.train_variance = train_variance;
  const std::string base_name = model_aware_baseline(base);
  for (double var : test_variances) {
    DistributionSpec spec = base;
    spec.noise_var_w = var;
    spec.noise_var_v = var;
    const EvalSet set = make_eval_set(spec, n, horizon, seed);
    ShiftEntry e;
    e.variance = var;
    e.mop = error_curve(model, "mop", set);
    e.baseline = error_curve(baseline_factory(base_name), base_name, set);
    e.late = compare_window(e.mop, e.baseline, horizon > 10 ? horizon - 10 : 1, horizon);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace mop
