#include "mop/commands.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mop/checkpoint.hpp"
#include "mop/evaluation.hpp"
#include "mop/presets.hpp"
#include "mop/report_io.hpp"
#include "mop/rng.hpp"
#include "mop/svg_plot.hpp"
#include "mop/training.hpp"

namespace mop {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read " + path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string file_hash(const fs::path& path) { return fnv1a_hex(read_file(path)); }

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string format_variance(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Outputs go under the --out-dir root. Inputs are looked up there first, then
// relative to the working directory.
class Paths {
 public:
  explicit Paths(fs::path root) : root_(fs::absolute(std::move(root)).lexically_normal()) {}

  const fs::path& root() const { return root_; }

  fs::path output(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : (root_ / path).lexically_normal();
  }

  fs::path input(const std::string& p) const {
    const fs::path path(p);
    if (path.is_absolute()) return path;
    const fs::path under_root = (root_ / path).lexically_normal();
    if (fs::exists(under_root)) return under_root;
    return fs::absolute(path).lexically_normal();
  }

 private:
  fs::path root_;
};

json manifest_base(const Paths& paths, const std::vector<std::string>& command) {
  json m;
  m["tool_version"] = kToolVersion;
  m["command"] = command;
  m["out_dir"] = paths.root().string();
  return m;
}

json output_hashes(const fs::path& dir, const std::vector<fs::path>& files) {
  json h = json::object();
  for (const auto& f : files) {
    h[fs::relative(f, dir).generic_string()] = file_hash(f);
  }
  return h;
}

std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t flag, std::uint64_t fallback) {
  return opt->count() > 0 ? flag : seed_from_env(fallback);
}

std::vector<TaskInstance> test_tasks(const DistributionSpec& spec, std::size_t count,
                                     std::uint64_t seed) {
  std::vector<TaskInstance> tasks;
  tasks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    tasks.push_back(sample_task(spec, derive_seed(seed, SeedSpace::test_systems, i), i));
  }
  return tasks;
}

json eval_plan_json(const EvalPlan& p) {
  json j;
  j["distribution"] = p.distribution;
  j["n"] = p.n;
  j["horizon"] = p.horizon;
  j["predictors"] = p.predictors;
  if (!p.test_variances.empty()) {
    j["train_variance"] = p.train_variance;
    j["test_variances"] = p.test_variances;
  }
  if (!p.grid.empty()) {
    json g = json::array();
    for (const auto& [M, T] : p.grid) g.push_back({M, T});
    j["grid"] = std::move(g);
  }
  if (p.power_count > 0) {
    j["power_count"] = p.power_count;
    j["power_t_max"] = p.power_t_max;
  }
  if (p.probe_systems > 0) {
    j["probe"] = {{"systems", p.probe_systems}, {"t", p.probe_t},     {"taus", p.probe_taus},
                  {"scale", p.probe_scale},     {"draws", p.probe_draws}};
  }
  return j;
}

struct EvalOutcome {
  std::vector<ErrorCurve> curves;
  json report;
};

EvalOutcome evaluate(const std::shared_ptr<const LoadedModel>& model, const DistributionSpec& spec,
                     std::size_t n, std::size_t horizon, std::uint64_t seed,
                     const std::vector<std::string>& predictors, std::ostream& out) {
  if (predictors.empty()) {
    throw std::invalid_argument("no predictors to evaluate");
  }
  const EvalSet set = make_eval_set(spec, n, horizon, seed);
  EvalOutcome r;
  for (const auto& name : predictors) {
    r.curves.push_back(error_curve(make_predictor_factory(name, model), name, set));
    if (!r.curves.back().failed.empty()) {
      out << "warning: " << name << " produced non-finite predictions on "
          << r.curves.back().failed.size() << " systems\n";
    }
  }
  json& rep = r.report;
  rep["preset"] = spec.name;
  rep["n"] = n;
  rep["horizon"] = horizon;
  rep["seed"] = seed;
  rep["predictors"] = predictors;
  if (horizon < 11) {
    return r;
  }
  json windows = json::object();
  for (const auto& c : r.curves) {
    windows[c.predictor] = {{"early", to_json(window_stat(c, 2, 10))},
                            {"late", to_json(window_stat(c, horizon - 10, horizon))}};
    out << c.predictor << ": late-window mean error "
        << window_stat(c, horizon - 10, horizon).mean << "\n";
  }
  rep["windows"] = std::move(windows);
  const auto mop = std::find_if(r.curves.begin(), r.curves.end(),
                                [](const ErrorCurve& c) { return c.predictor == "mop"; });
  if (mop != r.curves.end()) {
    json comps = json::array();
    for (const auto& c : r.curves) {
      if (&c == &*mop) continue;
      comps.push_back(to_json(compare_predictors(*mop, c)));
      if (c.predictor == model_aware_baseline(spec)) {
        rep["excess_risk"] = to_json(excess_risk_from_curves(*mop, c));
      }
    }
    rep["comparisons"] = std::move(comps);
  }
  return r;
}

void write_plots(const fs::path& csv, const fs::path& curves_svg,
                 const std::optional<fs::path>& ratio_svg, const std::string& ratio_baseline,
                 const std::string& title) {
  const std::vector<CurveRow> rows = read_curves_csv(csv);
  PlotOptions opt;
  opt.title = title;
  write_text(curves_svg, render_svg(rows, opt));
  if (ratio_svg) {
    opt.ratio_baseline = ratio_baseline;
    opt.title = title + " (ratio)";
    write_text(*ratio_svg, render_svg(rows, opt));
  }
}

std::shared_ptr<const LoadedModel> load_shared(const fs::path& ckpt) {
  return std::make_shared<const LoadedModel>(load_model(ckpt));
}

// ---- gen ----

struct GenArgs {
  std::string preset;
  std::size_t count = 10;
  std::uint64_t seed = 0;
  std::string out = "systems.json";
  CLI::Option* seed_opt = nullptr;
};

int cmd_gen(const Paths& paths, const GenArgs& a, std::ostream& out) {
  const DistributionSpec spec = distribution_preset(a.preset);
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed, 0);
  const auto t0 = Clock::now();
  const fs::path file = paths.output(a.out);
  write_json(file, systems_collection(spec.name, seed, test_tasks(spec, a.count, seed)));

  json m = manifest_base(paths, {"gen", "--preset", a.preset, "--count", std::to_string(a.count),
                                 "--seed", std::to_string(seed), "--out", a.out});
  m["preset"] = spec.name;
  m["seed"] = seed;
  m["count"] = a.count;
  m["outputs"] = output_hashes(file.parent_path(), {file});
  m["timings"] = {{"total_s", seconds_since(t0)}};
  fs::path manifest = file;
  manifest.replace_extension(".manifest.json");
  write_json(manifest, m);
  out << "wrote " << file.string() << " (" << a.count << " systems)\n";
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::string preset;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t num_systems = 0;
  std::size_t horizon = 0;
  std::size_t batch_size = 0;
  double lr = 0.0;
  std::size_t checkpoint_every = 0;
  std::string precision;
  bool fresh = false;
  std::string resume;
  std::string out = "train";
  bool verbose = false;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* num_systems_opt = nullptr;
  CLI::Option* horizon_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* every_opt = nullptr;
};

TrainConfig base_train_config(const Paths& paths, const TrainArgs& a) {
  if (!a.config.empty()) {
    const fs::path file = paths.input(a.config);
    if (!fs::is_regular_file(file)) {
      throw ConfigError("config file " + file.string() + " not found");
    }
    json j;
    try {
      j = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
    }
    TrainConfig cfg = train_config_from_json(j);
    if (!a.preset.empty() && a.preset != cfg.preset) {
      throw ConfigError("--preset " + a.preset + " conflicts with the config preset " + cfg.preset);
    }
    return cfg;
  }
  if (a.preset.empty()) {
    return desk_train_config("linear-dense");
  }
  const auto names = experiment_preset_names();
  if (std::find(names.begin(), names.end(), a.preset) != names.end()) {
    return experiment_preset(a.preset).train;
  }
  return desk_train_config(a.preset);
}

int cmd_train(const Paths& paths, const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = base_train_config(paths, a);
  if (a.steps_opt->count()) cfg.steps = a.steps;
  if (a.num_systems_opt->count()) cfg.num_systems = a.num_systems;
  if (a.horizon_opt->count()) cfg.horizon = a.horizon;
  if (a.batch_opt->count()) cfg.batch_size = a.batch_size;
  if (a.lr_opt->count()) cfg.learning_rate = a.lr;
  if (a.every_opt->count()) cfg.checkpoint_every = a.checkpoint_every;
  if (!a.precision.empty()) cfg.model.precision = parse_precision(a.precision);
  if (a.fresh) cfg.fresh_trajectories = true;
  cfg.seed = resolve_seed(a.seed_opt, a.seed, cfg.seed);
  cfg.validate();

  const fs::path dir = paths.output(a.out);
  fs::create_directories(dir);
  const fs::path config_file = dir / "config.json";
  write_json(config_file, to_json(cfg));

  TrainOptions opt;
  opt.out_dir = dir;
  opt.quiet = !a.verbose;
  std::vector<std::string> command = {"train", "--config", config_file.string(),
                                      "--seed", std::to_string(cfg.seed), "--out", a.out};
  if (!a.resume.empty()) {
    opt.resume = paths.input(a.resume);
    command.push_back("--resume");
    command.push_back(opt.resume->string());
  }
  const TrainResult result = train(cfg, opt);

  const fs::path manifest_file = dir / "manifest.json";
  json m = json::parse(read_file(manifest_file));
  json base = manifest_base(paths, command);
  for (auto it = m.begin(); it != m.end(); ++it) {
    if (!base.contains(it.key())) base[it.key()] = it.value();
  }
  write_json(manifest_file, base);
  out << "wrote " << result.final_checkpoint.string();
  if (!result.log.empty()) {
    out << " (loss " << result.log.front().loss << " -> " << result.log.back().loss << ")";
  }
  out << "\n";
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string ckpt;
  std::string preset;
  std::size_t n = 100;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> predictors;
  std::string experiment = "eval";
  std::string out = "eval";
  CLI::Option* seed_opt = nullptr;
  CLI::Option* horizon_opt = nullptr;
};

int cmd_eval(const Paths& paths, const EvalArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  std::shared_ptr<const LoadedModel> model;
  std::string preset = a.preset;
  std::optional<fs::path> ckpt;
  if (!a.ckpt.empty()) {
    ckpt = paths.input(a.ckpt);
    const CheckpointHeader header = read_checkpoint_header(*ckpt);
    if (preset.empty() && header.metadata.contains("train_config")) {
      preset = header.metadata["train_config"].value("preset", "");
    }
    model = load_shared(*ckpt);
  }
  if (preset.empty()) {
    throw ConfigError("eval needs --preset (or a checkpoint that records one)");
  }
  const DistributionSpec spec = distribution_preset(preset);
  const std::size_t horizon =
      a.horizon_opt->count() ? a.horizon : desk_train_config(spec.name).horizon;
  if (horizon == 0) {
    throw ConfigError("--horizon must be positive");
  }
  if (model) {
    check_model_matches(model->config(), spec, horizon);
  }
  std::vector<std::string> predictors = a.predictors;
  if (predictors.empty()) {
    if (model) predictors.push_back("mop");
    predictors.push_back(model_aware_baseline(spec));
    predictors.push_back("ar-ols");
    predictors.push_back("zero");
  }
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed, 0);

  EvalOutcome ev = evaluate(model, spec, a.n, horizon, seed, predictors, out);
  const fs::path dir = paths.output(a.out);
  const fs::path csv = dir / "curves.csv";
  const fs::path report = dir / "report.json";
  write_text(csv, curves_csv(a.experiment, ev.curves));
  ev.report["experiment"] = a.experiment;
  if (ckpt) ev.report["checkpoint_hash"] = file_hash(*ckpt);
  write_json(report, ev.report);

  std::vector<std::string> command = {"eval"};
  if (ckpt) {
    command.insert(command.end(), {"--ckpt", ckpt->string()});
  }
  command.insert(command.end(),
                 {"--preset", spec.name, "--n", std::to_string(a.n), "--horizon",
                  std::to_string(horizon), "--seed", std::to_string(seed), "--predictors",
                  join(predictors, ','), "--experiment", a.experiment, "--out", a.out});
  json m = manifest_base(paths, command);
  m["preset"] = spec.name;
  m["seed"] = seed;
  if (ckpt) m["checkpoints"] = {{ckpt->string(), file_hash(*ckpt)}};
  m["outputs"] = output_hashes(dir, {csv, report});
  m["timings"] = {{"total_s", seconds_since(t0)}};
  write_json(dir / "manifest.json", m);
  out << "wrote " << csv.string() << "\n";
  return 0;
}

// ---- plot ----

struct PlotArgs {
  std::string csv;
  std::string svg;
  std::string ratio;
  std::string title;
};

int cmd_plot(const Paths& paths, const PlotArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  const fs::path csv = paths.input(a.csv);
  const fs::path svg = paths.output(a.svg);
  PlotOptions opt;
  opt.title = a.title;
  if (!a.ratio.empty()) opt.ratio_baseline = a.ratio;
  write_text(svg, render_svg(read_curves_csv(csv), opt));

  std::vector<std::string> command = {"plot", "--csv", csv.string(), "--svg", a.svg};
  if (!a.ratio.empty()) command.insert(command.end(), {"--ratio", a.ratio});
  if (!a.title.empty()) command.insert(command.end(), {"--title", a.title});
  json m = manifest_base(paths, command);
  m["inputs"] = {{csv.string(), file_hash(csv)}};
  m["outputs"] = output_hashes(svg.parent_path(), {svg});
  m["timings"] = {{"total_s", seconds_since(t0)}};
  fs::path manifest = svg;
  manifest.replace_extension(".manifest.json");
  write_json(manifest, m);
  out << "wrote " << svg.string() << "\n";
  return 0;
}

// ---- inspect ----

int cmd_inspect(const Paths& paths, const std::string& ckpt, std::ostream& out) {
  const CheckpointHeader h = read_checkpoint_header(paths.input(ckpt));
  json j;
  j["config"] = to_json(h.config);
  j["precision"] = precision_name(h.precision);
  j["step"] = h.step;
  j["has_optimizer"] = h.has_optimizer;
  std::size_t params = 0;
  for (const auto& [name, shape] : parameter_layout(h.config)) {
    std::size_t n = 1;
    for (const auto d : shape) n *= d;
    params += n;
  }
  j["parameters"] = params;
  j["tensors"] = h.tensors.size();
  j["blob_bytes"] = h.blob_bytes;
  j["metadata"] = h.metadata;
  out << j.dump(2) << "\n";
  return 0;
}

// ---- experiment ----

struct ExperimentArgs {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t n = 0;
  std::string ckpt;
  std::string out;
  bool verbose = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* n_opt = nullptr;
};

int cmd_experiment(const Paths& paths, const ExperimentArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed, 0);
  ExperimentPreset p = experiment_preset(a.name, seed);
  if (a.steps_opt->count()) p.train.steps = a.steps;
  if (a.n_opt->count()) p.eval.n = a.n;
  p.train.validate();
  const std::string out_rel = a.out.empty() ? a.name : a.out;
  const fs::path dir = paths.output(out_rel);
  fs::create_directories(dir);
  const DistributionSpec spec = distribution_preset(p.eval.distribution);
  const std::string baseline = model_aware_baseline(spec);

  std::vector<fs::path> outputs;
  const fs::path systems = dir / "systems.json";
  write_json(systems, systems_collection(spec.name, seed, test_tasks(spec, p.eval.n, seed)));
  outputs.push_back(systems);

  json report;
  report["experiment"] = p.name;
  json checkpoints = json::object();
  std::vector<ErrorCurve> curves;
  TrainOptions topt;
  topt.quiet = !a.verbose;

  if (!p.eval.grid.empty()) {
    if (!a.ckpt.empty()) {
      throw ConfigError("experiment " + p.name + " trains its own model grid; --ckpt is not accepted");
    }
    std::vector<std::pair<std::string, fs::path>> trained;
    const Trainer trainer = [&](const TrainConfig& c) {
      const std::string label =
          "M" + std::to_string(c.num_systems) + "_T" + std::to_string(c.horizon);
      TrainOptions o = topt;
      o.out_dir = dir / ("train_" + label);
      out << "training " << label << "\n";
      const TrainResult r = train(c, o);
      checkpoints[fs::relative(r.final_checkpoint, dir).generic_string()] =
          file_hash(r.final_checkpoint);
      trained.emplace_back(label, r.final_checkpoint);
      return r.final_checkpoint;
    };
    const ScalingReport sr =
        scaling_experiment(p.eval.grid, p.train, trainer, p.eval.n, p.eval.horizon, seed);
    report["scaling"] = to_json(sr);
    out << "spearman(delta, MT) = " << sr.spearman_delta_vs_mt << "\n";
    const EvalSet set = make_eval_set(spec, p.eval.n, p.eval.horizon, seed);
    curves.push_back(error_curve(baseline_factory(baseline), baseline, set));
    for (const auto& [label, ckpt] : trained) {
      curves.push_back(error_curve(mop_factory(load_shared(ckpt)), "mop-" + label, set));
    }
  } else {
    fs::path ckpt;
    if (!a.ckpt.empty()) {
      ckpt = paths.input(a.ckpt);
    } else {
      topt.out_dir = dir / "train";
      out << "training " << p.train.preset << " for " << p.train.steps << " steps\n";
      ckpt = train(p.train, topt).final_checkpoint;
    }
    checkpoints[ckpt.string()] = file_hash(ckpt);
    const auto model = load_shared(ckpt);
    check_model_matches(model->config(), spec, p.eval.horizon);
    EvalOutcome ev = evaluate(model, spec, p.eval.n, p.eval.horizon, seed, p.eval.predictors, out);
    curves = std::move(ev.curves);
    report["evaluation"] = std::move(ev.report);

    if (p.eval.probe_systems > 0) {
      const RobustnessReport rr =
          robustness_probe(mop_factory(model), spec, p.eval.probe_systems, p.eval.probe_t,
                           p.eval.probe_taus, p.eval.probe_scale, p.eval.probe_draws, seed);
      report["robustness"] = to_json(rr);
      out << "robustness: K_max " << rr.k_max << ", kendall tau "
          << rr.kendall_tau_gap_vs_delta << "\n";
    }
    if (p.eval.power_count > 0) {
      const MatrixPowerStudy tri = matrix_power_study(SamplingMode::upper_triangular,
                                                      p.eval.power_count, p.eval.power_t_max, seed);
      const MatrixPowerStudy dense =
          matrix_power_study(SamplingMode::dense, p.eval.power_count, p.eval.power_t_max, seed);
      const double diff = tri.overshoot_mean - dense.overshoot_mean;
      const double se = std::hypot(tri.overshoot_stderr, dense.overshoot_stderr);
      report["matrix_power"] = {{"upper_triangular", to_json(tri)},
                                {"dense", to_json(dense)},
                                {"overshoot_diff", diff},
                                {"overshoot_diff_stderr", se}};
      out << "overshoot: triangular " << tri.overshoot_mean << ", dense " << dense.overshoot_mean
          << "\n";
    }
    if (!p.eval.test_variances.empty()) {
      DistributionShiftReport sr =
          distribution_shift_sweep(mop_factory(model), spec, p.eval.train_variance,
                                   p.eval.test_variances, p.eval.n, p.eval.horizon, seed);
      std::vector<ErrorCurve> shift_curves;
      for (auto& e : sr.entries) {
        const std::string tag = spec.name + "-var" + format_variance(e.variance);
        e.mop.preset = tag;
        e.baseline.preset = tag;
        shift_curves.push_back(e.mop);
        shift_curves.push_back(e.baseline);
        out << "variance " << e.variance << ": late ratio " << e.late.ratio << "\n";
      }
      report["distribution_shift"] = to_json(sr);
      const fs::path shift_csv = dir / "shift.csv";
      const fs::path shift_svg = dir / "shift.svg";
      write_text(shift_csv, curves_csv(p.name, shift_curves));
      write_plots(shift_csv, shift_svg, std::nullopt, "", p.name + ": noise variance sweep");
      outputs.push_back(shift_csv);
      outputs.push_back(shift_svg);
    }
  }

  const fs::path csv = dir / "curves.csv";
  write_text(csv, curves_csv(p.name, curves));
  const fs::path report_file = dir / "report.json";
  write_json(report_file, report);
  const fs::path curves_svg = dir / "curves.svg";
  const bool has_baseline = std::any_of(curves.begin(), curves.end(), [&](const ErrorCurve& c) {
    return c.predictor == baseline;
  });
  std::optional<fs::path> ratio_svg;
  if (has_baseline && curves.size() > 1) ratio_svg = dir / "ratio.svg";
  write_plots(csv, curves_svg, ratio_svg, baseline, p.name);
  outputs.insert(outputs.end(), {csv, report_file, curves_svg});
  if (ratio_svg) outputs.push_back(*ratio_svg);

  std::vector<std::string> command = {"experiment", p.name, "--seed", std::to_string(seed),
                                      "--out", out_rel};
  if (a.steps_opt->count()) command.insert(command.end(), {"--steps", std::to_string(a.steps)});
  if (a.n_opt->count()) command.insert(command.end(), {"--n", std::to_string(a.n)});
  if (!a.ckpt.empty()) command.insert(command.end(), {"--ckpt", paths.input(a.ckpt).string()});
  json m = manifest_base(paths, command);
  m["experiment"] = p.name;
  m["seed"] = seed;
  m["train_config"] = to_json(p.train);
  m["eval_plan"] = eval_plan_json(p.eval);
  m["checkpoints"] = std::move(checkpoints);
  m["outputs"] = output_hashes(dir, outputs);
  m["timings"] = {{"total_s", seconds_since(t0)}};
  write_json(dir / "manifest.json", m);
  out << "wrote " << dir.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-trained transformer output predictor: data, training, evaluation, figures",
               "mop"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();

  std::string out_dir = ".";
  int threads = 0;
  CLI::Option* out_dir_opt =
      app.add_option("--out-dir", out_dir, "Root for relative paths")
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  CLI::Option* threads_opt =
      app.add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);

  GenArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen", "Sample test systems to a JSON collection");
  gen_cmd->add_option("--preset", gen.preset, "System distribution")->required();
  gen_cmd->add_option("--count", gen.count, "Number of systems");
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "Base seed");
  gen_cmd->add_option("--out", gen.out, "Output JSON file");

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Meta-train a model");
  train_cmd->add_option("--config", tr.config, "JSON train config");
  train_cmd->add_option("--preset", tr.preset, "Distribution or experiment preset (no --config)");
  tr.steps_opt = train_cmd->add_option("--steps", tr.steps);
  tr.seed_opt = train_cmd->add_option("--seed", tr.seed);
  tr.num_systems_opt = train_cmd->add_option("--num-systems", tr.num_systems);
  tr.horizon_opt = train_cmd->add_option("--horizon", tr.horizon);
  tr.batch_opt = train_cmd->add_option("--batch-size", tr.batch_size);
  tr.lr_opt = train_cmd->add_option("--lr", tr.lr);
  tr.every_opt = train_cmd->add_option("--checkpoint-every", tr.checkpoint_every);
  train_cmd->add_option("--precision", tr.precision, "f32 or f64");
  train_cmd->add_flag("--fresh", tr.fresh, "Redraw trajectory noise every step");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint with optimizer state");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_flag("--verbose", tr.verbose);

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Error curves for a model and baselines");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Model checkpoint");
  eval_cmd->add_option("--preset", ev.preset, "System distribution");
  eval_cmd->add_option("--n", ev.n, "Number of test systems");
  ev.horizon_opt = eval_cmd->add_option("--horizon", ev.horizon);
  ev.seed_opt = eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--predictors", ev.predictors, "mop, kf, ekf, ar-ols, zero, oracle")
      ->delimiter(',');
  eval_cmd->add_option("--experiment", ev.experiment, "Label for the CSV experiment column");
  eval_cmd->add_option("--out", ev.out, "Output directory");

  ExperimentArgs ex;
  CLI::App* exp_cmd = app.add_subcommand("experiment", "Run gen, train, eval and plot for a preset");
  exp_cmd->add_option("name", ex.name, "Experiment preset")->required();
  ex.seed_opt = exp_cmd->add_option("--seed", ex.seed);
  ex.steps_opt = exp_cmd->add_option("--steps", ex.steps);
  ex.n_opt = exp_cmd->add_option("--n", ex.n);
  exp_cmd->add_option("--ckpt", ex.ckpt, "Skip training and use this checkpoint");
  exp_cmd->add_option("--out", ex.out, "Output directory (default: the preset name)");
  exp_cmd->add_flag("--verbose", ex.verbose);

  PlotArgs pl;
  CLI::App* plot_cmd = app.add_subcommand("plot", "SVG line plot from a curves CSV");
  plot_cmd->add_option("--csv", pl.csv)->required();
  plot_cmd->add_option("--svg", pl.svg)->required();
  plot_cmd->add_option("--ratio", pl.ratio, "Plot ratios against this predictor");
  plot_cmd->add_option("--title", pl.title);

  std::string inspect_ckpt;
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "Print a checkpoint header");
  inspect_cmd->add_option("--ckpt", inspect_ckpt)->required();

  std::string replay_manifest;
  CLI::App* replay_cmd = app.add_subcommand("replay", "Re-run the command stored in a manifest");
  replay_cmd->add_option("--manifest", replay_manifest)->required();

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->fallthrough();
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  if (threads_opt->count()) {
    omp_set_num_threads(threads);
  }
  const Paths paths(out_dir);
  try {
    if (app.got_subcommand(gen_cmd)) return cmd_gen(paths, gen, out);
    if (app.got_subcommand(train_cmd)) return cmd_train(paths, tr, out);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(paths, ev, out);
    if (app.got_subcommand(exp_cmd)) return cmd_experiment(paths, ex, out);
    if (app.got_subcommand(plot_cmd)) return cmd_plot(paths, pl, out);
    if (app.got_subcommand(inspect_cmd)) return cmd_inspect(paths, inspect_ckpt, out);
    if (app.got_subcommand(replay_cmd)) {
      const fs::path file = paths.input(replay_manifest);
      const json m = json::parse(read_file(file));
      if (!m.contains("command") || !m["command"].is_array() || m["command"].empty()) {
        throw ConfigError("manifest " + file.string() + " has no command to replay");
      }
      std::vector<std::string> argv;
      argv.push_back("--out-dir");
      argv.push_back(out_dir_opt->count() ? paths.root().string()
                                          : m.value("out_dir", paths.root().string()));
      if (threads_opt->count()) {
        argv.push_back("--threads");
        argv.push_back(std::to_string(threads));
      }
      for (const auto& a : m["command"]) {
        argv.push_back(a.get<std::string>());
      }
      if (argv[argv.size() - m["command"].size()] == "replay") {
        throw ConfigError("manifest command is itself a replay");
      }
      return run_cli(argv, out, err);
    }
  } catch (const UnknownPresetError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mop
