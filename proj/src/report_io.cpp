#include "mop/report_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mop {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
T parse_unsigned(const std::string& s, std::size_t line, const char* what) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw CsvError("line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& s, std::size_t line, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CsvError("line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  }
}

nlohmann::ordered_json matrix_json(const Matrix& m) {
  return nlohmann::ordered_json(std::vector<double>(m.data().begin(), m.data().end()));
}

}  // namespace

std::string curves_csv(const std::string& experiment, const std::vector<ErrorCurve>& curves,
                       bool with_header) {
  std::ostringstream os;
  if (with_header) {
    os << kCurveCsvHeader << "\n";
  }
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.horizon; ++k) {
      os << experiment << ',' << c.preset << ',' << c.predictor << ',' << (k + 1) << ','
         << fmt(c.mean[k]) << ',' << fmt(c.stderr_[k]) << ',' << c.n_systems << ',' << c.seed
         << "\n";
    }
  }
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << text;
}

std::vector<CurveRow> parse_curves_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  std::vector<CurveRow> rows;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header_seen) {
      if (line != kCurveCsvHeader) {
        throw CsvError("line " + std::to_string(number) + ": expected header '" +
                       kCurveCsvHeader + "'");
      }
      header_seen = true;
      continue;
    }
    if (line.empty()) {
      continue;
    }
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 8) {
      throw CsvError("line " + std::to_string(number) + ": expected 8 fields, found " +
                     std::to_string(f.size()));
    }
    CurveRow r;
    r.experiment = f[0];
    r.preset = f[1];
    r.predictor = f[2];
    if (r.predictor.empty()) {
      throw CsvError("line " + std::to_string(number) + ": empty predictor");
    }
    r.t = parse_unsigned<std::size_t>(f[3], number, "t");
    r.mean_err = parse_double(f[4], number, "mean_err");
    r.stderr_ = parse_double(f[5], number, "stderr");
    r.n_systems = parse_unsigned<std::size_t>(f[6], number, "n_systems");
    r.seed = parse_unsigned<std::uint64_t>(f[7], number, "seed");
    rows.push_back(std::move(r));
  }
  if (!header_seen) {
    throw CsvError("line 1: empty file, expected header");
  }
  return rows;
}

std::vector<CurveRow> read_curves_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CsvError("cannot open " + path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  return parse_curves_csv(os.str());
}

nlohmann::ordered_json to_json(const ErrorCurve& c) {
  nlohmann::ordered_json j;
  j["predictor"] = c.predictor;
  j["preset"] = c.preset;
  j["horizon"] = c.horizon;
  j["n_systems"] = c.n_systems;
  j["seed"] = c.seed;
  j["mean"] = c.mean;
  j["stderr"] = c.stderr_;
  j["failed_systems"] = c.failed;
  return j;
}

nlohmann::ordered_json to_json(const WindowStat& w) {
  return {{"t_lo", w.lo}, {"t_hi", w.hi}, {"mean", w.mean}, {"stderr", w.stderr_}};
}

nlohmann::ordered_json to_json(const PairedWindow& w) {
  nlohmann::ordered_json j;
  j["a"] = to_json(w.a);
  j["b"] = to_json(w.b);
  if (w.ratio_defined) {
    j["ratio"] = w.ratio;
    j["ratio_stderr"] = w.ratio_stderr;
  } else {
    j["ratio"] = nullptr;
    j["ratio_stderr"] = nullptr;
  }
  j["diff"] = w.diff;
  j["diff_stderr"] = w.diff_stderr;
  j["pooled_stderr"] = w.pooled_stderr;
  return j;
}

nlohmann::ordered_json to_json(const Comparison& c) {
  nlohmann::ordered_json j;
  j["a"] = c.a;
  j["b"] = c.b;
  nlohmann::ordered_json ratio = nlohmann::ordered_json::array();
  for (const auto& r : c.ratio) {
    ratio.push_back(r ? nlohmann::ordered_json(*r) : nlohmann::ordered_json(nullptr));
  }
  j["ratio"] = std::move(ratio);
  j["early"] = to_json(c.early);
  j["late"] = to_json(c.late);
  return j;
}

nlohmann::ordered_json to_json(const RiskReport& r) {
  nlohmann::ordered_json j;
  j["baseline"] = r.baseline;
  j["n"] = r.n;
  j["horizon"] = r.horizon;
  j["risk_model"] = r.risk_model;
  j["risk_baseline"] = r.risk_baseline;
  j["delta"] = r.delta;
  j["delta_stderr"] = r.delta_stderr;
  return j;
}

nlohmann::ordered_json to_json(const ScalingReport& r) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& c : r.cells) {
    nlohmann::ordered_json e;
    e["num_systems"] = c.num_systems;
    e["horizon"] = c.horizon;
    e["diverged"] = c.diverged;
    e["note"] = c.note;
    e["risk"] = to_json(c.risk);
    cells.push_back(std::move(e));
  }
  j["cells"] = std::move(cells);
  j["cells_in_fit"] = r.cells_in_fit;
  j["spearman_delta_vs_mt"] = r.spearman_delta_vs_mt;
  j["loglog_slope"] = r.fit.slope;
  j["loglog_intercept"] = r.fit.intercept;
  j["note"] = r.note;
  return j;
}

nlohmann::ordered_json to_json(const RobustnessReport& r) {
  nlohmann::ordered_json j;
  j["t"] = r.t;
  j["draws"] = r.draws;
  j["scale"] = r.scale;
  j["k_max"] = r.k_max;
  j["k_median"] = r.k_median;
  j["k_q90"] = r.k_q90;
  j["gaps"] = r.gaps;
  j["mean_abs_delta"] = r.mean_abs_delta;
  j["mean_k_hat"] = r.mean_k_hat;
  j["kendall_tau_gap_vs_delta"] = r.kendall_tau_gap_vs_delta;
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"system", c.system},
                     {"t", c.t},
                     {"tau", c.tau},
                     {"delta_loss", c.delta_loss},
                     {"output_shift", c.output_shift},
                     {"k_hat", c.k_hat}});
  }
  j["cells"] = std::move(cells);
  return j;
}

nlohmann::ordered_json to_json(const MatrixPowerStudy& s) {
  nlohmann::ordered_json j;
  j["mean_norms"] = s.mean_norms;
  j["overshoot_of_mean"] = s.overshoot_of_mean;
  j["overshoot_mean"] = s.overshoot_mean;
  j["overshoot_stderr"] = s.overshoot_stderr;
  j["count"] = s.overshoot.size();
  return j;
}

nlohmann::ordered_json to_json(const DistributionShiftReport& r) {
  nlohmann::ordered_json j;
  j["train_variance"] = r.train_variance;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) {
    nlohmann::ordered_json x;
    x["variance"] = e.variance;
    x["late"] = to_json(e.late);
    x["mop"] = to_json(e.mop);
    x["baseline"] = to_json(e.baseline);
    entries.push_back(std::move(x));
  }
  j["entries"] = std::move(entries);
  return j;
}

nlohmann::ordered_json system_to_json(const TaskInstance& task) {
  nlohmann::ordered_json j;
  if (task.is_quadrotor()) {
    const QuadrotorSystem& q = task.quadrotor();
    j["kind"] = "quadrotor";
    j["n"] = QuadrotorSystem::kStateDim;
    j["m"] = q.C.rows();
    j["mass"] = q.mass;
    j["arm"] = q.arm;
    j["inertia"] = q.inertia;
    j["gravity"] = q.gravity;
    j["tau"] = q.tau;
    j["C"] = matrix_json(q.C);
    j["sigma_w"] = q.sigma_w;
    j["sigma_v"] = q.sigma_v;
  } else {
    const LinearSystem& s = task.linear();
    j["kind"] = "linear";
    j["n"] = s.state_dim();
    j["m"] = s.output_dim();
    j["A"] = matrix_json(s.A);
    j["C"] = matrix_json(s.C);
    j["sigma_w"] = s.sigma_w;
    j["sigma_v"] = s.sigma_v;
    if (task.switch_spec) {
      j["switch_time"] = task.switch_spec->time;
      j["switch_A"] = matrix_json(task.switch_spec->replacement.A);
      j["switch_C"] = matrix_json(task.switch_spec->replacement.C);
    }
  }
  j["noise"] = task.noise.kind == NoiseKind::iid ? "iid" : "moving_average";
  j["noise_window"] = task.noise.window;
  j["seed"] = task.seed;
  return j;
}

nlohmann::ordered_json systems_collection(const std::string& preset, std::uint64_t seed,
                                          const std::vector<TaskInstance>& tasks) {
  nlohmann::ordered_json j;
  j["format"] = "mop-systems";
  j["version"] = 1;
  j["preset"] = preset;
  j["seed"] = seed;
  j["count"] = tasks.size();
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& t : tasks) {
    list.push_back(system_to_json(t));
  }
  j["systems"] = std::move(list);
  return j;
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_text(path, j.dump(2) + "\n");
}

}  // namespace mop
