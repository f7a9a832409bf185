#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mop/evaluation.hpp"
#include "mop/systems.hpp"

namespace mop {

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCurveCsvHeader =
    "experiment,preset,predictor,t,mean_err,stderr,n_systems,seed";

struct CurveRow {
  std::string experiment;
  std::string preset;
  std::string predictor;
  std::size_t t = 0;
  double mean_err = 0.0;
  double stderr_ = 0.0;
  std::size_t n_systems = 0;
  std::uint64_t seed = 0;
};

std::string curves_csv(const std::string& experiment, const std::vector<ErrorCurve>& curves,
                       bool with_header = true);
void write_text(const std::filesystem::path& path, const std::string& text);
// Errors name the offending line (1-based, header is line 1).
std::vector<CurveRow> parse_curves_csv(const std::string& text);
std::vector<CurveRow> read_curves_csv(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const ErrorCurve& curve);
nlohmann::ordered_json to_json(const WindowStat& w);
nlohmann::ordered_json to_json(const PairedWindow& w);
nlohmann::ordered_json to_json(const Comparison& c);
nlohmann::ordered_json to_json(const RiskReport& r);
nlohmann::ordered_json to_json(const ScalingReport& r);
nlohmann::ordered_json to_json(const RobustnessReport& r);
nlohmann::ordered_json to_json(const MatrixPowerStudy& s);
nlohmann::ordered_json to_json(const DistributionShiftReport& r);

nlohmann::ordered_json system_to_json(const TaskInstance& task);
nlohmann::ordered_json systems_collection(const std::string& preset, std::uint64_t seed,
                                          const std::vector<TaskInstance>& tasks);

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

}  // namespace mop
