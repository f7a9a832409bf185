#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mop/report_io.hpp"

namespace mop {

struct PlotOptions {
  std::string title;
  // Plot mean_err of every other predictor divided by this predictor's.
  std::optional<std::string> ratio_baseline;
  int width = 720;
  int height = 480;
};

// One series per predictor (per preset/predictor pair when several presets
// share the CSV): polyline with a shaded +-stderr band, or a single marker
// for one-point series.
std::string render_svg(const std::vector<CurveRow>& rows, const PlotOptions& options);

}  // namespace mop
