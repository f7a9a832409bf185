#include "mop/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mop {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

struct Point {
  double t = 0.0;
  double y = 0.0;
  double err = 0.0;
};

struct Series {
  std::string label;
  std::vector<Point> points;
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double nice_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f < 1.5 ? 1.0 : f < 3.5 ? 2.0 : f < 7.5 ? 5.0 : 10.0) * mag;
}

std::vector<Series> build_series(const std::vector<CurveRow>& rows) {
  std::set<std::string> presets;
  for (const auto& r : rows) presets.insert(r.preset);
  const bool tag_preset = presets.size() > 1;
  std::vector<Series> series;
  std::map<std::string, std::size_t> index;
  for (const auto& r : rows) {
    const std::string label = tag_preset ? r.predictor + " (" + r.preset + ")" : r.predictor;
    auto [it, inserted] = index.emplace(label, series.size());
    if (inserted) series.push_back({label, {}});
    series[it->second].points.push_back({static_cast<double>(r.t), r.mean_err, r.stderr_});
  }
  for (auto& s : series) {
    std::stable_sort(s.points.begin(), s.points.end(),
                     [](const Point& a, const Point& b) { return a.t < b.t; });
  }
  return series;
}

std::vector<Series> ratio_series(const std::vector<Series>& all, const std::string& baseline) {
  const Series* base = nullptr;
  for (const auto& s : all) {
    if (s.label == baseline) base = &s;
  }
  if (!base) {
    throw std::invalid_argument("ratio baseline '" + baseline + "' not found in the CSV");
  }
  std::map<double, Point> by_t;
  for (const auto& p : base->points) by_t[p.t] = p;
  std::vector<Series> out;
  for (const auto& s : all) {
    if (&s == base) continue;
    Series r{s.label + " / " + baseline, {}};
    for (const auto& p : s.points) {
      const auto it = by_t.find(p.t);
      if (it == by_t.end() || it->second.y < 1e-12) continue;
      const double b = it->second.y;
      const double ratio = p.y / b;
      const double err = std::hypot(p.err / b, p.y * it->second.err / (b * b));
      r.points.push_back({p.t, ratio, err});
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::string render_svg(const std::vector<CurveRow>& rows, const PlotOptions& options) {
  if (rows.empty()) {
    throw std::invalid_argument("no data rows to plot");
  }
  std::vector<Series> series = build_series(rows);
  std::string y_label = "mean ‖ŷ_t − y_t‖";
  if (options.ratio_baseline) {
    series = ratio_series(series, *options.ratio_baseline);
    y_label = "error ratio vs " + *options.ratio_baseline;
  }

  double tmin = 1e300, tmax = -1e300, ymin = 0.0, ymax = -1e300;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      tmin = std::min(tmin, p.t);
      tmax = std::max(tmax, p.t);
      ymin = std::min(ymin, p.y - p.err);
      ymax = std::max(ymax, p.y + p.err);
    }
  }
  if (tmin > tmax) {
    tmin = 0.0;
    tmax = 1.0;
    ymax = 1.0;
  }
  if (tmax - tmin < 1e-12) {
    tmin -= 1.0;
    tmax += 1.0;
  }
  if (ymax - ymin < 1e-12) {
    ymax = ymin + 1.0;
  }
  ymax += 0.05 * (ymax - ymin);

  const double left = 70, right = 170, top = 40, bottom = 55;
  const double W = options.width, H = options.height;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double t) { return left + (t - tmin) / (tmax - tmin) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width << "\" height=\""
     << options.height << "\" viewBox=\"0 0 " << options.width << ' ' << options.height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << options.width << "\" height=\"" << options.height
     << "\" fill=\"white\"/>\n";
  if (!options.title.empty()) {
    os << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(options.title) << "</text>\n";
  }

  os << "<g stroke=\"#cccccc\" stroke-width=\"0.5\">\n";
  const double ystep = nice_step(ymax - ymin);
  for (double y = std::ceil(ymin / ystep) * ystep; y <= ymax + 1e-12; y += ystep) {
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(sy(y)) << "\" x2=\"" << num(left + pw)
       << "\" y2=\"" << num(sy(y)) << "\"/>\n";
  }
  os << "</g>\n";
  os << "<g font-size=\"11\">\n";
  for (double y = std::ceil(ymin / ystep) * ystep; y <= ymax + 1e-12; y += ystep) {
    os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(sy(y) + 4)
       << "\" text-anchor=\"end\">" << tick_label(std::abs(y) < 1e-12 ? 0.0 : y) << "</text>\n";
  }
  const double tstep = std::max(1.0, nice_step(tmax - tmin));
  for (double t = std::ceil(tmin / tstep) * tstep; t <= tmax + 1e-12; t += tstep) {
    os << "<text x=\"" << num(sx(t)) << "\" y=\"" << num(top + ph + 16)
       << "\" text-anchor=\"middle\">" << tick_label(t) << "</text>\n";
  }
  os << "</g>\n";
  os << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw)
     << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(H - 14)
     << "\" text-anchor=\"middle\">t</text>\n";
  os << "<text x=\"18\" y=\"" << num(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << num(top + ph / 2) << ")\">" << escape(y_label) << "</text>\n";
  if (options.ratio_baseline && ymin <= 1.0 && 1.0 <= ymax) {
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(sy(1.0)) << "\" x2=\"" << num(left + pw)
       << "\" y2=\"" << num(sy(1.0)) << "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
  }

  for (std::size_t i = 0; i < series.size(); ++i) {
    const Series& s = series[i];
    const char* color = kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
    if (s.points.size() == 1) {
      const Point& p = s.points[0];
      os << "<line x1=\"" << num(sx(p.t)) << "\" y1=\"" << num(sy(p.y - p.err)) << "\" x2=\""
         << num(sx(p.t)) << "\" y2=\"" << num(sy(p.y + p.err)) << "\" stroke=\"" << color
         << "\"/>\n";
      os << "<circle cx=\"" << num(sx(p.t)) << "\" cy=\"" << num(sy(p.y)) << "\" r=\"4\" fill=\""
         << color << "\"/>\n";
    } else if (s.points.size() > 1) {
      os << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (const auto& p : s.points) os << num(sx(p.t)) << ',' << num(sy(p.y + p.err)) << ' ';
      for (auto it = s.points.rbegin(); it != s.points.rend(); ++it) {
        os << num(sx(it->t)) << ',' << num(sy(it->y - it->err)) << ' ';
      }
      os << "\"/>\n";
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
      for (const auto& p : s.points) os << num(sx(p.t)) << ',' << num(sy(p.y)) << ' ';
      os << "\"/>\n";
    }
  }

  os << "<g class=\"legend\">\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
    const double y = top + 14 + 20.0 * static_cast<double>(i);
    os << "<rect x=\"" << num(left + pw + 14) << "\" y=\"" << num(y - 9) << "\" width=\"18\" height=\"10\" fill=\""
       << color << "\"/>\n";
    os << "<text x=\"" << num(left + pw + 38) << "\" y=\"" << num(y) << "\">"
       << escape(series[i].label) << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

}  // namespace mop
