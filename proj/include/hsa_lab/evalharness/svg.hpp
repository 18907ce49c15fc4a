#pragma once

// Minimal self-contained SVG figures: accuracy-vs-length lines and
// length x depth heatmaps, with a dashed line at the training-context
// boundary.

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "hsa_lab/evalharness/niah.hpp"

namespace hsa_lab {

struct LineSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // NaN points are skipped
};

namespace detail {

inline std::string fmt(double v, int prec = 1) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

}  // namespace detail

/// Lines over a log2 x axis, y in [0, 1]. boundary_x > 0 draws the
/// in-domain / out-of-domain separator.
inline std::string svg_lines(const std::string& title, const std::vector<LineSeries>& series, double boundary_x = 0,
                             const std::string& x_label = "context length", const std::string& y_label = "accuracy") {
  const double W = 640, H = 400, l = 60, r = 150, t = 40, b = 50;
  double xmin = INFINITY, xmax = -INFINITY;
  for (const auto& s : series) {
    for (double x : s.x) {
      xmin = std::min(xmin, std::log2(x));
      xmax = std::max(xmax, std::log2(x));
    }
  }
  if (!(xmax > xmin)) {
    xmin -= 1;
    xmax += 1;
  }
  auto px = [&](double x) { return l + (std::log2(x) - xmin) / (xmax - xmin) * (W - l - r); };
  auto py = [&](double y) { return H - b - y * (H - t - b); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << detail::esc(title) << "</text>\n";
  o << "<line x1=\"" << l << "\" y1=\"" << H - b << "\" x2=\"" << W - r << "\" y2=\"" << H - b << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << l << "\" y1=\"" << t << "\" x2=\"" << l << "\" y2=\"" << H - b << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    o << "<text x=\"" << l - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << detail::fmt(y, 2) << "</text>\n";
    o << "<line x1=\"" << l << "\" y1=\"" << py(y) << "\" x2=\"" << W - r << "\" y2=\"" << py(y) << "\" stroke=\"#ddd\"/>\n";
  }
  for (double e = std::ceil(xmin); e <= xmax + 1e-9; e += 1) {
    const double x = std::exp2(e);
    o << "<text x=\"" << px(x) << "\" y=\"" << H - b + 16 << "\" text-anchor=\"middle\">" << detail::fmt(x, 0) << "</text>\n";
  }
  o << "<text x=\"" << (l + W - r) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << detail::esc(x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (t + H - b) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (t + H - b) / 2
    << ")\">" << detail::esc(y_label) << "</text>\n";
  if (boundary_x > 0) {
    o << "<line x1=\"" << px(boundary_x) << "\" y1=\"" << t << "\" x2=\"" << px(boundary_x) << "\" y2=\"" << H - b
      << "\" stroke=\"red\" stroke-dasharray=\"6,4\"/>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    std::string path;
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (std::isnan(s.y[k])) continue;
      path += (path.empty() ? "M" : " L") + detail::fmt(px(s.x[k])) + "," + detail::fmt(py(s.y[k]));
      o << "<circle cx=\"" << detail::fmt(px(s.x[k])) << "\" cy=\"" << detail::fmt(py(s.y[k])) << "\" r=\"3\" fill=\""
        << detail::palette(i) << "\"/>\n";
    }
    o << "<path d=\"" << path << "\" fill=\"none\" stroke=\"" << detail::palette(i) << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - r + 10 << "\" y=\"" << t + 16 * (i + 1) << "\" fill=\"" << detail::palette(i) << "\">"
      << detail::esc(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Heatmap of one grid: columns are lengths, rows are depths.
inline std::string svg_heatmap(const AccuracyGrid& g, const std::string& title) {
  const double cell = 48, l = 70, t = 40;
  const double W = l + cell * static_cast<double>(g.lengths.size()) + 20;
  const double H = t + cell * static_cast<double>(g.depths.size()) + 50;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << detail::esc(title) << "</text>\n";
  for (std::size_t li = 0; li < g.lengths.size(); ++li) {
    const double x = l + cell * static_cast<double>(li);
    for (std::size_t di = 0; di < g.depths.size(); ++di) {
      const double y = t + cell * static_cast<double>(di);
      std::string fill = "#cccccc", label = "skip";
      if (!g.skipped[li][di]) {
        const double a = g.accuracy[li][di];
        const int red = static_cast<int>(std::lround(255 * (1 - a))), green = static_cast<int>(std::lround(200 * a));
        char buf[16];
        std::snprintf(buf, sizeof buf, "#%02x%02x60", red, green);
        fill = buf;
        label = detail::fmt(a, 2);
      }
      o << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"" << fill
        << "\" stroke=\"white\"/>\n";
      o << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\">" << label << "</text>\n";
    }
    o << "<text x=\"" << x + cell / 2 << "\" y=\"" << t + cell * static_cast<double>(g.depths.size()) + 16
      << "\" text-anchor=\"middle\">" << g.lengths[li] << "</text>\n";
  }
  for (std::size_t di = 0; di < g.depths.size(); ++di) {
    o << "<text x=\"" << l - 6 << "\" y=\"" << t + cell * static_cast<double>(di) + cell / 2 + 4 << "\" text-anchor=\"end\">depth "
      << detail::fmt(g.depths[di], 2) << "</text>\n";
  }
  for (std::size_t li = 0; li + 1 < g.lengths.size(); ++li) {
    if (g.lengths[li] <= g.in_domain_boundary && g.lengths[li + 1] > g.in_domain_boundary) {
      const double x = l + cell * static_cast<double>(li + 1);
      o << "<line x1=\"" << x << "\" y1=\"" << t - 6 << "\" x2=\"" << x << "\" y2=\"" << t + cell * static_cast<double>(g.depths.size()) + 4
        << "\" stroke=\"red\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n";
    }
  }
  o << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">context length</text>\n";
  o << "</svg>\n";
  return o.str();
}

}  // namespace hsa_lab
