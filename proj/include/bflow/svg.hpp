// Minimal SVG output: line plots with several series, and heatmaps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bflow/core.hpp"

namespace bflow::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool markers = false;
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

struct Frame {
  double w = 640, h = 420, left = 70, right = 20, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  double px(double x) const { return left + (x - x0) / (x1 - x0) * (w - left - right); }
  double py(double y) const { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); }
};

inline void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xl,
                 const std::string& yl) {
  os << "<rect x='" << f.left << "' y='" << f.top << "' width='" << f.w - f.left - f.right << "' height='"
     << f.h - f.top - f.bottom << "' fill='none' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x='" << f.px(xv) << "' y='" << f.h - f.bottom + 16 << "' font-size='11' text-anchor='middle'>"
       << num(xv) << "</text>\n";
    os << "<text x='" << f.left - 6 << "' y='" << f.py(yv) + 4 << "' font-size='11' text-anchor='end'>" << num(yv)
       << "</text>\n";
  }
  os << "<text x='" << f.w / 2 << "' y='22' font-size='14' text-anchor='middle'>" << escape(title) << "</text>\n";
  os << "<text x='" << (f.left + f.w - f.right) / 2 << "' y='" << f.h - 12
     << "' font-size='12' text-anchor='middle'>" << escape(xl) << "</text>\n";
  os << "<text x='16' y='" << (f.top + f.h - f.bottom) / 2 << "' font-size='12' text-anchor='middle' transform='rotate(-90 16 "
     << (f.top + f.h - f.bottom) / 2 << ")'>" << escape(yl) << "</text>\n";
}

inline void write(const std::string& path, const std::string& body, double w, double h) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ArtifactError("cannot open for writing: " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n"
     << "<rect width='100%' height='100%' fill='white'/>\n"
     << body << "</svg>\n";
}

}  // namespace detail

inline void line_plot(const std::string& path, const std::string& title, const std::string& xlabel,
                      const std::string& ylabel, const std::vector<Series>& series) {
  detail::Frame f;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeError("line_plot: x and y differ in length");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!(xmin <= xmax)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pad = 0.05 * (ymax - ymin);
  f.x0 = xmin, f.x1 = xmax, f.y0 = ymin - pad, f.y1 = ymax + pad;
  std::ostringstream os;
  detail::axes(os, f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* c = detail::palette(k);
    os << "<polyline fill='none' stroke='" << c << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    os << "'/>\n";
    if (s.markers)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        if (std::isfinite(s.y[i]))
          os << "<circle cx='" << f.px(s.x[i]) << "' cy='" << f.py(s.y[i]) << "' r='2.5' fill='" << c << "'/>\n";
    os << "<text x='" << f.w - f.right - 8 << "' y='" << f.top + 16 + 15 * static_cast<double>(k)
       << "' font-size='11' text-anchor='end' fill='" << c << "'>" << detail::escape(s.label) << "</text>\n";
  }
  detail::write(path, os.str(), f.w, f.h);
}

/// Row-major values (ny rows of nx cells), first row at y0.
inline void heatmap(const std::string& path, const std::string& title, const std::string& xlabel,
                    const std::string& ylabel, std::span<const double> values, std::size_t nx, std::size_t ny, double x0,
                    double x1, double y0, double y1) {
  if (values.size() != nx * ny) throw ShapeError("heatmap: value count does not match grid");
  detail::Frame f;
  f.x0 = x0, f.x1 = x1, f.y0 = y0, f.y1 = y1;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values)
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!(lo < hi)) hi = lo + 1;
  std::ostringstream os;
  const double cw = (f.px(x1) - f.px(x0)) / static_cast<double>(nx);
  const double ch = (f.py(y0) - f.py(y1)) / static_cast<double>(ny);
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const double v = values[j * nx + i];
      if (!std::isfinite(v)) continue;
      const double t = (v - lo) / (hi - lo);
      // blue -> white -> red
      const int r = static_cast<int>(t < 0.5 ? 255 * 2 * t : 255);
      const int g = static_cast<int>(t < 0.5 ? 255 * 2 * t : 255 * 2 * (1 - t));
      const int b = static_cast<int>(t < 0.5 ? 255 : 255 * 2 * (1 - t));
      os << "<rect x='" << f.px(x0) + static_cast<double>(i) * cw << "' y='"
         << f.py(y0) - static_cast<double>(j + 1) * ch << "' width='" << cw + 0.2 << "' height='" << ch + 0.2
         << "' fill='rgb(" << r << ',' << g << ',' << b << ")'/>\n";
    }
  detail::axes(os, f, title + " [" + detail::num(lo) + ", " + detail::num(hi) + "]", xlabel, ylabel);
  detail::write(path, os.str(), f.w, f.h);
}

}  // namespace bflow::svg
