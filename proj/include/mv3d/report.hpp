// CSV and SVG emission. Output is deterministic: doubles print with %.17g in
// CSV and %.3f for SVG coordinates, charts use fixed canvas geometry and
// fixed axis ranges so reruns diff clean.
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mv3d {

inline std::string csv_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_text_file: cannot open " + path);
  os << content;
  if (!os) throw std::runtime_error("write_text_file: write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_text_file: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Series {
  std::string name;
  std::vector<double> y;
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

inline const char* series_color(size_t i) {
  static const char* colors[] = {"#1f6fb4", "#d1495b", "#3a923a", "#8a5fb0", "#c77f2e"};
  return colors[i % 5];
}

}  // namespace detail

// Line chart with fixed 640x420 canvas. y_min/y_max pin the axis range.
inline std::string line_chart_svg(const std::string& title, const std::string& x_label,
                                  const std::string& y_label, const std::vector<double>& x,
                                  const std::vector<Series>& series, double y_min, double y_max) {
  const double w = 640, h = 420, ml = 64, mr = 24, mt = 40, mb = 48;
  const double pw = w - ml - mr, ph = h - mt - mb;
  double x_min = x.empty() ? 0 : x.front();
  double x_max = x.empty() ? 1 : x.back();
  if (x_max == x_min) x_max = x_min + 1;
  auto px = [&](double v) { return ml + (v - x_min) / (x_max - x_min) * pw; };
  auto py = [&](double v) { return mt + (1.0 - (v - y_min) / (y_max - y_min)) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
       "viewBox=\"0 0 640 420\">\n";
  s << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  s << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  // axes
  s << "<line x1=\"" << detail::svg_num(ml) << "\" y1=\"" << detail::svg_num(mt) << "\" x2=\""
    << detail::svg_num(ml) << "\" y2=\"" << detail::svg_num(mt + ph) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << detail::svg_num(ml) << "\" y1=\"" << detail::svg_num(mt + ph) << "\" x2=\""
    << detail::svg_num(ml + pw) << "\" y2=\"" << detail::svg_num(mt + ph)
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double frac = i / 4.0;
    double yv = y_min + frac * (y_max - y_min);
    double yy = py(yv);
    s << "<line x1=\"" << detail::svg_num(ml - 4) << "\" y1=\"" << detail::svg_num(yy) << "\" x2=\""
      << detail::svg_num(ml) << "\" y2=\"" << detail::svg_num(yy) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << detail::svg_num(ml - 8) << "\" y=\"" << detail::svg_num(yy + 4)
      << "\" text-anchor=\"end\" font-size=\"11\">" << detail::svg_num(yv) << "</text>\n";
  }
  for (size_t i = 0; i < x.size(); ++i) {
    double xx = px(x[i]);
    s << "<line x1=\"" << detail::svg_num(xx) << "\" y1=\"" << detail::svg_num(mt + ph) << "\" x2=\""
      << detail::svg_num(xx) << "\" y2=\"" << detail::svg_num(mt + ph + 4)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << detail::svg_num(xx) << "\" y=\"" << detail::svg_num(mt + ph + 18)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::svg_num(x[i]) << "</text>\n";
  }
  s << "<text x=\"" << detail::svg_num(ml + pw / 2) << "\" y=\"" << detail::svg_num(h - 10)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  s << "<text x=\"16\" y=\"" << detail::svg_num(mt + ph / 2)
    << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << detail::svg_num(mt + ph / 2) << ")\">" << y_label << "</text>\n";
  for (size_t si = 0; si < series.size(); ++si) {
    s << "<polyline fill=\"none\" stroke=\"" << detail::series_color(si)
      << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < x.size() && i < series[si].y.size(); ++i)
      s << detail::svg_num(px(x[i])) << "," << detail::svg_num(py(series[si].y[i])) << " ";
    s << "\"/>\n";
    double ly = mt + 14 + 16 * static_cast<double>(si);
    s << "<rect x=\"" << detail::svg_num(ml + pw - 130) << "\" y=\"" << detail::svg_num(ly - 9)
      << "\" width=\"10\" height=\"10\" fill=\"" << detail::series_color(si) << "\"/>\n";
    s << "<text x=\"" << detail::svg_num(ml + pw - 114) << "\" y=\"" << detail::svg_num(ly)
      << "\" font-size=\"11\">" << series[si].name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// Bar chart with one bar per label, fixed canvas and axis range.
inline std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                                 const std::vector<std::string>& labels,
                                 const std::vector<double>& values, double y_min, double y_max) {
  const double w = 640, h = 420, ml = 64, mr = 24, mt = 40, mb = 48;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto py = [&](double v) { return mt + (1.0 - (v - y_min) / (y_max - y_min)) * ph; };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
       "viewBox=\"0 0 640 420\">\n";
  s << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  s << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  s << "<line x1=\"" << detail::svg_num(ml) << "\" y1=\"" << detail::svg_num(mt) << "\" x2=\""
    << detail::svg_num(ml) << "\" y2=\"" << detail::svg_num(mt + ph) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << detail::svg_num(ml) << "\" y1=\"" << detail::svg_num(mt + ph) << "\" x2=\""
    << detail::svg_num(ml + pw) << "\" y2=\"" << detail::svg_num(mt + ph)
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double yv = y_min + i / 4.0 * (y_max - y_min);
    s << "<text x=\"" << detail::svg_num(ml - 8) << "\" y=\"" << detail::svg_num(py(yv) + 4)
      << "\" text-anchor=\"end\" font-size=\"11\">" << detail::svg_num(yv) << "</text>\n";
  }
  double slot = pw / std::max<size_t>(1, labels.size());
  for (size_t i = 0; i < labels.size() && i < values.size(); ++i) {
    double x0 = ml + slot * static_cast<double>(i) + slot * 0.2;
    double bw = slot * 0.6;
    double y0 = py(values[i]);
    s << "<rect x=\"" << detail::svg_num(x0) << "\" y=\"" << detail::svg_num(y0) << "\" width=\""
      << detail::svg_num(bw) << "\" height=\"" << detail::svg_num(mt + ph - y0)
      << "\" fill=\"#1f6fb4\"/>\n";
    s << "<text x=\"" << detail::svg_num(x0 + bw / 2) << "\" y=\"" << detail::svg_num(mt + ph + 18)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << labels[i] << "</text>\n";
  }
  s << "<text x=\"16\" y=\"" << detail::svg_num(mt + ph / 2)
    << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << detail::svg_num(mt + ph / 2) << ")\">" << y_label << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace mv3d
