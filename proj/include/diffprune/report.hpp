#pragma once

// CSV artifacts and their SVG renders. Numbers are written in shortest
// round-trip form, so a CSV read back reproduces the doubles exactly.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diffprune/error.hpp"
#include "diffprune/io.hpp"

namespace diffprune {

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(std::string_view name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("csv has no column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string encode_csv(const Csv& csv) {
  std::string out;
  for (std::size_t c = 0; c < csv.header.size(); ++c) out += (c ? "," : "") + csv.header[c];
  out += '\n';
  for (const auto& row : csv.rows) {
    if (row.size() != csv.header.size()) throw ShapeError("csv row width does not match header");
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + format_double(row[c]);
    out += '\n';
  }
  return out;
}

inline double parse_cell(std::string_view s, std::size_t line) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("csv line " + std::to_string(line) + ": not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Parses a header line and numeric rows. Blank lines are skipped.
inline Csv decode_csv(std::string_view text) {
  Csv csv;
  std::size_t line_no = 0;
  bool have_header = false;
  while (!text.empty()) {
    auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto cells = split_commas(line);
    if (!have_header) {
      for (auto c : cells) csv.header.emplace_back(c);
      have_header = true;
      continue;
    }
    if (cells.size() != csv.header.size()) {
      throw ConfigError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(csv.header.size()) +
                        " fields, got " + std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (auto c : cells) row.push_back(parse_cell(c, line_no));
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

inline Csv read_csv(const std::filesystem::path& path) { return decode_csv(read_file(path)); }

inline void write_csv(const std::filesystem::path& path, const Csv& csv) { write_file_atomic(path, encode_csv(csv)); }

// ---------------------------------------------------------------------------
// SVG

enum class PlotKind { curve, heatmap };

inline PlotKind parse_plot_kind(std::string_view s) {
  if (s == "curve") return PlotKind::curve;
  if (s == "heatmap") return PlotKind::heatmap;
  throw ConfigError("unknown plot kind '" + std::string(s) + "' (expected curve or heatmap)");
}

namespace detail {

inline std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Five viridis stops, linearly interpolated.
inline std::string colormap(double t) {
  static constexpr double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(static_cast<int>(t), 3);
  const double f = t - i;
  char buf[16];
  int rgb[3];
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<int>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

constexpr double kWidth = 480, kHeight = 400, kLeft = 60, kRight = 20, kTop = 30, kBottom = 50;

inline std::string svg_open(std::string_view title) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kWidth, 0) + "\" height=\"" +
                  fmt(kHeight, 0) + "\" viewBox=\"0 0 " + fmt(kWidth, 0) + " " + fmt(kHeight, 0) + "\">\n";
  s += "<text x=\"" + fmt(kWidth / 2, 1) + "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"13\">" + xml_escape(title) + "</text>\n";
  return s;
}

inline std::string axes(std::string_view xlabel, std::string_view ylabel, double x0, double x1, double y0,
                        double y1) {
  const double px0 = kLeft, px1 = kWidth - kRight, py0 = kHeight - kBottom, py1 = kTop;
  std::string s;
  s += "<line x1=\"" + fmt(px0) + "\" y1=\"" + fmt(py0) + "\" x2=\"" + fmt(px1) + "\" y2=\"" + fmt(py0) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(px0) + "\" y1=\"" + fmt(py0) + "\" x2=\"" + fmt(px0) + "\" y2=\"" + fmt(py1) +
       "\" stroke=\"black\"/>\n";
  const std::string text = "<text font-family=\"sans-serif\" font-size=\"11\" ";
  s += text + "x=\"" + fmt(px0) + "\" y=\"" + fmt(py0 + 15) + "\" text-anchor=\"middle\">" + fmt_g(x0) + "</text>\n";
  s += text + "x=\"" + fmt(px1) + "\" y=\"" + fmt(py0 + 15) + "\" text-anchor=\"middle\">" + fmt_g(x1) + "</text>\n";
  s += text + "x=\"" + fmt(px0 - 4) + "\" y=\"" + fmt(py0) + "\" text-anchor=\"end\">" + fmt_g(y0) + "</text>\n";
  s += text + "x=\"" + fmt(px0 - 4) + "\" y=\"" + fmt(py1 + 8) + "\" text-anchor=\"end\">" + fmt_g(y1) + "</text>\n";
  s += text + "x=\"" + fmt((px0 + px1) / 2) + "\" y=\"" + fmt(kHeight - 12) + "\" text-anchor=\"middle\">" +
       xml_escape(xlabel) + "</text>\n";
  s += text + "x=\"14\" y=\"" + fmt((py0 + py1) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       fmt((py0 + py1) / 2) + ")\">" + xml_escape(ylabel) + "</text>\n";
  return s;
}

}  // namespace detail

/// Heatmap of a slice CSV with columns beta1, beta2, loss on a full square
/// grid. One rect per cell; non-finite cells are grey.
inline std::string render_heatmap(const Csv& csv, std::string_view title = "loss slice") {
  if (csv.rows.empty()) throw ConfigError("heatmap: csv has no rows");
  if (csv.header != std::vector<std::string>{"beta1", "beta2", "loss"}) {
    throw ConfigError("heatmap: expected columns beta1,beta2,loss");
  }
  std::vector<double> b1, b2;
  for (const auto& r : csv.rows) {
    b1.push_back(r[0]);
    b2.push_back(r[1]);
  }
  auto uniq = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  b1 = uniq(b1);
  b2 = uniq(b2);
  if (b1.size() * b2.size() != csv.rows.size()) throw ConfigError("heatmap: rows do not form a complete grid");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : csv.rows) {
    if (std::isfinite(r[2])) {
      lo = std::min(lo, r[2]);
      hi = std::max(hi, r[2]);
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  const double pw = detail::kWidth - detail::kLeft - detail::kRight;
  const double ph = detail::kHeight - detail::kTop - detail::kBottom;
  const double cw = pw / static_cast<double>(b2.size());
  const double ch = ph / static_cast<double>(b1.size());

  std::string s = detail::svg_open(title);
  for (const auto& r : csv.rows) {
    const auto i = static_cast<double>(std::lower_bound(b1.begin(), b1.end(), r[0]) - b1.begin());
    const auto j = static_cast<double>(std::lower_bound(b2.begin(), b2.end(), r[1]) - b2.begin());
    const std::string fill = std::isfinite(r[2]) ? detail::colormap((r[2] - lo) / span) : "#999999";
    // beta2 runs left to right, beta1 bottom to top
    s += "<rect x=\"" + detail::fmt(detail::kLeft + j * cw) + "\" y=\"" +
         detail::fmt(detail::kTop + (static_cast<double>(b1.size()) - 1 - i) * ch) + "\" width=\"" +
         detail::fmt(cw) + "\" height=\"" + detail::fmt(ch) + "\" fill=\"" + fill + "\"/>\n";
  }
  s += detail::axes("beta2", "beta1", b2.front(), b2.back(), b1.front(), b1.back());
  s += "</svg>\n";
  return s;
}

/// Line plot of column `y` against the first column. Non-finite points
/// break the line.
inline std::string render_curve(const Csv& csv, std::string_view y = {}, std::string_view title = {}) {
  if (csv.rows.empty()) throw ConfigError("curve: csv has no rows");
  if (csv.header.size() < 2) throw ConfigError("curve: need at least two columns");
  const std::size_t yc = y.empty() ? 1 : csv.column(y);
  if (yc == 0) throw ConfigError("curve: y column must differ from the x column");

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& r : csv.rows) {
    if (!std::isfinite(r[0]) || !std::isfinite(r[yc])) continue;
    x0 = std::min(x0, r[0]);
    x1 = std::max(x1, r[0]);
    y0 = std::min(y0, r[yc]);
    y1 = std::max(y1, r[yc]);
  }
  if (!std::isfinite(x0)) throw ConfigError("curve: no finite points");
  const double xs = x1 > x0 ? x1 - x0 : 1.0;
  const double ys = y1 > y0 ? y1 - y0 : 1.0;
  const double pw = detail::kWidth - detail::kLeft - detail::kRight;
  const double ph = detail::kHeight - detail::kTop - detail::kBottom;

  std::string s = detail::svg_open(title.empty() ? csv.header[yc] + " vs " + csv.header[0] : std::string(title));
  std::string pts;
  auto flush = [&] {
    if (!pts.empty()) s += "<polyline fill=\"none\" stroke=\"#3b528b\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    pts.clear();
  };
  for (const auto& r : csv.rows) {
    if (!std::isfinite(r[0]) || !std::isfinite(r[yc])) {
      flush();
      continue;
    }
    const double px = detail::kLeft + (r[0] - x0) / xs * pw;
    const double py = detail::kTop + ph - (r[yc] - y0) / ys * ph;
    pts += (pts.empty() ? "" : " ") + detail::fmt(px) + "," + detail::fmt(py);
  }
  flush();
  s += detail::axes(csv.header[0], csv.header[yc], x0, x1, y0, y1);
  s += "</svg>\n";
  return s;
}

/// Reads `csv_path`, renders it and writes `svg_path`. Nothing is written
/// when the CSV is empty or has the wrong schema.
inline void render_svg(const std::filesystem::path& csv_path, PlotKind kind, const std::filesystem::path& svg_path,
                       std::string_view y_column = {}) {
  const Csv csv = read_csv(csv_path);
  const std::string svg =
      kind == PlotKind::heatmap ? render_heatmap(csv, csv_path.filename().string()) : render_curve(csv, y_column);
  write_file_atomic(svg_path, svg);
}

}  // namespace diffprune
