#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "decfl/errors.hpp"
#include "decfl/harness.hpp"

namespace decfl {

namespace {

constexpr double kWidth = 860, kHeight = 520;
constexpr double kLeft = 90, kRight = 190, kTop = 46, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(const char* pattern, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

struct Axis {
  bool log = false;
  double lo = 0.0, hi = 1.0;

  double transform(double v) const { return log ? std::log10(v) : v; }
  double fraction(double v) const {
    const double a = transform(lo), b = transform(hi);
    return b == a ? 0.5 : (transform(v) - a) / (b - a);
  }

  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      const int a = static_cast<int>(std::floor(std::log10(lo)));
      const int b = static_cast<int>(std::ceil(std::log10(hi)));
      const int stride = std::max(1, (b - a + 7) / 8);
      const bool narrow = b - a <= 2;
      for (int e = a; e <= b; e += stride)
        for (double m : {1.0, 2.0, 5.0}) {
          if (m != 1.0 && !narrow) continue;
          const double t = m * std::pow(10.0, e);
          if (t >= lo * (1 - 1e-9) && t <= hi * (1 + 1e-9)) out.push_back(t);
        }
      if (out.size() >= 2) return out;
      out.clear();
    }
    const double span = hi - lo;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
      if (m * mag >= raw) {
        step = m * mag;
        break;
      }
    for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step)
      out.push_back(std::abs(t) < 1e-12 * span ? 0.0 : t);
    return out;
  }
};

/// Data range of the kept points. Log axes spanning more than two decades
/// snap to whole decades.
Axis fit_axis(const std::vector<const std::vector<double>*>& columns, bool log) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* col : columns)
    for (double v : *col) {
      if (!std::isfinite(v) || (log && v <= 0.0)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  Axis axis{log, lo, hi};
  if (!std::isfinite(lo)) axis = {log, log ? 1.0 : 0.0, log ? 10.0 : 1.0};
  if (log) {
    if (axis.hi / axis.lo > 100.0) {
      axis.lo = std::pow(10.0, std::floor(std::log10(axis.lo)));
      axis.hi = std::pow(10.0, std::ceil(std::log10(axis.hi)));
    } else {
      const double pad = std::pow(axis.hi / axis.lo, 0.05);
      axis.lo /= std::max(pad, 1.05);
      axis.hi *= std::max(pad, 1.05);
    }
  } else if (axis.hi <= axis.lo) {
    axis.lo -= 0.5;
    axis.hi += 0.5;
  }
  return axis;
}

std::string tick_label(double v, bool log) {
  if (log) {
    const int e = static_cast<int>(std::floor(std::log10(v) + 1e-9));
    const double m = v / std::pow(10.0, e);
    const std::string exp = "e" + std::to_string(e);
    for (double k : {1.0, 2.0, 5.0})
      if (std::abs(m - k) < 1e-9) return fmt("%.0f", k) + exp;
    return fmt("%.3g", v);
  }
  return fmt("%g", v);
}

}  // namespace

std::string render_svg(const PlotSpec& plot) {
  std::vector<const std::vector<double>*> xs, ys;
  for (const auto& s : plot.series) {
    xs.push_back(&s.x);
    ys.push_back(&s.y);
  }
  const Axis ax = fit_axis(xs, plot.log_x);
  const Axis ay = fit_axis(ys, plot.log_y);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  const auto px = [&](double v) { return kLeft + ax.fraction(v) * pw; };
  const auto py = [&](double v) { return kTop + (1.0 - ay.fraction(v)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
     << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
     << escape(plot.title) << "</text>\n";

  for (double t : ax.ticks()) {
    const double x = px(t);
    os << "<line x1=\"" << fmt("%.2f", x) << "\" y1=\"" << kTop << "\" x2=\"" << fmt("%.2f", x)
       << "\" y2=\"" << kTop + ph << "\" stroke=\"#e5e5e5\"/>\n";
    os << "<text x=\"" << fmt("%.2f", x) << "\" y=\"" << kTop + ph + 18
       << "\" text-anchor=\"middle\">" << tick_label(t, ax.log) << "</text>\n";
  }
  for (double t : ay.ticks()) {
    const double y = py(t);
    os << "<line x1=\"" << kLeft << "\" y1=\"" << fmt("%.2f", y) << "\" x2=\"" << kLeft + pw
       << "\" y2=\"" << fmt("%.2f", y) << "\" stroke=\"#e5e5e5\"/>\n";
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << fmt("%.2f", y + 4)
       << "\" text-anchor=\"end\">" << tick_label(t, ay.log) << "</text>\n";
  }
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 16
     << "\" text-anchor=\"middle\">" << escape(plot.x_label) << "</text>\n";
  os << "<text transform=\"translate(20," << kTop + ph / 2
     << ") rotate(-90)\" text-anchor=\"middle\">" << escape(plot.y_label) << "</text>\n";

  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const auto& s = plot.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      const double x = s.x[i], y = s.y[i];
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if ((ax.log && x <= 0.0) || (ay.log && y <= 0.0)) continue;
      os << fmt("%.2f", px(x)) << ',' << fmt("%.2f", py(y)) << ' ';
    }
    os << "\"/>\n";
    const double ly = kTop + 14 + 20.0 * k;
    os << "<line x1=\"" << kLeft + pw + 14 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 40
       << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 46 << "\" y=\"" << ly + 4 << "\">" << escape(s.label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_svg(const std::filesystem::path& path, const PlotSpec& plot) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << render_svg(plot);
}

}  // namespace decfl
