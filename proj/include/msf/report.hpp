#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msf/bench.hpp"
#include "msf/flops.hpp"
#include "msf/metrics.hpp"

namespace msf {

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::optional<LatencyReport> latency;
  std::string config_echo;  // serialized config the numbers belong to
};

namespace detail {

inline std::string fmt_full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline nlohmann::json report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["miou"] = r.miou;
  j["per_class_iou"] = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) {
    if (v) {
      j["per_class_iou"].push_back(*v);
    } else {
      j["per_class_iou"].push_back(nullptr);
    }
  }
  j["macs"] = r.macs;
  j["flops"] = r.flops;
  if (r.latency) {
    j["latency"]["mean_ms"] = r.latency->mean_ms;
    j["latency"]["median_ms"] = r.latency->median_ms;
    j["latency"]["p95_ms"] = r.latency->p95_ms;
    j["latency"]["fps"] = r.latency->fps;
    j["latency"]["runs"] = r.latency->runs;
    j["latency"]["samples_ms"] = r.latency->samples_ms;
  }
  j["config"] = r.config_echo;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.miou = j.at("miou").get<double>();
  for (const auto& v : j.at("per_class_iou")) {
    if (v.is_null()) {
      r.per_class_iou.push_back(std::nullopt);
    } else {
      r.per_class_iou.push_back(v.get<double>());
    }
  }
  r.macs = j.at("macs").get<std::uint64_t>();
  r.flops = j.at("flops").get<std::uint64_t>();
  if (j.contains("latency")) {
    LatencyReport lat;
    lat.mean_ms = j["latency"].at("mean_ms").get<double>();
    lat.median_ms = j["latency"].at("median_ms").get<double>();
    lat.p95_ms = j["latency"].at("p95_ms").get<double>();
    lat.fps = j["latency"].at("fps").get<double>();
    lat.runs = j["latency"].at("runs").get<std::int64_t>();
    lat.samples_ms = j["latency"].at("samples_ms").get<std::vector<double>>();
    r.latency = lat;
  }
  r.config_echo = j.at("config").get<std::string>();
  return r;
}

// One row per class plus one summary row: K + 1 rows, no header.
inline std::string report_csv(const MetricsReport& r) {
  std::string out;
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    out += "iou_class_" + std::to_string(c) + ",";
    out += r.per_class_iou[c] ? detail::fmt_full(*r.per_class_iou[c]) : std::string("unscored");
    out += "\n";
  }
  out += "miou," + detail::fmt_full(r.miou) + "\n";
  return out;
}

namespace detail {

inline std::string svg_rect(double x, double y, double w, double h, const std::string& fill) {
  std::ostringstream os;
  os << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
     << "\" fill=\"" << fill << "\"/>\n";
  return os.str();
}

inline std::string svg_text(double x, double y, const std::string& text, int size = 12) {
  std::ostringstream os;
  os << "  <text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
     << "\" font-family=\"monospace\">" << text << "</text>\n";
  return os.str();
}

}  // namespace detail

// Bar chart of per-class IoU; a latency histogram below it when samples are
// present. Kept to plain shapes so any XML parser can validate it.
inline std::string report_svg(const MetricsReport& r) {
  const double bar_w = 28, gap = 8, chart_h = 160, left = 50, top = 30;
  const auto k = static_cast<double>(r.per_class_iou.size());
  const double width = std::max(360.0, left + k * (bar_w + gap) + 40);
  const bool has_latency = r.latency && !r.latency->samples_ms.empty();
  const double height = has_latency ? 2 * (chart_h + 90) : chart_h + 90;

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\">\n";
  os << detail::svg_text(left, top - 10, "per-class IoU (mIoU " + detail::fmt_full(r.miou) + ")",
                         13);
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    const double x = left + static_cast<double>(c) * (bar_w + gap);
    const double v = r.per_class_iou[c].value_or(0.0);
    const double h = v * chart_h;
    os << detail::svg_rect(x, top + chart_h - h, bar_w, h,
                           r.per_class_iou[c] ? "#4878a8" : "#cccccc");
    os << detail::svg_text(x, top + chart_h + 16, std::to_string(c));
  }

  if (has_latency) {
    const double base = top + chart_h + 70;
    os << detail::svg_text(left, base - 10,
                           "latency histogram, mean " + detail::fmt_full(r.latency->mean_ms) +
                               " ms (" + detail::fmt_full(r.latency->fps) + " fps)",
                           13);
    const auto& s = r.latency->samples_ms;
    const double lo = *std::min_element(s.begin(), s.end());
    const double hi = *std::max_element(s.begin(), s.end());
    const int bins = 20;
    std::vector<int> counts(bins, 0);
    for (double v : s) {
      int b = hi > lo ? static_cast<int>((v - lo) / (hi - lo) * bins) : 0;
      if (b == bins) b = bins - 1;
      ++counts[b];
    }
    const int peak = *std::max_element(counts.begin(), counts.end());
    const double bw = (width - left - 40) / bins;
    for (int b = 0; b < bins; ++b) {
      const double h = peak > 0 ? static_cast<double>(counts[b]) / peak * chart_h : 0;
      os << detail::svg_rect(left + b * bw, base + chart_h - h, bw - 1, h, "#a85048");
    }
  }
  os << "</svg>\n";
  return os.str();
}

enum class ReportFormat { Json, Csv, Svg };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "svg") return ReportFormat::Svg;
  throw config_error("unknown report format '" + s + "' (expected json, csv, or svg)");
}

inline void emit_report(const MetricsReport& r, ReportFormat format,
                        const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("emit_report: cannot write '" + path.string() + "'");
  switch (format) {
    case ReportFormat::Json:
      f << report_json(r).dump(2) << "\n";
      break;
    case ReportFormat::Csv:
      f << report_csv(r);
      break;
    case ReportFormat::Svg:
      f << report_svg(r);
      break;
  }
  if (!f.good()) throw io_error("emit_report: write to '" + path.string() + "' failed");
}

}  // namespace msf
