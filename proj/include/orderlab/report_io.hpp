#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orderlab/analysis.hpp"

namespace orderlab::analysis {

enum class ReportFormat { json, csv };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw std::invalid_argument("report: unknown format '" + s + "' (expected json or csv)");
}

namespace io_detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("report: cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("report: write failed for '" + path.string() + "'");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("report: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("report: bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

inline std::string perm_str(const std::vector<int>& pi) {
  std::string s;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (i) s += "|";
    s += std::to_string(pi[i]);
  }
  return s;
}

}  // namespace io_detail

// ---- JSON ------------------------------------------------------------------------

inline nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& row : r.cells) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : row) {
      cells.push_back({{"best", c.best}, {"worst", c.worst}, {"argbest", c.argbest}, {"argworst", c.argworst}});
    }
    samples.push_back({{"cells", cells}});
  }
  return {{"schema_version", r.schema_version}, {"kind", "sweep_report"},
          {"checkpoint_id", r.checkpoint_id},   {"decode_strategy", r.decode_strategy},
          {"perm_cap", r.perm_cap},             {"metrics", r.metrics},
          {"samples", samples},                 {"mean_best", r.mean_best},
          {"mean_worst", r.mean_worst},         {"corpus_best", r.corpus_best},
          {"corpus_worst", r.corpus_worst}};
}

inline SweepReport sweep_report_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "sweep_report") throw std::invalid_argument("report: not a sweep_report");
  SweepReport r;
  r.schema_version = j.at("schema_version").get<int>();
  r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  r.decode_strategy = j.at("decode_strategy").get<std::string>();
  r.perm_cap = j.at("perm_cap").get<int>();
  r.metrics = j.at("metrics").get<std::vector<std::string>>();
  for (const auto& sj : j.at("samples")) {
    std::vector<SweepCell> row;
    for (const auto& cj : sj.at("cells")) {
      SweepCell c;
      c.best = cj.at("best").get<double>();
      c.worst = cj.at("worst").get<double>();
      c.argbest = cj.at("argbest").get<std::vector<int>>();
      c.argworst = cj.at("argworst").get<std::vector<int>>();
      row.push_back(std::move(c));
    }
    r.cells.push_back(std::move(row));
  }
  r.mean_best = j.at("mean_best").get<std::vector<double>>();
  r.mean_worst = j.at("mean_worst").get<std::vector<double>>();
  r.corpus_best = j.at("corpus_best").get<std::vector<double>>();
  r.corpus_worst = j.at("corpus_worst").get<std::vector<double>>();
  return r;
}

inline nlohmann::json to_json(const VarianceReport& r) {
  return {{"schema_version", r.schema_version}, {"kind", "variance_report"},
          {"checkpoint_id", r.checkpoint_id},   {"metrics", r.metrics},
          {"run_seeds", r.run_seeds},           {"run_scores", r.run_scores},
          {"mean", r.mean},                     {"variance", r.variance},
          {"stddev", r.stddev},                 {"min", r.min},
          {"max", r.max}};
}

inline VarianceReport variance_report_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "variance_report") throw std::invalid_argument("report: not a variance_report");
  VarianceReport r;
  r.schema_version = j.at("schema_version").get<int>();
  r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  r.metrics = j.at("metrics").get<std::vector<std::string>>();
  r.run_seeds = j.at("run_seeds").get<std::vector<std::uint64_t>>();
  r.run_scores = j.at("run_scores").get<std::vector<std::vector<double>>>();
  r.mean = j.at("mean").get<std::vector<double>>();
  r.variance = j.at("variance").get<std::vector<double>>();
  r.stddev = j.at("stddev").get<std::vector<double>>();
  r.min = j.at("min").get<std::vector<double>>();
  r.max = j.at("max").get<std::vector<double>>();
  return r;
}

inline nlohmann::json to_json(const DivergenceReport& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) {
    samples.push_back({{"tokens", s.tokens}, {"kl", s.kl}, {"mean", s.mean}});
  }
  return {{"schema_version", r.schema_version}, {"kind", "divergence_report"},
          {"checkpoint_id", r.checkpoint_id},   {"pairs_per_sample", r.pairs_per_sample},
          {"seed", r.seed},                     {"samples", samples},
          {"corpus_mean", r.corpus_mean}};
}

inline DivergenceReport divergence_report_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "divergence_report") {
    throw std::invalid_argument("report: not a divergence_report");
  }
  DivergenceReport r;
  r.schema_version = j.at("schema_version").get<int>();
  r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  r.pairs_per_sample = j.at("pairs_per_sample").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& sj : j.at("samples")) {
    DivergenceSample s;
    s.tokens = sj.at("tokens").get<std::vector<std::string>>();
    s.kl = sj.at("kl").get<std::vector<double>>();
    s.mean = sj.at("mean").get<double>();
    r.samples.push_back(std::move(s));
  }
  r.corpus_mean = j.at("corpus_mean").get<double>();
  return r;
}

// ---- CSV -------------------------------------------------------------------------

inline std::string to_csv(const SweepReport& r) {
  std::ostringstream out;
  out << "sample,metric,best,worst,argbest,argworst\n";
  for (std::size_t si = 0; si < r.cells.size(); ++si) {
    for (std::size_t mi = 0; mi < r.metrics.size(); ++mi) {
      const auto& c = r.cells[si][mi];
      out << si << "," << io_detail::csv_escape(r.metrics[mi]) << "," << c.best << "," << c.worst << ","
          << io_detail::perm_str(c.argbest) << "," << io_detail::perm_str(c.argworst) << "\n";
    }
  }
  return out.str();
}

inline std::string to_csv(const VarianceReport& r) {
  std::ostringstream out;
  out << "run,seed,metric,score\n";
  for (std::size_t run = 0; run < r.run_scores.size(); ++run) {
    for (std::size_t mi = 0; mi < r.metrics.size(); ++mi) {
      out << run << "," << r.run_seeds[run] << "," << io_detail::csv_escape(r.metrics[mi]) << ","
          << r.run_scores[run][mi] << "\n";
    }
  }
  return out.str();
}

inline std::string to_csv(const DivergenceReport& r) {
  std::ostringstream out;
  out << "sample,position,token,kl\n";
  for (std::size_t si = 0; si < r.samples.size(); ++si) {
    const auto& s = r.samples[si];
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      out << si << "," << t << "," << io_detail::csv_escape(s.tokens[t]) << "," << s.kl[t] << "\n";
    }
  }
  return out.str();
}

template <typename Report>
void emit_report(const Report& report, const std::filesystem::path& path, ReportFormat format) {
  if (format == ReportFormat::json) {
    io_detail::write_text(path, to_json(report).dump(2) + "\n");
  } else {
    io_detail::write_text(path, to_csv(report));
  }
}

// ---- SVG box plot -------------------------------------------------------------------

struct BoxSeries {
  std::string label;
  std::vector<double> values;
};

namespace io_detail {

struct BoxStats {
  double q1, median, q3, whisker_lo, whisker_hi;
  std::vector<double> outliers;
};

inline double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.size() == 1) return sorted[0];
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline BoxStats box_stats(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  BoxStats s{};
  s.q1 = quantile(values, 0.25);
  s.median = quantile(values, 0.5);
  s.q3 = quantile(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.whisker_lo = s.q3;
  s.whisker_hi = s.q1;
  bool any = false;
  for (double v : values) {
    if (v >= lo_fence && v <= hi_fence) {
      if (!any) {
        s.whisker_lo = v;
        s.whisker_hi = v;
        any = true;
      } else {
        s.whisker_lo = std::min(s.whisker_lo, v);
        s.whisker_hi = std::max(s.whisker_hi, v);
      }
    } else {
      s.outliers.push_back(v);
    }
  }
  return s;
}

}  // namespace io_detail

// One box (median, quartiles, 1.5-IQR whiskers, outlier dots) per series.
inline void emit_boxplot_svg(const std::vector<BoxSeries>& series, const std::filesystem::path& path) {
  if (series.empty()) throw std::invalid_argument("boxplot: no series");
  for (const auto& s : series) {
    if (s.values.empty()) throw std::invalid_argument("boxplot: series '" + s.label + "' is empty");
  }
  double vmin = series[0].values[0], vmax = vmin;
  for (const auto& s : series) {
    for (double v : s.values) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  }
  if (vmax - vmin < 1e-12) {
    vmin -= 1.0;
    vmax += 1.0;
  }
  const double pad = 0.08 * (vmax - vmin);
  vmin -= pad;
  vmax += pad;

  const int box_w = 60, gap = 50, margin_l = 70, margin_r = 20, margin_t = 20, margin_b = 50;
  const int plot_h = 260;
  const int width = margin_l + margin_r + static_cast<int>(series.size()) * (box_w + gap);
  const int height = margin_t + plot_h + margin_b;
  auto ycoord = [&](double v) {
    return margin_t + plot_h * (1.0 - (v - vmin) / (vmax - vmin));
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // y axis with min/max labels
  svg << "  <line x1=\"" << margin_l - 10 << "\" y1=\"" << margin_t << "\" x2=\"" << margin_l - 10
      << "\" y2=\"" << margin_t + plot_h << "\" stroke=\"black\"/>\n";
  svg << "  <text x=\"" << margin_l - 14 << "\" y=\"" << ycoord(vmax - pad) + 4
      << "\" font-size=\"11\" text-anchor=\"end\">" << vmax - pad << "</text>\n";
  svg << "  <text x=\"" << margin_l - 14 << "\" y=\"" << ycoord(vmin + pad) + 4
      << "\" font-size=\"11\" text-anchor=\"end\">" << vmin + pad << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto st = io_detail::box_stats(series[i].values);
    const int x0 = margin_l + static_cast<int>(i) * (box_w + gap);
    const double cx = x0 + box_w / 2.0;
    const double yq1 = ycoord(st.q1), yq3 = ycoord(st.q3), ymed = ycoord(st.median);
    const double ywl = ycoord(st.whisker_lo), ywh = ycoord(st.whisker_hi);
    svg << "  <line x1=\"" << cx << "\" y1=\"" << ywl << "\" x2=\"" << cx << "\" y2=\"" << yq1
        << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << cx << "\" y1=\"" << yq3 << "\" x2=\"" << cx << "\" y2=\"" << ywh
        << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << cx - 14 << "\" y1=\"" << ywl << "\" x2=\"" << cx + 14 << "\" y2=\"" << ywl
        << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << cx - 14 << "\" y1=\"" << ywh << "\" x2=\"" << cx + 14 << "\" y2=\"" << ywh
        << "\" stroke=\"black\"/>\n";
    svg << "  <rect x=\"" << x0 << "\" y=\"" << yq3 << "\" width=\"" << box_w << "\" height=\""
        << std::max(0.0, yq1 - yq3) << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << x0 << "\" y1=\"" << ymed << "\" x2=\"" << x0 + box_w << "\" y2=\"" << ymed
        << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double v : st.outliers) {
      svg << "  <circle cx=\"" << cx << "\" cy=\"" << ycoord(v) << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
    }
    svg << "  <text x=\"" << cx << "\" y=\"" << margin_t + plot_h + 20
        << "\" font-size=\"12\" text-anchor=\"middle\">" << series[i].label << "</text>\n";
  }
  svg << "</svg>\n";
  io_detail::write_text(path, svg.str());
}

// One box per metric in the report.
inline void emit_boxplot_svg(const VarianceReport& report, const std::filesystem::path& path) {
  std::vector<BoxSeries> series;
  for (std::size_t mi = 0; mi < report.metrics.size(); ++mi) {
    BoxSeries s;
    s.label = report.metrics[mi];
    for (const auto& run : report.run_scores) s.values.push_back(run[mi]);
    series.push_back(std::move(s));
  }
  emit_boxplot_svg(series, path);
}

}  // namespace orderlab::analysis
