// Copyright 2026 The cptspec Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/**
 * @file spectrum_io.hpp
 * @brief Spectrum CSV files, SVG plots and run manifests.
 *
 * CSV layout:
 *
 *   # key=value            (metadata: manifest hash, every config field)
 *   detuning_MHz,fluorescence,flag
 *   -49.75,0.0123,ok
 *   ...
 *   # minima_count=4       (footer)
 */
#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptspec/config.hpp"
#include "cptspec/spectra.hpp"

namespace cptspec {

inline constexpr const char* kEngineVersion = "1.0.0";

/// Thrown when a spectrum file does not follow the CSV layout.
class SchemaError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// What produced an output file. Output paths and wall time are kept out of the
/// hash, so rerunning a command elsewhere gives byte-identical files.
struct RunManifest {
  std::string command;
  std::string config_snapshot;  // to_ini() text
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  std::string engine_version = kEngineVersion;
  double wall_time_s = 0.0;

  std::string hash() const {
    std::string s = command + '\n' + config_snapshot + '\n' + std::to_string(seed) + '\n' + engine_version;
    for (const auto& i : inputs) s += "\nin:" + i;
    return fnv1a_hex(s);
  }

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config_snapshot}, {"inputs", inputs},
            {"outputs", outputs}, {"seed", seed},              {"engine_version", engine_version},
            {"wall_time_s", wall_time_s}, {"hash", hash()}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_snapshot = j.at("config").get<std::string>();
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.engine_version = j.at("engine_version").get<std::string>();
    m.wall_time_s = j.value("wall_time_s", 0.0);
    return m;
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error(path + ": cannot write");
    out << to_json().dump(2) << "\n";
  }
};

/// Extra footer lines written after the data rows.
using Footer = std::vector<std::pair<std::string, std::string>>;

inline std::string format_minima(const std::vector<double>& minima_rad) {
  std::string s;
  for (std::size_t i = 0; i < minima_rad.size(); ++i) {
    if (i) s += ";";
    s += format_number(units::rad_to_mhz(minima_rad[i]));
  }
  return s;
}

inline void write_spectrum_csv(std::ostream& out, const SpectrumCurve& curve, const ExperimentConfig& cfg,
                               const std::string& manifest_hash, const Footer& footer = {}) {
  out << "# format=cptspec-spectrum-1\n";
  out << "# manifest_hash=" << manifest_hash << "\n";
  out << "# noisy=" << (curve.noisy ? 1 : 0) << "\n";
  for (const auto& [k, v] : flatten_config(cfg)) out << "# " << k << "=" << v << "\n";
  out << "detuning_MHz,fluorescence,flag\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g", units::rad_to_mhz(curve.detuning[i]));
    out << buf << ",";
    std::snprintf(buf, sizeof buf, "%.17g", curve.fluorescence[i]);
    out << buf << "," << to_string(curve.diagnostics.empty() ? PointFlag::Ok : curve.diagnostics[i].flag) << "\n";
  }
  for (const auto& [k, v] : footer) out << "# " << k << "=" << v << "\n";
}

inline void write_spectrum_csv(const std::string& path, const SpectrumCurve& curve, const ExperimentConfig& cfg,
                               const std::string& manifest_hash, const Footer& footer = {}) {
  std::ofstream out(path);
  if (!out) throw Error(path + ": cannot write");
  write_spectrum_csv(out, curve, cfg, manifest_hash, footer);
}

/// A spectrum file: the curve plus every metadata line.
struct SpectrumFile {
  SpectrumCurve curve;
  std::map<std::string, std::string> metadata;  // header and footer
};

inline SpectrumFile read_spectrum_csv(std::istream& in, const std::string& name = "spectrum") {
  SpectrumFile f;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  auto fail = [&](const std::string& msg) { throw SchemaError(name + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      f.metadata[key] = line.substr(eq + 1);
      continue;
    }
    if (!header_seen) {
      if (line != "detuning_MHz,fluorescence,flag" && line != "detuning_MHz,fluorescence")
        fail("expected column header 'detuning_MHz,fluorescence,flag', got '" + line + "'");
      header_seen = true;
      continue;
    }
    std::istringstream row(line);
    std::string a, b, c;
    if (!std::getline(row, a, ',') || !std::getline(row, b, ',')) fail("expected at least 2 columns");
    std::getline(row, c, ',');
    PointDiagnostics d;
    double x = 0.0, y = 0.0;
    try {
      std::size_t pa = 0, pb = 0;
      x = std::stod(a, &pa);
      y = std::stod(b, &pb);
      if (pa != a.size() || pb != b.size()) throw std::invalid_argument("");
      if (!c.empty()) d.flag = point_flag_from_string(c);
    } catch (const SchemaError&) {
      throw;
    } catch (const std::exception&) {
      fail("malformed row '" + line + "'");
    }
    if (!f.curve.detuning.empty() && !(units::mhz_to_rad(x) > f.curve.detuning.back()))
      fail("detuning_MHz must be strictly increasing");
    f.curve.detuning.push_back(units::mhz_to_rad(x));
    f.curve.fluorescence.push_back(y);
    f.curve.diagnostics.push_back(d);
  }
  if (!header_seen) throw SchemaError(name + ": missing column header");
  if (f.curve.size() == 0) throw SchemaError(name + ": no data rows");
  f.curve.noisy = f.metadata.count("noisy") && f.metadata.at("noisy") == "1";
  auto num = [&](const char* key, double def) {
    const auto it = f.metadata.find(key);
    if (it == f.metadata.end()) return def;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw SchemaError(name + ": metadata " + key + " is not a number: '" + it->second + "'");
    }
  };
  f.curve.scale = num("detector.scale", 1.0);
  f.curve.offset = num("detector.offset", 0.0);
  return f;
}

/// Rebuilds the generating config from "section.key" header lines, if present.
inline std::optional<ExperimentConfig> config_from_metadata(const std::map<std::string, std::string>& meta) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [k, v] : meta) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) continue;
    sections[k.substr(0, dot)].emplace_back(k.substr(dot + 1), v);
  }
  if (sections.empty()) return std::nullopt;
  std::string ini;
  for (const auto& [name, keys] : sections) {
    ini += "[" + name + "]\n";
    for (const auto& [k, v] : keys) ini += k + " = " + v + "\n";
  }
  return parse_config(ini);
}

inline SpectrumFile read_spectrum_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError(path + ": cannot open");
  return read_spectrum_csv(in, path);
}

// ---------------------------------------------------------------------------
// SVG

struct PlotSeries {
  std::string label;
  std::vector<double> x_mhz;
  std::vector<double> y;
  std::string color = "#1f4e9c";
  bool markers = false;  // dots instead of a line
};

struct PlotMarker {
  double x_mhz = 0.0;
  std::string label;
};

/// Minimal line plot with dashed vertical markers at resonance positions.
inline std::string render_svg(const std::vector<PlotSeries>& series, const std::vector<PlotMarker>& markers,
                              const std::string& title, const std::string& y_label = "fluorescence") {
  const double w = 760, h = 420, ml = 70, mr = 20, mt = 36, mb = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x_mhz.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x_mhz[i]);
      x1 = std::max(x1, s.x_mhz[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return std::string(b);
  };
  auto tick = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4g", v);
    return std::string(b);
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << w - ml - mr << "\" height=\"" << h - mt - mb
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = x0 + k * (x1 - x0) / 5, yv = y0 + k * (y1 - y0) / 5;
    o << "<text x=\"" << num(px(xv)) << "\" y=\"" << h - mb + 16 << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
    o << "<text x=\"" << ml - 6 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
  }
  o << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">probe detuning (MHz)</text>\n";
  o << "<text x=\"16\" y=\"" << h / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << h / 2 << ")\">"
    << y_label << "</text>\n";
  for (const auto& m : markers) {
    if (m.x_mhz < x0 || m.x_mhz > x1) continue;
    o << "<line x1=\"" << num(px(m.x_mhz)) << "\" y1=\"" << mt << "\" x2=\"" << num(px(m.x_mhz)) << "\" y2=\"" << h - mb
      << "\" stroke=\"#c0392b\" stroke-dasharray=\"4 3\"/>\n";
    if (!m.label.empty())
      o << "<text x=\"" << num(px(m.x_mhz) + 2) << "\" y=\"" << mt + 12 << "\" fill=\"#c0392b\" font-size=\"10\">" << m.label
        << "</text>\n";
  }
  int row = 0;
  for (const auto& s : series) {
    if (s.markers) {
      for (std::size_t i = 0; i < s.x_mhz.size(); ++i)
        if (std::isfinite(s.y[i]))
          o << "<circle cx=\"" << num(px(s.x_mhz[i])) << "\" cy=\"" << num(py(s.y[i])) << "\" r=\"1.5\" fill=\"" << s.color
            << "\"/>\n";
    } else {
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x_mhz.size(); ++i)
        if (std::isfinite(s.y[i])) o << num(px(s.x_mhz[i])) << "," << num(py(s.y[i])) << " ";
      o << "\"/>\n";
    }
    if (!s.label.empty())
      o << "<text x=\"" << w - mr - 6 << "\" y=\"" << mt + 16 + 14 * row++ << "\" text-anchor=\"end\" fill=\"" << s.color
        << "\">" << s.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Spectrum plot with the predicted S-D (and D-D) positions marked.
inline std::string spectrum_svg(const SpectrumCurve& curve, const ExperimentConfig& cfg, const std::string& title) {
  PlotSeries s{"", curve.detuning_mhz(), curve.fluorescence, "#1f4e9c", curve.noisy};
  std::vector<PlotMarker> markers;
  for (const auto& r : predict_resonance_positions(cfg)) markers.push_back({units::rad_to_mhz(r.position), to_string(r.kind)});
  for (const auto& r : predict_dd_resonance_positions(cfg)) markers.push_back({units::rad_to_mhz(r.position), "dd"});
  return render_svg({s}, markers, title);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(path + ": cannot write");
  out << text;
}

}  // namespace cptspec
