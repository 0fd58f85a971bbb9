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
 * @file config.hpp
 * @brief INI experiment configs with units in the key names.
 *
 * Sections: scheme, doppler, probe, repumper (present = on), environment,
 * detector, scan, floquet. Every key is optional; unknown keys are errors.
 *
 *   [probe]
 *   saturation = 7.6
 *   detuning_mhz = 0          ; scanned, ignored for the probe
 *   linewidth_mhz = 0.1
 *   polarization = linear     ; linear | pi | sigma_pm | spherical
 *   alpha_deg = 15
 *   k = 0 1 0
 *
 * to_ini() writes a canonical snapshot; parsing it back gives the same
 * config and writing again gives the same text.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cptspec/spectra.hpp"

namespace cptspec {

/// Config problems, one message per offending field path.
class ConfigError : public InvalidArgument {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : InvalidArgument(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid config:";
    for (const auto& m : e) s += "\n  " + m;
    return s;
  }
  std::vector<std::string> errors_;
};

/// Shortest text that reads back to the same value at 15 significant digits.
inline std::string format_number(double v) {
  if (v == 0.0) return "0";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  return buf;
}

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

using Tree = boost::property_tree::ptree;

class SectionReader {
 public:
  SectionReader(const Tree* tree, std::string name, std::vector<std::string>& errors)
      : tree_(tree), name_(std::move(name)), errors_(errors) {}

  bool present() const { return tree_ != nullptr; }

  double number(const std::string& key, double fallback) {
    const auto v = raw(key);
    if (!v) return fallback;
    try {
      std::size_t pos = 0;
      const double x = std::stod(*v, &pos);
      if (pos != v->size() || !std::isfinite(x)) throw std::invalid_argument("");
      return x;
    } catch (const std::exception&) {
      fail(key, "expected a finite number, got '" + *v + "'");
      return fallback;
    }
  }

  int integer(const std::string& key, int fallback) {
    const double x = number(key, fallback);
    if (x != std::floor(x)) {
      fail(key, "expected an integer");
      return fallback;
    }
    return static_cast<int>(x);
  }

  bool boolean(const std::string& key, bool fallback) {
    const auto v = raw(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    fail(key, "expected true or false, got '" + *v + "'");
    return fallback;
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const auto v = raw(key);
    return v ? *v : fallback;
  }

  std::vector<double> numbers(const std::string& key, std::size_t count, std::vector<double> fallback) {
    const auto v = raw(key);
    if (!v) return fallback;
    std::istringstream in(*v);
    std::vector<double> out;
    double x;
    while (in >> x) out.push_back(x);
    if (!in.eof() || out.size() != count) {
      fail(key, "expected " + std::to_string(count) + " space-separated numbers, got '" + *v + "'");
      return fallback;
    }
    return out;
  }

  void fail(const std::string& key, const std::string& msg) { errors_.push_back(name_ + "." + key + ": " + msg); }

  /// Reports keys never read.
  void finish() {
    if (!tree_) return;
    for (const auto& [key, child] : *tree_) {
      if (!used_.count(key)) errors_.push_back(name_ + "." + key + ": unknown key");
      if (!child.empty()) errors_.push_back(name_ + "." + key + ": nested sections are not allowed");
    }
  }

 private:
  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    if (!tree_) return std::nullopt;
    const auto it = tree_->find(key);
    if (it == tree_->not_found()) return std::nullopt;
    std::string v = it->second.data();
    const auto b = v.find_first_not_of(" \t");
    const auto e = v.find_last_not_of(" \t");
    return b == std::string::npos ? std::string{} : v.substr(b, e - b + 1);
  }

  const Tree* tree_;
  std::string name_;
  std::vector<std::string>& errors_;
  std::set<std::string> used_;
};

inline const Tree* section(const Tree& root, const std::string& name) {
  const auto it = root.find(name);
  return it == root.not_found() ? nullptr : &it->second;
}

inline Polarization read_polarization(SectionReader& r) {
  const std::string kind = r.text("polarization", "sigma_pm");
  const double alpha = r.number("alpha_deg", 90.0);
  const double phi = r.number("phi_deg", 0.0);
  const auto sph = r.numbers("spherical", 6, {0, 0, 1, 0, 0, 0});
  if (kind == "sigma_pm") return Polarization::sigma_pm();
  if (kind == "pi") return Polarization::pi();
  if (kind == "linear") return Polarization::linear(units::deg_to_rad(alpha), units::deg_to_rad(phi));
  if (kind == "spherical") {
    Polarization p{{cd{sph[0], sph[1]}, cd{sph[2], sph[3]}, cd{sph[4], sph[5]}}};
    if (p.norm_error() > 1e-9) r.fail("spherical", "amplitudes (q = -1, 0, +1 as re im pairs) must have unit norm");
    return p;
  }
  r.fail("polarization", "expected linear, pi, sigma_pm or spherical, got '" + kind + "'");
  return Polarization::sigma_pm();
}

inline LaserField read_laser(SectionReader& r, Transition t, double default_linewidth_mhz = 0.0) {
  LaserField l;
  l.transition = t;
  l.saturation = r.number("saturation", 0.0);
  l.detuning = units::mhz_to_rad(r.number("detuning_mhz", 0.0));
  l.linewidth = units::mhz_to_rad(r.number("linewidth_mhz", default_linewidth_mhz));
  const auto k = r.numbers("k", 3, {0, 1, 0});
  l.k_hat = Eigen::Vector3d(k[0], k[1], k[2]);
  l.polarization = read_polarization(r);
  return l;
}

/// Linear polarization angles (theta, phi) in degrees when `p` is linear.
inline std::optional<std::pair<double, double>> linear_angles(const Polarization& p) {
  const cd m = p.amplitude(-1), z = p.amplitude(0), pl = p.amplitude(1);
  if (std::abs(z.imag()) > 1e-12 || z.real() < -1e-12) return std::nullopt;
  if (std::abs(pl + std::conj(m)) > 1e-12) return std::nullopt;
  const double theta = std::atan2(std::sqrt(2.0) * std::abs(m), z.real());
  const double phi = std::abs(m) > 1e-15 ? -std::arg(m) : 0.0;
  return std::make_pair(units::rad_to_deg(theta), units::rad_to_deg(phi));
}

inline void write_laser(std::ostream& out, const std::string& name, const LaserField& l) {
  out << "[" << name << "]\n";
  out << "saturation = " << format_number(l.saturation) << "\n";
  out << "detuning_mhz = " << format_number(units::rad_to_mhz(l.detuning)) << "\n";
  out << "linewidth_mhz = " << format_number(units::rad_to_mhz(l.linewidth)) << "\n";
  if (const auto a = linear_angles(l.polarization)) {
    out << "polarization = linear\n";
    out << "alpha_deg = " << format_number(a->first) << "\n";
    out << "phi_deg = " << format_number(a->second) << "\n";
  } else {
    out << "polarization = spherical\n";
    out << "spherical =";
    for (int q = -1; q <= 1; ++q)
      out << " " << format_number(l.polarization.amplitude(q).real()) << " "
          << format_number(l.polarization.amplitude(q).imag());
    out << "\n";
  }
  out << "k = " << format_number(l.k_hat.x()) << " " << format_number(l.k_hat.y()) << " "
      << format_number(l.k_hat.z()) << "\n\n";
}

inline void collect(std::vector<std::string>& errors, auto&& fn) {
  try {
    fn();
  } catch (const InvalidArgument& e) {
    errors.push_back(e.what());
  }
}

}  // namespace detail

/// Parses INI text. All problems are reported together in one ConfigError.
inline ExperimentConfig parse_config(const std::string& text) {
  detail::Tree root;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError({"syntax: line " + std::to_string(e.line()) + ": " + e.message()});
  }
  std::vector<std::string> errors;
  static const std::set<std::string> known{"scheme", "doppler", "probe", "repumper", "environment", "detector", "scan", "floquet"};
  for (const auto& [key, child] : root) {
    if (child.empty()) errors.push_back(key + ": keys must live inside a section");
    else if (!known.count(key)) errors.push_back(key + ": unknown section");
  }

  ExperimentConfig cfg;
  {
    detail::SectionReader r(detail::section(root, "scheme"), "scheme", errors);
    auto& s = cfg.scheme;
    s.lifetime_p = r.number("lifetime_ns", s.lifetime_p * 1e9) * 1e-9;
    s.branching_sp = r.number("branching_sp", s.branching_sp);
    s.g_s = r.number("g_s", s.g_s);
    s.g_p = r.number("g_p", s.g_p);
    s.g_d = r.number("g_d", s.g_d);
    s.lambda_sp = r.number("lambda_sp_nm", s.lambda_sp * 1e9) * 1e-9;
    s.lambda_dp = r.number("lambda_dp_nm", s.lambda_dp * 1e9) * 1e-9;
    s.mass = r.number("mass_amu", s.mass / phys::kAtomicMassUnit) * phys::kAtomicMassUnit;
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "doppler"), "doppler", errors);
    cfg.doppler = detail::read_laser(r, Transition::SP);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "probe"), "probe", errors);
    cfg.probe = detail::read_laser(r, Transition::DP);
    r.finish();
  }
  if (const auto* sec = detail::section(root, "repumper")) {
    detail::SectionReader r(sec, "repumper", errors);
    cfg.repumper = detail::read_laser(r, Transition::DP);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "environment"), "environment", errors);
    cfg.environment.b_gauss = r.number("b_gauss", 0.0);
    cfg.environment.temperature = r.number("temperature_mk", 0.0) * 1e-3;
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "detector"), "detector", errors);
    cfg.detector.scale = r.number("scale", 1.0);
    cfg.detector.offset = r.number("offset", 0.0);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "scan"), "scan", errors);
    const ScanGrid def = ScanGrid::around(units::rad_to_mhz(cfg.doppler.detuning));
    cfg.grid.start_mhz = r.number("start_mhz", def.start_mhz);
    cfg.grid.stop_mhz = r.number("stop_mhz", def.stop_mhz);
    cfg.grid.step_mhz = r.number("step_mhz", def.step_mhz);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "floquet"), "floquet", errors);
    auto& f = cfg.floquet;
    f.n_max = r.integer("n_max", f.n_max);
    f.floor = r.integer("floor", f.floor);
    f.cap = r.integer("cap", f.cap);
    const std::string policy = r.text("policy", "minimum_norm");
    if (policy == "minimum_norm") f.policy = SingularityPolicy::MinimumNorm;
    else if (policy == "strict") f.policy = SingularityPolicy::Strict;
    else r.fail("policy", "expected minimum_norm or strict, got '" + policy + "'");
    f.check_inner_residuals = r.boolean("check_inner_residuals", f.check_inner_residuals);
    f.oracle_check = r.boolean("oracle_check", f.oracle_check);
    r.finish();
  }
  if (!errors.empty()) throw ConfigError(errors);

  // Validation, section by section so every failing field is listed.
  detail::collect(errors, [&] { cfg.scheme.validate(); });
  detail::collect(errors, [&] { cfg.doppler.validate("doppler"); });
  detail::collect(errors, [&] { cfg.probe.validate("probe"); });
  if (cfg.repumper) detail::collect(errors, [&] { cfg.repumper->validate("repumper"); });
  detail::collect(errors, [&] { cfg.environment.validate(); });
  if (!(cfg.detector.scale > 0.0)) errors.push_back("detector.scale: must be > 0");
  detail::collect(errors, [&] { cfg.grid.validate(); });
  detail::collect(errors, [&] { cfg.floquet.validate(); });
  if (!errors.empty()) throw ConfigError(errors);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({path + ": cannot open"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical snapshot: every field, fixed order, 15 significant digits.
inline std::string to_ini(const ExperimentConfig& cfg) {
  std::ostringstream out;
  const auto& s = cfg.scheme;
  out << "[scheme]\n"
      << "lifetime_ns = " << format_number(s.lifetime_p * 1e9) << "\n"
      << "branching_sp = " << format_number(s.branching_sp) << "\n"
      << "g_s = " << format_number(s.g_s) << "\n"
      << "g_p = " << format_number(s.g_p) << "\n"
      << "g_d = " << format_number(s.g_d) << "\n"
      << "lambda_sp_nm = " << format_number(s.lambda_sp * 1e9) << "\n"
      << "lambda_dp_nm = " << format_number(s.lambda_dp * 1e9) << "\n"
      << "mass_amu = " << format_number(s.mass / phys::kAtomicMassUnit) << "\n\n";
  detail::write_laser(out, "doppler", cfg.doppler);
  detail::write_laser(out, "probe", cfg.probe);
  if (cfg.repumper) detail::write_laser(out, "repumper", *cfg.repumper);
  out << "[environment]\n"
      << "b_gauss = " << format_number(cfg.environment.b_gauss) << "\n"
      << "temperature_mk = " << format_number(cfg.environment.temperature * 1e3) << "\n\n";
  out << "[detector]\n"
      << "scale = " << format_number(cfg.detector.scale) << "\n"
      << "offset = " << format_number(cfg.detector.offset) << "\n\n";
  out << "[scan]\n"
      << "start_mhz = " << format_number(cfg.grid.start_mhz) << "\n"
      << "stop_mhz = " << format_number(cfg.grid.stop_mhz) << "\n"
      << "step_mhz = " << format_number(cfg.grid.step_mhz) << "\n\n";
  const auto& f = cfg.floquet;
  out << "[floquet]\n"
      << "n_max = " << f.n_max << "\n"
      << "floor = " << f.floor << "\n"
      << "cap = " << f.cap << "\n"
      << "policy = " << (f.policy == SingularityPolicy::Strict ? "strict" : "minimum_norm") << "\n"
      << "check_inner_residuals = " << (f.check_inner_residuals ? "true" : "false") << "\n"
      << "oracle_check = " << (f.oracle_check ? "true" : "false") << "\n";
  return out.str();
}

/// Flat "section.key=value" pairs of the canonical snapshot, for CSV headers.
inline std::vector<std::pair<std::string, std::string>> flatten_config(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(to_ini(cfg));
  std::string line, sec;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      sec = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    out.emplace_back(sec + "." + line.substr(0, eq), line.substr(eq + 3));
  }
  return out;
}

inline std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(to_ini(cfg)); }

}  // namespace cptspec
