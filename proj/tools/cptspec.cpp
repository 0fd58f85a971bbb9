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

// cptspec: simulate dark-resonance spectra, cross-check the averaged solver
// against time integration, fit spectra and run the two polarimeters.
//
// Exit codes: 0 ok, 1 hard failure, 2 soft failure (result produced but flagged).

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cptspec/config.hpp"
#include "cptspec/dynamics.hpp"
#include "cptspec/inference.hpp"
#include "cptspec/spectra.hpp"
#include "cptspec/spectrum_io.hpp"

using namespace cptspec;

namespace {

constexpr int kOk = 0;
constexpr int kHardFail = 1;
constexpr int kSoftFail = 2;

using Clock = std::chrono::steady_clock;

struct Run {
  RunManifest manifest;
  Clock::time_point start = Clock::now();

  explicit Run(std::string command) { manifest.command = std::move(command); }

  /// Stamps the wall time and writes <primary output>.manifest.json.
  void finish(const std::string& primary) {
    manifest.wall_time_s = std::chrono::duration<double>(Clock::now() - start).count();
    manifest.write(primary + ".manifest.json");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Data rows must sit on the grid recorded in the file header, when there is one.
void check_grid(const SpectrumFile& f, const std::string& path) {
  const auto cfg = config_from_metadata(f.metadata);
  if (!cfg) return;
  const auto grid = cfg->grid.points_mhz();
  const auto x = f.curve.detuning_mhz();
  bool same = grid.size() == x.size();
  for (std::size_t i = 0; same && i < x.size(); ++i) same = std::abs(grid[i] - x[i]) < 1e-6;
  if (!same)
    throw SchemaError(path + ": data rows (" + std::to_string(x.size()) + " points) do not match the scan grid in its header (" +
                      std::to_string(grid.size()) + " points from " + format_number(cfg->grid.start_mhz) + " MHz)");
}

// name=value pairs for --init and name=lo:hi pairs for --bounds.
std::vector<FitParameter> parse_free(const std::vector<std::string>& names, const std::vector<std::string>& inits,
                                     const std::vector<std::string>& bounds) {
  std::vector<FitParameter> free;
  for (const auto& n : names) free.push_back({parse_param(n)});
  auto find = [&](const std::string& n) -> FitParameter& {
    const FitParam id = parse_param(n);
    for (auto& f : free)
      if (f.id == id) return f;
    throw InvalidArgument("'" + n + "' is not in --free");
  };
  for (const auto& s : inits) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--init expects name=value, got '" + s + "'");
    find(s.substr(0, eq)).initial = std::stod(s.substr(eq + 1));
  }
  for (const auto& s : bounds) {
    const auto eq = s.find('='), colon = s.find(':');
    if (eq == std::string::npos || colon == std::string::npos || colon < eq)
      throw InvalidArgument("--bounds expects name=lower:upper, got '" + s + "'");
    FitParameter& f = find(s.substr(0, eq));
    f.lower = std::stod(s.substr(eq + 1, colon - eq - 1));
    f.upper = std::stod(s.substr(colon + 1));
  }
  return free;
}

void print_estimates(const FitResult& r) {
  for (const auto& e : r.estimates)
    std::cout << e.name << " = " << format_number(e.value) << " +- " << format_number(e.sigma) << " " << e.unit << "\n";
  std::cout << "converged: " << (r.converged ? "yes" : "no") << " (" << r.reason << "), reduced chi2 "
            << format_number(r.reduced_chi2) << "\n";
}

// ---------------------------------------------------------------------------

struct SpectrumArgs {
  std::string config, out, plot, title;
  bool noise = false;
  std::uint64_t seed = 0;
};

int cmd_spectrum(const SpectrumArgs& a, int threads) {
  Run run("spectrum");
  const ExperimentConfig cfg = load_config(a.config);
  ScanOptions so;
  so.threads = threads;
  SpectrumCurve curve = probe_scan(cfg, so);
  if (a.noise) curve = with_poisson_noise(curve, a.seed);

  const auto minima = find_minima_positions(curve);
  Footer footer{{"minima_count", std::to_string(minima.size())},
                {"minima_mhz", format_minima(minima)},
                {"failed_points", std::to_string(curve.failed_points())}};
  run.manifest.config_snapshot = to_ini(cfg);
  run.manifest.inputs = {a.config};
  run.manifest.outputs = {a.out};
  if (!a.plot.empty()) run.manifest.outputs.push_back(a.plot);
  run.manifest.seed = a.noise ? a.seed : 0;
  write_spectrum_csv(a.out, curve, cfg, run.manifest.hash(), footer);
  if (!a.plot.empty()) write_text(a.plot, spectrum_svg(curve, cfg, a.title.empty() ? a.config : a.title));
  run.finish(a.out);

  std::cout << curve.size() << " points, " << minima.size() << " minima:";
  for (double m : minima) std::cout << " " << fmt("%.2f", units::rad_to_mhz(m));
  std::cout << " MHz\n";
  const int failed = curve.failed_points();
  if (failed > 0) {
    std::cerr << "error: " << failed << " of " << curve.size() << " points failed\n";
    for (std::size_t i = 0; i < curve.size(); ++i)
      if (curve.diagnostics[i].flag == PointFlag::Failed)
        std::cerr << "  " << fmt("%.4f", units::rad_to_mhz(curve.detuning[i])) << " MHz: " << curve.diagnostics[i].message << "\n";
    return kHardFail;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct OracleArgs {
  std::string config;
  double tolerance = 1e-3;
  int points = 5;
};

int cmd_oracle_check(const OracleArgs& a, int threads) {
  const ExperimentConfig cfg = load_config(a.config);
  if (!cfg.repumper) throw InvalidArgument("oracle-check: the config needs a repumper");
  if (a.points < 1) throw InvalidArgument("oracle-check: --points must be >= 1");
  const ScanModel model(cfg);
  // Sample points evenly among those with |dbar| > Gamma_DP.
  std::vector<double> eligible;
  for (double d : grid_detunings(cfg.grid))
    if (std::abs(cfg.repumper->detuning - d) > cfg.scheme.gamma_dp()) eligible.push_back(d);
  if (eligible.empty()) throw InvalidArgument("oracle-check: no grid point has |dbar| > Gamma_DP");
  std::vector<double> picks;
  const int n = std::min<int>(a.points, eligible.size());
  for (int i = 0; i < n; ++i) picks.push_back(eligible[n == 1 ? eligible.size() / 2 : i * (eligible.size() - 1) / (n - 1)]);

  std::vector<OracleComparison> rows(n);
  parallel_for(n, resolve_threads(threads), [&](int i) {
    LiouvillianSet s = model.three_laser() ? model.liouvillian_set(picks[i]) : LiouvillianSet{};
    if (!model.three_laser()) {
      s.L0 = model.two_laser_liouvillian(picks[i]);
      s.L_plus = s.L_minus = SuperOperator::Zero(kVecDim, kVecDim);
    }
    rows[i] = compare_with_oracle(s, cfg.floquet);
  });

  if (cfg.repumper->linewidth > 0.0)
    std::cout << "note: repumper linewidth ignored; both solvers run without relative phase diffusion\n";
  std::cout << "detuning_MHz  dbar_MHz  n_max  averaged          oracle            deviation\n";
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[i];
    worst = std::max(worst, r.deviation());
    std::printf("%12.3f  %8.3f  %5d  %.10e  %.10e  %.3e\n", units::rad_to_mhz(picks[i]),
                units::rad_to_mhz(cfg.repumper->detuning - picks[i]), r.n_max, r.floquet, r.oracle, r.deviation());
  }
  const bool pass = worst < a.tolerance;
  std::cout << "max deviation " << fmt("%.3e", worst) << (pass ? " < " : " >= ") << "tolerance " << fmt("%.3e", a.tolerance)
            << ": " << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? kOk : kHardFail;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data, config, out;
  std::vector<std::string> free, init, bounds;
};

int cmd_fit(const FitArgs& a, int threads) {
  Run run("fit");
  const ExperimentConfig cfg = load_config(a.config);
  std::vector<FitParameter> free = parse_free(a.free, a.init, a.bounds);
  const SpectrumFile data = read_spectrum_csv(a.data);
  check_grid(data, a.data);

  FitProblem pb;
  pb.observed = data.curve;
  pb.config = cfg;
  pb.free = std::move(free);
  pb.threads = threads;
  const FitResult r = fit_spectrum(pb);

  run.manifest.config_snapshot = to_ini(cfg);
  run.manifest.inputs = {a.data, a.config};
  run.manifest.outputs = {a.out};
  std::ofstream out(a.out);
  if (!out) throw Error(a.out + ": cannot write");
  write_fit_report(out, r, run.manifest.hash());
  out.close();
  run.finish(a.out);
  print_estimates(r);
  if (!r.converged) {
    std::cerr << "error: fit did not converge (" << r.reason << "); report kept in " << a.out << "\n";
    return kHardFail;
  }
  if (!r.identifiable) {
    std::cerr << "warning: some parameters are not identifiable from these data\n";
    return kSoftFail;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct PolarimetryArgs {
  std::string mode, data, config, calibration, out;
  std::vector<double> depths;
  bool free_scale = false, free_offset = false;
};

int polarimetry_probe(const PolarimetryArgs& a, int threads, Run& run) {
  if (a.data.empty() || a.config.empty()) throw InvalidArgument("polarimetry probe: --data and --config are required");
  const ExperimentConfig cfg = load_config(a.config);
  const SpectrumFile data = read_spectrum_csv(a.data);
  check_grid(data, a.data);
  AngleOptions opt;
  opt.free_scale = a.free_scale;
  opt.free_offset = a.free_offset;
  opt.threads = threads;
  const AngleEstimate est = estimate_probe_angle(data.curve, cfg, opt);

  run.manifest.config_snapshot = to_ini(cfg);
  run.manifest.inputs = {a.data, a.config};
  run.manifest.outputs = {a.out};
  std::ofstream out(a.out);
  if (!out) throw Error(a.out + ": cannot write");
  write_fit_report(out, est.fit, run.manifest.hash());
  out << "# alpha_pr_deg=" << format_number(est.alpha_deg) << "\n# sigma_deg=" << format_number(est.sigma_deg)
      << "\n# start_deg=" << format_number(est.start_deg) << "\n";
  out.close();
  std::cout << "alpha_pr = " << fmt("%.3f", est.alpha_deg) << " +- " << fmt("%.3f", est.sigma_deg) << " deg\n";
  if (!est.converged) {
    std::cerr << "error: fit did not converge (" << est.fit.reason << ")\n";
    return kHardFail;
  }
  if (!est.identifiable) {
    std::cerr << "warning: the probe angle is not identifiable from this spectrum\n";
    return kSoftFail;
  }
  return kOk;
}

int polarimetry_kicking(const PolarimetryArgs& a, int threads, Run& run) {
  if (a.calibration.empty()) throw InvalidArgument("polarimetry kicking: --calibration is required");
  std::ifstream cal_in(a.calibration);
  if (!cal_in) throw Error(a.calibration + ": cannot open");
  const KickingCalibration cal = KickingCalibration::read_csv(cal_in, a.calibration);
  run.manifest.inputs = {a.calibration};

  DepthVector d{};
  if (!a.depths.empty()) {
    if (a.depths.size() != 4) throw InvalidArgument("--depths expects 4 values");
    std::copy(a.depths.begin(), a.depths.end(), d.begin());
  } else {
    if (a.data.empty() || a.config.empty())
      throw InvalidArgument("polarimetry kicking: give --depths, or --data with --config");
    const SpectrumFile data = read_spectrum_csv(a.data);
    d = depth_vector(data.curve, sigma_resonances(load_config(a.config)));
    run.manifest.inputs.push_back(a.data);
  }
  if (!a.config.empty()) {
    const ExperimentConfig cfg = load_config(a.config);
    if (kicking_config_hash(cfg) != cal.config_hash)
      throw InvalidArgument("calibration " + a.calibration + " was built for other settings (hash " + cal.config_hash +
                            ", config gives " + kicking_config_hash(cfg) + ")");
    run.manifest.config_snapshot = to_ini(cfg);
    run.manifest.inputs.push_back(a.config);
  }
  (void)threads;
  const RepumperAngleEstimate est = estimate_repumper_angle(d, cal);

  run.manifest.outputs = {a.out};
  std::ofstream out(a.out);
  if (!out) throw Error(a.out + ": cannot write");
  out << "# manifest_hash=" << run.manifest.hash() << "\n"
      << "alpha_rep_deg,sigma_deg,distance,extrapolated,depth1,depth2,depth3,depth4\n"
      << format_number(est.alpha_deg) << "," << format_number(est.sigma_deg) << "," << format_number(est.distance) << ","
      << (est.extrapolated ? "true" : "false");
  for (double v : d) out << "," << format_number(v);
  out << "\n";
  out.close();
  std::cout << "alpha_rep = " << fmt("%.3f", est.alpha_deg) << " +- " << fmt("%.3f", est.sigma_deg) << " deg\n";
  if (est.extrapolated) {
    std::cerr << "warning: depths lie outside the calibration's convex hull; estimate is an extrapolation\n";
    return kSoftFail;
  }
  return kOk;
}

int cmd_polarimetry(const PolarimetryArgs& a, int threads) {
  Run run("polarimetry " + a.mode);
  const int code = a.mode == "probe" ? polarimetry_probe(a, threads, run) : polarimetry_kicking(a, threads, run);
  run.finish(a.out);
  return code;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
  std::string config, out;
  double step = 5.0;
};

int cmd_calibrate(const CalibrateArgs& a, int threads) {
  Run run("calibrate");
  const ExperimentConfig cfg = load_config(a.config);
  ScanOptions so;
  so.threads = threads;
  const KickingCalibration cal = build_kicking_calibration(cfg, a.step, so);
  run.manifest.config_snapshot = to_ini(cfg);
  run.manifest.inputs = {a.config};
  run.manifest.outputs = {a.out};
  std::ofstream out(a.out);
  if (!out) throw Error(a.out + ": cannot write");
  out << "# manifest_hash=" << run.manifest.hash() << "\n";
  cal.write_csv(out);
  out.close();
  run.finish(a.out);
  std::cout << cal.alpha_deg.size() << " angles written to " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dark-resonance spectra of 40Ca+ with two or three lasers"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads for scans (0: all cores; CPTSPEC_THREADS caps it)")->check(CLI::NonNegativeNumber);

  SpectrumArgs sa;
  auto* spectrum = app.add_subcommand("spectrum", "Simulate a probe scan and write it as CSV");
  spectrum->add_option("config", sa.config, "Experiment config (INI)")->required()->check(CLI::ExistingFile);
  spectrum->add_option("-o,--out", sa.out, "Output CSV")->required();
  spectrum->add_option("--plot", sa.plot, "Also write an SVG plot here");
  spectrum->add_option("--title", sa.title, "Plot title");
  spectrum->add_flag("--noise", sa.noise, "Replace values by Poisson counts (detector.scale sets the count level)");
  spectrum->add_option("--seed", sa.seed, "Noise seed");

  OracleArgs oa;
  auto* oracle = app.add_subcommand("oracle-check", "Compare the averaged solution with direct time integration");
  oracle->add_option("config", oa.config, "Experiment config with a repumper")->required()->check(CLI::ExistingFile);
  oracle->add_option("--tolerance", oa.tolerance, "Largest allowed fluorescence deviation")->check(CLI::PositiveNumber);
  oracle->add_option("--points", oa.points, "Number of sampled grid points");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit a model to a spectrum CSV");
  fit->add_option("data", fa.data, "Spectrum CSV")->required()->check(CLI::ExistingFile);
  fit->add_option("config", fa.config, "Config with the starting values")->required()->check(CLI::ExistingFile);
  fit->add_option("--free", fa.free, "Free parameters: " + valid_param_names())->required()->delimiter(',');
  fit->add_option("--init", fa.init, "Starting value, name=value")->delimiter(',');
  fit->add_option("--bounds", fa.bounds, "Bounds, name=lower:upper")->delimiter(',');
  fit->add_option("-o,--out", fa.out, "Report CSV")->required();

  PolarimetryArgs pa;
  auto* pol = app.add_subcommand("polarimetry", "Estimate a polarization angle");
  pol->add_option("mode", pa.mode, "probe or kicking")->required()->check(CLI::IsMember({"probe", "kicking"}));
  pol->add_option("--data", pa.data, "Spectrum CSV")->check(CLI::ExistingFile);
  pol->add_option("--config", pa.config, "Known settings")->check(CLI::ExistingFile);
  pol->add_option("--calibration", pa.calibration, "Kicking calibration CSV")->check(CLI::ExistingFile);
  pol->add_option("--depths", pa.depths, "Four resonance depths (kicking)")->delimiter(',');
  pol->add_flag("--free-scale", pa.free_scale, "Fit the detector scale as well (probe)");
  pol->add_flag("--free-offset", pa.free_offset, "Fit the detector offset as well (probe)");
  pol->add_option("-o,--out", pa.out, "Report CSV")->required();

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "Build a kicking calibration over the repumper angle");
  cal->add_option("config", ca.config, "Settings (the repumper angle is varied)")->required()->check(CLI::ExistingFile);
  cal->add_option("--step", ca.step, "Angle step in degrees (must divide 90)")->check(CLI::PositiveNumber);
  cal->add_option("-o,--out", ca.out, "Calibration CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kHardFail;
  }

  try {
    if (*spectrum) return cmd_spectrum(sa, threads);
    if (*oracle) return cmd_oracle_check(oa, threads);
    if (*fit) return cmd_fit(fa, threads);
    if (*pol) return cmd_polarimetry(pa, threads);
    if (*cal) return cmd_calibrate(ca, threads);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config\n";
    for (const auto& m : e.errors()) std::cerr << "  " << m << "\n";
    return kHardFail;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kHardFail;
  }
  return kHardFail;
}
