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

// Acceptance suite: nine end-to-end criteria, one PASS/FAIL line each.
//
//   acceptance [--only 1,3,9] [--expect-fail 5,7]
//
// Without --expect-fail the exit code is 0 when every criterion passes. With
// it, the exit code is 0 when the failing criteria are exactly the listed ones.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cptspec/dynamics.hpp"
#include "cptspec/inference.hpp"
#include "cptspec/spectra.hpp"
#include "test_support.hpp"

using namespace cptspec;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fixed(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Random three-laser settings around the reference configuration.
ExperimentConfig random_three_laser(std::mt19937_64& rng) {
  ExperimentConfig c = fixtures::reference_config();
  c.doppler.saturation = uniform(rng, 0.2, 2.0);
  c.doppler.detuning = units::mhz_to_rad(uniform(rng, -25.0, -5.0));
  c.probe.saturation = uniform(rng, 1.0, 15.0);
  c.probe.polarization = Polarization::linear(units::deg_to_rad(uniform(rng, 0.0, 90.0)));
  set_param(c, FitParam::B, uniform(rng, 1.0, 6.0));
  c.environment.temperature = uniform(rng, 0.0, 5e-3);
  LaserField rep{Transition::DP};
  rep.saturation = uniform(rng, 0.5, 15.0);
  rep.detuning = units::mhz_to_rad(uniform(rng, -40.0, 40.0));
  rep.linewidth = units::mhz_to_rad(uniform(rng, 0.0, 0.3));
  rep.polarization = Polarization::linear(units::deg_to_rad(uniform(rng, 0.0, 90.0)));
  c.repumper = rep;
  return c;
}

// Expected counts peaking near `peak` on the config's own grid.
ExperimentConfig with_peak_counts(ExperimentConfig c, double peak, double offset = 0.0) {
  const auto pop = model_populations(c, grid_detunings(c.grid));
  c.detector = {peak / *std::max_element(pop.begin(), pop.end()), offset};
  return c;
}

SpectrumCurve synthetic(const ExperimentConfig& c) {
  SpectrumCurve s = probe_scan(c);
  s.diagnostics.clear();
  return s;
}

// ---------------------------------------------------------------------------

Outcome reduction_identity() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ExperimentConfig c = random_three_laser(rng);
    const double probe = units::mhz_to_rad(uniform(rng, -40.0, 20.0));
    LaserField rep = *c.repumper;
    rep.saturation = 0.0;
    LaserField pr = c.probe;
    pr.detuning = probe;
    const LiouvillianSet s = build_liouvillian_set(c.doppler, pr, rep, c.environment, c.scheme);
    const AveragedState three = averaged_steady_state(s);
    c.repumper.reset();
    const SpectrumPoint two = ScanModel(c).solve(probe);
    ValidityAudit::global().record(three.state);
    worst = std::max(worst, (three.state.rho - two.state.rho).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-12, "max |rho_three - rho_two| = " + sci(worst) + " over 20 configs (tol 1e-12)"};
}

Outcome floquet_oracle() {
  double worst = 0.0;
  int points = 0;
  auto check = [&](const LiouvillianSet& s, const FloquetConfig& f) {
    LiouvillianSet coherent = s;
    coherent.relative_dephasing = 0.0;
    ValidityAudit::global().record(averaged_steady_state(coherent, f).state);
    worst = std::max(worst, compare_with_oracle(s, f).deviation());
    ++points;
  };

  const ExperimentConfig fig2 = fixtures::load("fig2.ini");
  const double gamma_dp = fig2.scheme.gamma_dp();
  std::vector<double> eligible;
  for (double d : grid_detunings(fig2.grid))
    if (std::abs(fig2.repumper->detuning - d) > gamma_dp) eligible.push_back(d);
  const ScanModel model(fig2);
  for (int i = 0; i < 7; ++i) check(model.liouvillian_set(eligible[i * (eligible.size() - 1) / 6]), fig2.floquet);

  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 10; ++trial) {
    const ExperimentConfig c = random_three_laser(rng);
    double probe;
    do {
      probe = units::mhz_to_rad(uniform(rng, -40.0, 40.0));
    } while (std::abs(c.repumper->detuning - probe) <= c.scheme.gamma_dp());
    check(ScanModel(c).liouvillian_set(probe), c.floquet);
  }
  return {worst < 1e-4, "max |averaged - period mean| = " + sci(worst) + " over " + std::to_string(points) +
                            " points (7 from fig2.ini, 10 random; tol 1e-4)"};
}

Outcome resonance_counts() {
  auto minima = [](const char* name) { return find_minima_positions(synthetic(fixtures::load(name))).size(); };
  const std::size_t a = minima("fig1a.ini"), b = minima("fig1b.ini"), r = minima("fig1c_repumper.ini");
  const SpectrumCurve pi = synthetic(fixtures::load("fig1c.ini"));
  const ExperimentConfig pi_cfg = fixtures::load("fig1c.ini");
  double pi_max = 0.0;
  for (double v : pi.fluorescence) pi_max = std::max(pi_max, (v - pi_cfg.detector.offset) / pi_cfg.detector.scale);
  const std::size_t pi_minima = find_minima_positions(pi).size();
  const bool pass = a == 4 && b == 6 && r == 2 && pi_max < 1e-8 && pi_minima == 0;
  return {pass, "minima 90deg " + std::to_string(a) + "/4, 15deg " + std::to_string(b) + "/6, pi+repumper " +
                    std::to_string(r) + "/2; pi alone max population " + sci(pi_max) + " (< 1e-8), " +
                    std::to_string(pi_minima) + " minima"};
}

// Largest distance from a predicted position to the nearest minimum, or inf on a count mismatch.
double position_error(const ExperimentConfig& c) {
  const auto found = find_minima_positions(synthetic(c));
  const auto predicted = predict_resonance_positions(c);
  if (found.size() != predicted.size()) return INFINITY;
  double worst = 0.0;
  for (const auto& p : predicted) {
    double best = INFINITY;
    for (double m : found) best = std::min(best, std::abs(m - p.position));
    worst = std::max(worst, best);
  }
  return units::rad_to_mhz(worst);
}

Outcome resonance_positions() {
  // The Raman condition locates the dark states; at finite temperature the
  // broadened dips sit on a sloped background and their minima are pulled, so
  // the law is checked at T = 0 and the pull at 4.7 mK is reported.
  std::ostringstream d;
  bool pass = true;
  double pull = 0.0;
  for (double b : {2.0, 3.7, 6.0}) {
    ExperimentConfig c = fixtures::load("fig4.ini");
    c.grid = {-40.0, 20.0, 0.25};
    set_param(c, FitParam::B, b);
    ExperimentConfig cold = c;
    cold.environment.temperature = 0.0;
    const double err = position_error(cold);
    pass = pass && err <= c.grid.step_mhz;
    d << "B=" << fixed(b, 1) << "G " << (std::isfinite(err) ? fixed(err, 3) : "count mismatch") << " MHz; ";
    pull = std::max(pull, position_error(c));
  }
  d << "step 0.25 MHz at T=0 (largest thermal pull at 4.7 mK: " << fixed(pull, 3) << " MHz)";
  return {pass, d.str()};
}

Outcome kicking_phenomenology() {
  auto depths = [](const char* name) { return sigma_depths(fixtures::load(name)); };
  const std::array<DepthVector, 3> pi{depths("fig6a_s0.ini"), depths("fig6a_s1.61.ini"), depths("fig6a_s7.23.ini")};
  const std::array<DepthVector, 3> sg{depths("fig6b_s0.ini"), depths("fig6b_s2.68.ini"), depths("fig6b_s9.31.ini")};
  auto decreasing = [](const std::array<DepthVector, 3>& v, int k) { return v[0][k] > v[1][k] && v[1][k] > v[2][k]; };
  std::ostringstream d;
  bool pass = true;
  std::vector<std::string> failures;
  for (int k : {1, 2})
    if (!decreasing(pi, k)) failures.push_back("pi middle " + std::to_string(k + 1) + " not strictly decreasing");
  for (int k : {0, 3})
    for (int s : {1, 2}) {
      const double change = std::abs(pi[s][k] / pi[0][k] - 1.0);
      if (!(change < 0.2)) failures.push_back("pi outer " + std::to_string(k + 1) + " changes " + fixed(100 * change, 0) + "%");
    }
  for (int k = 0; k < 4; ++k)
    if (!decreasing(sg, k)) failures.push_back("sigma " + std::to_string(k + 1) + " not strictly decreasing");
  pass = failures.empty();
  auto row = [&](const char* label, const std::array<DepthVector, 3>& v) {
    d << label << " [";
    for (int s = 0; s < 3; ++s) {
      d << (s ? " | " : "");
      for (int k = 0; k < 4; ++k) d << (k ? " " : "") << fixed(v[s][k], 3);
    }
    d << "]";
  };
  row("pi", pi);
  d << " ";
  row("sigma", sg);
  for (const auto& f : failures) d << "; " << f;
  return {pass, d.str()};
}

Outcome fit_recovery() {
  const ExperimentConfig truth = with_peak_counts(fixtures::load("fig4.ini"), 1e4, 100.0);
  const SpectrumCurve expected = synthetic(truth);
  const std::array<FitParam, 5> checked{FitParam::B, FitParam::T, FitParam::SDop, FitParam::SPr, FitParam::DeltaDop};
  int covered = 0, failed_fits = 0;
  std::array<int, 5> misses{};
  for (int seed = 0; seed < 50; ++seed) {
    FitProblem pb;
    pb.observed = with_poisson_noise(expected, 5000 + seed);
    pb.config = truth;
    pb.free = {{FitParam::SDop, 0.6},       {FitParam::SPr, 9.0}, {FitParam::DeltaDop, -9.5},
               {FitParam::B, 3.5},          {FitParam::T, 4.0},   {FitParam::Scale, 0.9 * truth.detector.scale},
               {FitParam::Offset, 50.0}};
    FitResult r;
    try {
      r = fit_spectrum(pb);
    } catch (const Error&) {
      ++failed_fits;
      continue;
    }
    bool all = r.converged;
    for (std::size_t k = 0; k < checked.size(); ++k) {
      const FitEstimate& e = r.at(checked[k]);
      const bool in = std::abs(e.value - get_param(truth, checked[k])) <= 3.0 * e.sigma;
      if (!in) ++misses[k];
      all = all && in;
    }
    covered += all;
  }
  std::ostringstream d;
  d << covered << "/50 seeds with B, T, S_dop, S_pr, delta_dop all within 3 sigma (need 45); misses per parameter "
    << misses[0] << "," << misses[1] << "," << misses[2] << "," << misses[3] << "," << misses[4];
  if (failed_fits) d << "; " << failed_fits << " fits threw";
  return {covered >= 45, d.str()};
}

Outcome polarimetry_accuracy() {
  constexpr int kSeeds = 20;
  constexpr std::array<double, 4> kAngles{0.0, 15.0, 45.0, 90.0};
  std::ostringstream d;
  bool pass = true;

  // Probe angle, repumper on, over the resonance region on a 1 MHz grid.
  ExperimentConfig probe_base = fixtures::load("fig5_alpha15.ini");
  probe_base.grid = {-35.0, 35.0, 1.0};
  auto cache = std::make_shared<ModelCache>();
  d << "probe medians";
  for (double alpha : kAngles) {
    ExperimentConfig truth = probe_base;
    set_param(truth, FitParam::AlphaPr, alpha);
    truth = with_peak_counts(truth, 1e4);
    const SpectrumCurve expected = synthetic(truth);
    std::vector<double> est;
    for (int seed = 0; seed < kSeeds; ++seed) {
      AngleOptions opt;
      opt.cache = cache;
      est.push_back(estimate_probe_angle(with_poisson_noise(expected, 7000 + seed), truth, opt).alpha_deg);
    }
    const double m = median(est);
    pass = pass && std::abs(m - alpha) < 2.0;
    d << " " << fixed(alpha, 0) << ":" << fixed(m, 2);
  }

  // Repumper angle from the four sigma depths of full synthetic spectra.
  const ExperimentConfig kick_base = fixtures::load("fig7.ini");
  const KickingCalibration cal = build_kicking_calibration(kick_base, 5.0);
  d << " (tol 2); kicking medians";
  for (double alpha : kAngles) {
    ExperimentConfig truth = kick_base;
    set_param(truth, FitParam::AlphaRep, alpha);
    truth = with_peak_counts(truth, 1e4);
    const SpectrumCurve expected = synthetic(truth);
    const ResonanceSet sigma = sigma_resonances(truth);
    std::vector<double> est;
    for (int seed = 0; seed < kSeeds; ++seed)
      est.push_back(estimate_repumper_angle(depth_vector(with_poisson_noise(expected, 9000 + seed), sigma), cal).alpha_deg);
    const double m = median(est);
    pass = pass && std::abs(m - alpha) < 3.0;
    d << " " << fixed(alpha, 0) << ":" << fixed(m, 2);
  }
  d << " (tol 3); " << kSeeds << " seeds, ~1e4 peak counts";
  return {pass, d.str()};
}

Outcome dd_resonances() {
  const ExperimentConfig base = fixtures::load("fig8.ini");
  LinewidthOptions opt;
  opt.half_window_mhz = 4.0;
  opt.step_mhz = 0.1;
  const std::array<double, 3> temps{5.0, 20.0, 50.0};
  const ResonanceSet sd = predict_resonance_positions(base);
  const ResonanceSet dd = predict_dd_resonance_positions(base);
  // fwhm[geometry][temperature][resonance]
  std::vector<std::vector<double>> sd_co, dd_co, dd_counter;
  bool fits_ok = true;
  auto widths = [&](const ExperimentConfig& c, const ResonanceSet& r) {
    std::vector<double> out;
    for (const auto& f : resonance_linewidths(c, r, opt)) {
      fits_ok = fits_ok && f.ok;
      out.push_back(f.fwhm_mhz);
    }
    return out;
  };
  for (double t : temps) {
    ExperimentConfig c = base;
    c.environment.temperature = t * 1e-3;
    c.repumper->k_hat = c.probe.k_hat;
    sd_co.push_back(widths(c, sd));
    dd_co.push_back(widths(c, dd));
    c.repumper->k_hat = -c.probe.k_hat;
    dd_counter.push_back(widths(c, dd));
  }
  auto increasing = [](const std::vector<std::vector<double>>& w) {
    for (std::size_t k = 0; k < w[0].size(); ++k)
      for (std::size_t i = 1; i < w.size(); ++i)
        if (!(w[i][k] > w[i - 1][k])) return false;
    return !w[0].empty();
  };
  double co_change = 0.0;
  for (std::size_t k = 0; k < dd_co[0].size(); ++k) co_change = std::max(co_change, std::abs(dd_co[2][k] / dd_co[0][k] - 1.0));
  const bool sd_up = increasing(sd_co), counter_up = increasing(dd_counter);
  const bool pass = fits_ok && dd.size() >= 1 && sd.size() >= 1 && co_change < 0.01 && sd_up && counter_up;
  std::ostringstream d;
  d << "collinear D-D FWHM change 5->50 mK " << fixed(100 * co_change, 2) << "% (< 1%); collinear S-D FWHM "
    << fixed(sd_co[0][0], 2) << "->" << fixed(sd_co[1][0], 2) << "->" << fixed(sd_co[2][0], 2) << " MHz "
    << (sd_up ? "increasing" : "NOT increasing") << "; counter-propagating D-D " << fixed(dd_counter[0][0], 2) << "->"
    << fixed(dd_counter[1][0], 2) << "->" << fixed(dd_counter[2][0], 2) << " MHz "
    << (counter_up ? "increasing" : "NOT increasing");
  if (!fits_ok) d << "; some Lorentzian fits failed";
  return {pass, d.str()};
}

Outcome state_validity() {
  const ValidityAudit::Summary s = ValidityAudit::global().summary();
  std::ostringstream d;
  d << s.states << " steady states audited, " << s.invalid << " invalid; worst hermiticity " << sci(s.worst.hermiticity)
    << ", |tr-1| " << sci(s.worst.trace_error) << ", min eigenvalue " << sci(s.worst.min_eigenvalue);
  return {s.states > 0 && s.invalid == 0, d.str()};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, expected;
  bool expect_given = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if ((a == "--only" || a == "--expect-fail") && i + 1 < argc) {
      (a == "--only" ? only : expected) = parse_list(argv[++i]);
      expect_given = expect_given || a == "--expect-fail";
    } else {
      std::cerr << "usage: acceptance [--only LIST] [--expect-fail LIST]\n";
      return 2;
    }
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "reduction identity", reduction_identity},
      {2, "averaged solution vs time integration", floquet_oracle},
      {3, "resonance counts", resonance_counts},
      {4, "resonance positions", resonance_positions},
      {5, "kicking phenomenology", kicking_phenomenology},
      {6, "fit recovery", fit_recovery},
      {7, "polarimetry accuracy", polarimetry_accuracy},
      {8, "D-D resonance linewidths", dd_resonances},
      {9, "state validity", state_validity},
  };

  ValidityAudit::global().enable();
  std::set<int> failed;
  int ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++ran;
    if (!o.pass) failed.insert(c.id);
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " ["
              << fixed(dt, 1) << " s]" << std::endl;
  }

  std::cout << ran - static_cast<int>(failed.size()) << "/" << ran << " criteria passed";
  if (!failed.empty()) {
    std::cout << "; failed:";
    for (int f : failed) std::cout << " " << f;
  }
  std::cout << "\n";
  if (!expect_given) return failed.empty() ? 0 : 1;
  std::set<int> expected_ran;
  for (int e : expected)
    if (only.empty() || only.count(e)) expected_ran.insert(e);
  if (failed == expected_ran) {
    if (!failed.empty()) std::cout << "failures match the documented expected set\n";
    return 0;
  }
  std::cout << "failures differ from the expected set\n";
  return 1;
}
