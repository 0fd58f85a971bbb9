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
 * @file spectra.hpp
 * @brief Probe-detuning scans, dark-resonance positions and depths.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cptspec/dynamics.hpp"
#include "cptspec/parallel.hpp"

namespace cptspec {

/// Counts = scale * (rho_33 + rho_44) + offset.
struct Detector {
  double scale = 1.0;
  double offset = 0.0;
};

/// Probe-detuning grid in MHz, both ends inclusive.
struct ScanGrid {
  double start_mhz = -49.8;
  double stop_mhz = 50.2;
  double step_mhz = 0.25;

  /// Default window [Delta_dop - 40, Delta_dop + 60] MHz at 0.25 MHz.
  static ScanGrid around(double doppler_detuning_mhz) {
    return {doppler_detuning_mhz - 40.0, doppler_detuning_mhz + 60.0, 0.25};
  }

  int size() const {
    if (!(step_mhz > 0.0) || !(stop_mhz >= start_mhz)) return 0;
    return static_cast<int>(std::floor((stop_mhz - start_mhz) / step_mhz + 1e-9)) + 1;
  }

  std::vector<double> points_mhz() const {
    std::vector<double> out(size());
    for (int i = 0; i < size(); ++i) out[i] = start_mhz + i * step_mhz;
    return out;
  }

  void validate() const {
    if (!std::isfinite(start_mhz) || !std::isfinite(stop_mhz)) throw InvalidArgument("scan: bounds must be finite");
    if (!(step_mhz > 0.0)) throw InvalidArgument("scan.step_mhz: must be > 0");
    if (!(stop_mhz > start_mhz)) throw InvalidArgument("scan.stop_mhz: grid must be strictly increasing (stop > start)");
  }
};

struct ExperimentConfig {
  LevelScheme scheme;
  LaserField doppler{Transition::SP};
  LaserField probe{Transition::DP};
  std::optional<LaserField> repumper;
  Environment environment;
  Detector detector;
  ScanGrid grid;
  FloquetConfig floquet;

  bool has_repumper() const { return repumper.has_value(); }

  void validate() const {
    scheme.validate();
    if (doppler.transition != Transition::SP) throw InvalidArgument("doppler.transition: must be S-P");
    if (probe.transition != Transition::DP) throw InvalidArgument("probe.transition: must be D-P");
    doppler.validate("doppler");
    probe.validate("probe");
    if (repumper) {
      if (repumper->transition != Transition::DP) throw InvalidArgument("repumper.transition: must be D-P");
      repumper->validate("repumper");
    }
    environment.validate();
    if (!(detector.scale > 0.0)) throw InvalidArgument("detector.scale: must be > 0");
    if (!std::isfinite(detector.offset)) throw InvalidArgument("detector.offset: must be finite");
    grid.validate();
    floquet.validate();
  }
};

enum class PointFlag { Ok, Degenerate, Bichromatic, Failed };

inline std::string to_string(PointFlag f) {
  switch (f) {
    case PointFlag::Ok: return "ok";
    case PointFlag::Degenerate: return "degenerate";
    case PointFlag::Bichromatic: return "bichromatic";
    case PointFlag::Failed: return "failed";
  }
  return "failed";
}

inline PointFlag point_flag_from_string(const std::string& s) {
  if (s == "ok") return PointFlag::Ok;
  if (s == "degenerate") return PointFlag::Degenerate;
  if (s == "bichromatic") return PointFlag::Bichromatic;
  if (s == "failed") return PointFlag::Failed;
  throw InvalidArgument("unknown point flag '" + s + "'");
}

struct PointDiagnostics {
  PointFlag flag = PointFlag::Ok;
  double residual = 0.0;
  int n_max = 0;  // 0 for two-laser points
  StateValidity validity;
  std::string message;
};

struct SpectrumPoint {
  double population = 0.0;  // rho_33 + rho_44
  DensityMatrix state;
  PointDiagnostics diag;
};

struct SpectrumCurve {
  std::vector<double> detuning;      // probe detuning, rad/s
  std::vector<double> fluorescence;  // scale * population + offset (or counts)
  std::vector<PointDiagnostics> diagnostics;
  double scale = 1.0;
  double offset = 0.0;
  bool noisy = false;  // fluorescence holds Poisson counts

  std::size_t size() const { return detuning.size(); }
  std::vector<double> detuning_mhz() const {
    std::vector<double> out(detuning.size());
    std::transform(detuning.begin(), detuning.end(), out.begin(), units::rad_to_mhz);
    return out;
  }
  int failed_points() const {
    return static_cast<int>(std::count_if(diagnostics.begin(), diagnostics.end(),
                                          [](const PointDiagnostics& d) { return d.flag == PointFlag::Failed; }));
  }
  /// Per-point standard deviation: sqrt(counts) for Poisson data, 1 otherwise.
  std::vector<double> sigma() const {
    std::vector<double> s(fluorescence.size(), 1.0);
    if (noisy)
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(std::max(fluorescence[i], 1.0));
    return s;
  }
};

/**
 * Everything in a scan that does not depend on the probe detuning, built once.
 * H0 depends on Delta_pr only through +Delta_pr on the D diagonal, so
 * L0(Delta_pr) = L0(0) + Delta_pr G with G = -i[Pi_D, .].
 */
class ScanModel {
 public:
  explicit ScanModel(const ExperimentConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    LaserField probe = cfg_.probe;
    probe.detuning = 0.0;
    if (cfg_.repumper && cfg_.repumper->saturation > 0.0) {
      set_ = build_liouvillian_set(cfg_.doppler, probe, *cfg_.repumper, cfg_.environment, cfg_.scheme);
      three_laser_ = true;
    } else {
      set_.L0 = build_two_laser_L0(cfg_.doppler, probe, cfg_.environment, cfg_.scheme);
    }
    Matrix8c pd = Matrix8c::Zero();
    for (int i = 0; i < kNumStates; ++i)
      if (kBasis[i].manifold == Manifold::D) pd(i, i) = 1.0;
    shift_ = commutator_superoperator(pd).diagonal();
    if (!three_laser_) {
      real_base_ = hermitian_real_form(set_.L0);
      SuperOperator g = SuperOperator::Zero(kVecDim, kVecDim);
      g.diagonal() = shift_;
      real_shift_ = hermitian_real_form(g);
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  bool three_laser() const { return three_laser_; }

  SuperOperator two_laser_liouvillian(double probe_detuning) const {
    SuperOperator l = set_.L0;
    l.diagonal() += probe_detuning * shift_;
    return l;
  }

  LiouvillianSet liouvillian_set(double probe_detuning) const {
    LiouvillianSet s = set_;
    s.L0.diagonal() += probe_detuning * shift_;
    if (three_laser_) s.modulation = cfg_.repumper->detuning - probe_detuning;
    return s;
  }

  /// Steady state at one probe detuning (rad/s). Failures are reported, not thrown.
  SpectrumPoint solve(double probe_detuning) const {
    SpectrumPoint pt;
    try {
      if (three_laser_) {
        solve_three(probe_detuning, pt);
      } else {
        solve_two(probe_detuning, pt);
      }
      pt.population = pt.state.excited_population();
      pt.diag.validity = check_state(pt.state);
      ValidityAudit::global().record(pt.diag.validity);
    } catch (const Error& e) {
      pt.population = std::numeric_limits<double>::quiet_NaN();
      pt.diag.flag = PointFlag::Failed;
      pt.diag.message = e.what();
    }
    return pt;
  }

 private:
  void solve_two(double delta, SpectrumPoint& pt) const {
    const SuperOperator l = two_laser_liouvillian(delta);
    Eigen::MatrixXd a = real_base_ + delta * real_shift_;
    const double scale = a.cwiseAbs().maxCoeff();
    a /= scale;
    a.row(0).setZero();
    a.row(0).head(kNumStates).setOnes();
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
    if (!lu_is_regular(lu, 1e-15)) {
      const SteadyState ss = solve_stationary(l, cfg_.floquet.policy);
      pt.state = ss.state;
      pt.diag.residual = ss.residual;
      pt.diag.flag = PointFlag::Degenerate;
      return;
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(kVecDim);
    rhs(0) = 1.0;
    pt.state = from_hermitian_coordinates(lu.solve(rhs));
    pt.diag.residual = relative_residual(l, vectorize(pt.state));
  }

  void solve_three(double delta, SpectrumPoint& pt) const {
    const LiouvillianSet s = liouvillian_set(delta);
    const double threshold = 1e-3 * cfg_.scheme.gamma_dp();
    if (std::abs(s.modulation) < threshold && s.relative_dephasing < threshold) {
      // Both D-P fields at one frequency: a single static bichromatic coupling.
      const SteadyState ss = solve_stationary(s.at(0.0), cfg_.floquet.policy);
      pt.state = ss.state;
      pt.diag.residual = ss.residual;
      pt.diag.flag = PointFlag::Bichromatic;
      return;
    }
    const AveragedState av =
        cfg_.floquet.oracle_check ? oracle_checked_state(s, cfg_.floquet) : averaged_steady_state(s, cfg_.floquet);
    pt.state = av.state;
    pt.diag.residual = av.residual;
    pt.diag.n_max = av.n_max;
    if (av.degenerate) pt.diag.flag = PointFlag::Degenerate;
  }

  ExperimentConfig cfg_;
  LiouvillianSet set_;
  Eigen::VectorXcd shift_;
  Eigen::MatrixXd real_base_;
  Eigen::MatrixXd real_shift_;
  bool three_laser_ = false;
};

struct ScanOptions {
  int threads = 0;             // 0: hardware concurrency (capped by CPTSPEC_THREADS)
  bool keep_states = false;    // retain every density matrix (memory: 1 KiB per point)
};

struct ScanResult {
  SpectrumCurve curve;
  std::vector<DensityMatrix> states;  // empty unless keep_states
};

/// Fluorescence over arbitrary probe detunings (rad/s), in input order.
inline ScanResult scan_detunings(const ScanModel& model, const std::vector<double>& detunings,
                                 const ScanOptions& opt = {}) {
  const auto& cfg = model.config();
  ScanResult out;
  SpectrumCurve& c = out.curve;
  const int n = static_cast<int>(detunings.size());
  c.detuning = detunings;
  c.fluorescence.assign(n, 0.0);
  c.diagnostics.assign(n, {});
  c.scale = cfg.detector.scale;
  c.offset = cfg.detector.offset;
  if (opt.keep_states) out.states.assign(n, {});
  parallel_for(n, resolve_threads(opt.threads), [&](int i) {
    SpectrumPoint pt = model.solve(detunings[i]);
    c.fluorescence[i] = cfg.detector.scale * pt.population + cfg.detector.offset;
    c.diagnostics[i] = std::move(pt.diag);
    if (opt.keep_states) out.states[i] = pt.state;
  });
  return out;
}

inline std::vector<double> grid_detunings(const ScanGrid& grid) {
  std::vector<double> d = grid.points_mhz();
  std::transform(d.begin(), d.end(), d.begin(), units::mhz_to_rad);
  return d;
}

/// Probe scan over cfg.grid with the two- or three-laser solver as appropriate.
inline SpectrumCurve probe_scan(const ExperimentConfig& cfg, const ScanOptions& opt = {}) {
  const ScanModel model(cfg);
  return scan_detunings(model, grid_detunings(cfg.grid), opt).curve;
}

/// Scan across the repumper detuning, where D-D resonances appear.
inline SpectrumCurve dd_scan(const ExperimentConfig& cfg, const ScanOptions& opt = {}) {
  if (!cfg.repumper) throw InvalidArgument("dd_scan: a repumper is required");
  const double rep = units::rad_to_mhz(cfg.repumper->detuning);
  if (rep < cfg.grid.start_mhz || rep > cfg.grid.stop_mhz)
    throw InvalidArgument("dd_scan: repumper detuning must lie inside the scan window");
  return probe_scan(cfg, opt);
}

// ---------------------------------------------------------------------------
// Resonance positions and depths

enum class ResonanceKind { Sigma, Pi, DD };

inline std::string to_string(ResonanceKind k) {
  switch (k) {
    case ResonanceKind::Sigma: return "sigma";
    case ResonanceKind::Pi: return "pi";
    case ResonanceKind::DD: return "dd";
  }
  return "?";
}

struct Resonance {
  double position = 0.0;  // probe detuning, rad/s
  ResonanceKind kind = ResonanceKind::Sigma;
  /// Basis-index pairs sharing this position: (S, D) for S-D, (D_probe, D_repumper) for D-D.
  std::vector<std::pair<int, int>> pairs;
  double depth = std::numeric_limits<double>::quiet_NaN();
  bool clipped = false;  // depth window or background region ran off the grid
};

using ResonanceSet = std::vector<Resonance>;

namespace detail {

inline constexpr double kCouplingEps = 1e-12;

inline void add_resonance(ResonanceSet& set, double position, ResonanceKind kind, std::pair<int, int> pair) {
  for (auto& r : set) {
    if (std::abs(r.position - position) <= 1e-9 * std::max(1.0, std::abs(position)) && r.kind == kind) {
      r.pairs.push_back(pair);
      return;
    }
  }
  set.push_back({position, kind, {pair}});
}

inline void sort_resonances(ResonanceSet& set) {
  std::stable_sort(set.begin(), set.end(), [](const Resonance& a, const Resonance& b) { return a.position < b.position; });
}

}  // namespace detail

/**
 * S-D dark resonances: every (S, D) pair sharing a P sublevel through the
 * Doppler and probe couplings sits at Delta_pr = Delta_dop + z_S - z_D
 * (z the Zeeman shifts). Positions closer than 1e-9 relative are merged.
 */
inline ResonanceSet predict_resonance_positions(const ExperimentConfig& cfg) {
  const Matrix8c c_dop = coupling_matrix(Transition::SP, cfg.doppler.polarization);
  const Matrix8c c_pr = coupling_matrix(Transition::DP, cfg.probe.polarization);
  const auto z = zeeman_shifts(cfg.environment, cfg.scheme);
  ResonanceSet out;
  for (int s = 0; s < kNumStates; ++s) {
    if (kBasis[s].manifold != Manifold::S) continue;
    for (int d = 0; d < kNumStates; ++d) {
      if (kBasis[d].manifold != Manifold::D) continue;
      for (int p = kExcitedA; p <= kExcitedB; ++p) {
        if (std::abs(c_dop(s, p)) < detail::kCouplingEps || std::abs(c_pr(d, p)) < detail::kCouplingEps) continue;
        const ResonanceKind kind = kBasis[p].two_m == kBasis[d].two_m ? ResonanceKind::Pi : ResonanceKind::Sigma;
        detail::add_resonance(out, cfg.doppler.detuning + z[s] - z[d], kind, {s, d});
        break;
      }
    }
  }
  detail::sort_resonances(out);
  return out;
}

/**
 * D-D dark resonances between a probe-coupled and a repumper-coupled D
 * sublevel sharing a P sublevel: Delta_pr = Delta_rep + z_Drep - z_Dpr.
 * Pairs with the same sublevel are the trivial two-field coherence and skipped.
 */
inline ResonanceSet predict_dd_resonance_positions(const ExperimentConfig& cfg) {
  if (!cfg.repumper) return {};
  const Matrix8c c_pr = coupling_matrix(Transition::DP, cfg.probe.polarization);
  const Matrix8c c_rep = coupling_matrix(Transition::DP, cfg.repumper->polarization);
  const auto z = zeeman_shifts(cfg.environment, cfg.scheme);
  ResonanceSet out;
  for (int a = 0; a < kNumStates; ++a) {
    if (kBasis[a].manifold != Manifold::D) continue;
    for (int b = 0; b < kNumStates; ++b) {
      if (kBasis[b].manifold != Manifold::D || a == b) continue;
      for (int p = kExcitedA; p <= kExcitedB; ++p) {
        if (std::abs(c_pr(a, p)) < detail::kCouplingEps || std::abs(c_rep(b, p)) < detail::kCouplingEps) continue;
        detail::add_resonance(out, cfg.repumper->detuning + z[b] - z[a], ResonanceKind::DD, {a, b});
        break;
      }
    }
  }
  detail::sort_resonances(out);
  return out;
}

/// Index of the grid point closest to x (grid sorted ascending).
inline int nearest_index(const std::vector<double>& grid, double x) {
  if (grid.empty()) throw InvalidArgument("nearest_index: empty grid");
  const auto it = std::lower_bound(grid.begin(), grid.end(), x);
  if (it == grid.begin()) return 0;
  if (it == grid.end()) return static_cast<int>(grid.size()) - 1;
  const int i = static_cast<int>(it - grid.begin());
  return (x - grid[i - 1] <= grid[i] - x) ? i - 1 : i;
}

struct DepthOptions {
  int window = 3;          // minimum searched within +-window grid steps
  int background_outer = 10;  // background from points window < |i - i0| <= background_outer
};

/**
 * Depth of each resonance: (background - minimum) / background, with the
 * minimum taken within +-3 steps of the predicted position and the background
 * a quadratic fitted to the points 4..10 steps away on both sides, evaluated
 * at the minimum. The detector offset is removed first; results are clamped
 * to [0, 1]. Resonances off the grid get NaN and `clipped`.
 */
inline ResonanceSet resonance_depths(const SpectrumCurve& curve, ResonanceSet positions, const DepthOptions& opt = {}) {
  const int n = static_cast<int>(curve.size());
  for (auto& r : positions) {
    r.depth = std::numeric_limits<double>::quiet_NaN();
    r.clipped = false;
    if (n < 3 || r.position < curve.detuning.front() || r.position > curve.detuning.back()) {
      r.clipped = true;
      continue;
    }
    const int i0 = nearest_index(curve.detuning, r.position);
    if (i0 - opt.background_outer < 0 || i0 + opt.background_outer >= n) r.clipped = true;
    int imin = -1;
    for (int i = std::max(0, i0 - opt.window); i <= std::min(n - 1, i0 + opt.window); ++i)
      if (std::isfinite(curve.fluorescence[i]) && (imin < 0 || curve.fluorescence[i] < curve.fluorescence[imin])) imin = i;
    std::vector<double> xs, ys;
    for (int i = std::max(0, i0 - opt.background_outer); i <= std::min(n - 1, i0 + opt.background_outer); ++i) {
      if (std::abs(i - i0) <= opt.window || !std::isfinite(curve.fluorescence[i])) continue;
      xs.push_back(curve.detuning[i] - curve.detuning[i0]);
      ys.push_back(curve.fluorescence[i] - curve.offset);
    }
    if (imin < 0 || xs.size() < 3) {
      r.clipped = true;
      continue;
    }
    // Quadratic least squares in MHz-scaled coordinates for conditioning.
    Eigen::MatrixXd a(xs.size(), 3);
    Eigen::VectorXd y(ys.size());
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const double x = units::rad_to_mhz(xs[k]);
      a.row(k) << 1.0, x, x * x;
      y(k) = ys[k];
    }
    const Eigen::Vector3d c = a.colPivHouseholderQr().solve(y);
    const double xm = units::rad_to_mhz(curve.detuning[imin] - curve.detuning[i0]);
    const double bg = c(0) + c(1) * xm + c(2) * xm * xm;
    const double v = curve.fluorescence[imin] - curve.offset;
    r.depth = bg > 0.0 ? std::clamp((bg - v) / bg, 0.0, 1.0) : 0.0;
  }
  return positions;
}

struct MinimumOptions {
  /// A minimum counts when its topographic prominence exceeds this fraction of the curve's range.
  double relative_prominence = 0.01;
  /// Curves whose range (offset removed) is below this fraction of the mean level, or below
  /// `absolute_floor`, are flat and have no minima.
  double flat_fraction = 1e-6;
  double absolute_floor = 1e-12;
};

/**
 * Local minima of a sampled curve with their topographic prominence: the
 * smaller of the highest points reached walking left and right before the
 * curve drops below the minimum (or ends). Plateaus count once.
 */
inline std::vector<int> find_local_minima(const std::vector<double>& y, double offset = 0.0, const MinimumOptions& opt = {}) {
  const int n = static_cast<int>(y.size());
  std::vector<int> out;
  if (n < 3) return out;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, mean = 0.0;
  for (double v : y) {
    if (!std::isfinite(v)) return out;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    mean += (v - offset) / n;
  }
  const double range = hi - lo;
  if (range <= opt.absolute_floor || range <= opt.flat_fraction * std::abs(mean)) return out;
  for (int i = 1; i < n - 1; ++i) {
    if (!(y[i] < y[i - 1])) continue;
    int j = i;
    while (j + 1 < n && y[j + 1] == y[i]) ++j;
    if (j + 1 >= n || !(y[j + 1] > y[i])) continue;
    double left = y[i], right = y[i];
    for (int k = i - 1; k >= 0 && y[k] >= y[i]; --k) left = std::max(left, y[k]);
    for (int k = j + 1; k < n && y[k] >= y[i]; ++k) right = std::max(right, y[k]);
    if (std::min(left, right) - y[i] > opt.relative_prominence * range) out.push_back(i);
    i = j;
  }
  return out;
}

inline std::vector<double> find_minima_positions(const SpectrumCurve& c, const MinimumOptions& opt = {}) {
  std::vector<double> out;
  for (int i : find_local_minima(c.fluorescence, c.offset, opt)) out.push_back(c.detuning[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Counts per unit excited population for a pulsed protocol: Gamma_SP * window * repetitions * efficiency.
inline double protocol_scale(const LevelScheme& scheme, double efficiency, double window = 50e-6,
                             int repetitions = 20000) {
  if (!(efficiency > 0.0)) throw InvalidArgument("protocol_scale: efficiency must be > 0");
  return scheme.gamma_sp() * window * repetitions * efficiency;
}

/// Replaces each expected count by a Poisson draw. Deterministic for a fixed seed.
inline SpectrumCurve with_poisson_noise(const SpectrumCurve& expected, std::uint64_t seed) {
  SpectrumCurve out = expected;
  std::mt19937_64 rng(seed);
  for (double& v : out.fluorescence) {
    if (!std::isfinite(v)) continue;
    if (v < 0.0) throw InvalidArgument("with_poisson_noise: expected counts must be >= 0");
    std::poisson_distribution<long long> dist(v);
    v = v > 0.0 ? static_cast<double>(dist(rng)) : 0.0;
  }
  out.noisy = true;
  return out;
}

}  // namespace cptspec
