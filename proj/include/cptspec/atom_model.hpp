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
 * @file atom_model.hpp
 * @brief Operators of the eight-level S1/2 - P1/2 - D3/2 system of 40Ca+.
 *
 * Basis ordering (0-based index in code, 1-based in the usual ket labels):
 *
 *   0,1   S1/2  m = -1/2, +1/2
 *   2,3   P1/2  m = -1/2, +1/2
 *   4..7  D3/2  m = -3/2, -1/2, +1/2, +3/2
 *
 * All frequencies are angular (rad/s) and hbar = 1, so Hamiltonians are
 * expressed in rad/s as well.
 */
#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cptspec/constants.hpp"

namespace cptspec {

inline constexpr int kNumStates = 8;
using Matrix8c = Eigen::Matrix<cd, kNumStates, kNumStates>;

enum class Manifold { S, P, D };
enum class Transition { SP, DP };

struct Sublevel {
  Manifold manifold;
  int two_j;  // 2J
  int two_m;  // 2m
  double m() const { return 0.5 * two_m; }
};

inline constexpr std::array<Sublevel, kNumStates> kBasis{{
    {Manifold::S, 1, -1},
    {Manifold::S, 1, +1},
    {Manifold::P, 1, -1},
    {Manifold::P, 1, +1},
    {Manifold::D, 3, -3},
    {Manifold::D, 3, -1},
    {Manifold::D, 3, +1},
    {Manifold::D, 3, +3},
}};

inline constexpr int kExcitedA = 2;
inline constexpr int kExcitedB = 3;

inline constexpr Manifold lower_manifold(Transition t) {
  return t == Transition::SP ? Manifold::S : Manifold::D;
}

inline std::string to_string(Manifold m) {
  switch (m) {
    case Manifold::S: return "S";
    case Manifold::P: return "P";
    case Manifold::D: return "D";
  }
  return "?";
}

inline std::string sublevel_label(int index) {
  const auto& s = kBasis.at(index);
  std::string m = (s.two_m > 0 ? "+" : "-") + std::to_string(std::abs(s.two_m)) + "/2";
  return to_string(s.manifold) + "(" + m + ")";
}

/// Static atomic data. Defaults are the usual 40Ca+ values.
struct LevelScheme {
  double g_s = 2.0023;
  double g_p = 2.0 / 3.0;
  double g_d = 0.7994;
  double lambda_sp = 397e-9;  // m
  double lambda_dp = 866e-9;  // m
  double mass = 39.962591 * phys::kAtomicMassUnit;
  double lifetime_p = 6.9e-9;  // s
  double branching_sp = 0.9347;

  double gamma_total() const { return 1.0 / lifetime_p; }
  double gamma_sp() const { return branching_sp / lifetime_p; }
  double gamma_dp() const { return (1.0 - branching_sp) / lifetime_p; }

  double partial_linewidth(Transition t) const {
    return t == Transition::SP ? gamma_sp() : gamma_dp();
  }

  double wavenumber(Transition t) const {
    return kTwoPi / (t == Transition::SP ? lambda_sp : lambda_dp);
  }

  double g_factor(Manifold m) const {
    switch (m) {
      case Manifold::S: return g_s;
      case Manifold::P: return g_p;
      case Manifold::D: return g_d;
    }
    return 0.0;
  }

  void validate() const {
    if (!(lifetime_p > 0.0)) throw InvalidArgument("scheme.lifetime_ns: must be > 0");
    if (!(branching_sp > 0.0 && branching_sp < 1.0))
      throw InvalidArgument("scheme.branching_sp: must lie in (0, 1)");
    if (!(mass > 0.0)) throw InvalidArgument("scheme.mass_amu: must be > 0");
    if (!(lambda_sp > 0.0 && lambda_dp > 0.0))
      throw InvalidArgument("scheme.lambda: wavelengths must be > 0");
    if (g_s == g_d) throw InvalidArgument("scheme.g_s/g_d: S and D g-factors must differ");
  }
};

/**
 * Polarization as amplitudes on the spherical basis, stored as (q=-1, q=0, q=+1).
 *
 * A linear polarization with polar angle theta (w.r.t. B) and azimuth phi has
 * eps_{+1} = -sin(theta) e^{i phi}/sqrt2, eps_0 = cos(theta),
 * eps_{-1} = sin(theta) e^{-i phi}/sqrt2.
 */
struct Polarization {
  std::array<cd, 3> amplitudes{cd{0.0}, cd{1.0}, cd{0.0}};

  static Polarization linear(double theta, double phi = 0.0) {
    const double s = std::sin(theta) / std::sqrt(2.0);
    return {{s * std::polar(1.0, -phi), cd{std::cos(theta)}, -s * std::polar(1.0, phi)}};
  }

  /// Rejects amplitudes whose Euclidean norm differs from one by more than 1e-9.
  static Polarization spherical(cd a_minus, cd a_zero, cd a_plus) {
    Polarization p{{a_minus, a_zero, a_plus}};
    if (p.norm_error() > 1e-9) throw InvalidArgument("polarization: spherical amplitudes must have unit norm");
    return p;
  }

  static Polarization pi() { return linear(0.0); }
  static Polarization sigma_pm() { return linear(kPi / 2.0); }

  cd amplitude(int q) const { return amplitudes.at(q + 1); }

  double norm_error() const {
    double n = 0.0;
    for (const auto& a : amplitudes) n += std::norm(a);
    return std::abs(std::sqrt(n) - 1.0);
  }
};

/// One laser beam. Detuning is omega_laser - omega_atom (red detuning < 0).
struct LaserField {
  Transition transition = Transition::DP;
  double saturation = 0.0;
  double detuning = 0.0;   // rad/s
  double linewidth = 0.0;  // rad/s
  Eigen::Vector3d k_hat = Eigen::Vector3d::UnitY();
  Polarization polarization = Polarization::sigma_pm();

  /// Omega = Gamma_partial * sqrt(S / 2), Gamma_partial the addressed transition's decay rate.
  double rabi_frequency(const LevelScheme& scheme) const {
    return scheme.partial_linewidth(transition) * std::sqrt(saturation / 2.0);
  }

  Eigen::Vector3d wavevector(const LevelScheme& scheme) const {
    return scheme.wavenumber(transition) * k_hat;
  }

  void validate(const std::string& name = "laser") const {
    if (!(saturation >= 0.0)) throw InvalidArgument(name + ".saturation: must be >= 0");
    if (!(linewidth >= 0.0)) throw InvalidArgument(name + ".linewidth_mhz: must be >= 0");
    if (!std::isfinite(detuning)) throw InvalidArgument(name + ".detuning_mhz: must be finite");
    if (std::abs(k_hat.norm() - 1.0) > 1e-9) throw InvalidArgument(name + ".k: must be a unit vector");
    if (polarization.norm_error() > 1e-9) throw InvalidArgument(name + ".polarization: must have unit norm");
  }
};

inline double saturation_from_rabi(double rabi, Transition t, const LevelScheme& scheme) {
  const double r = rabi / scheme.partial_linewidth(t);
  return 2.0 * r * r;
}

/// Magnetic field along the quantization axis and the ion temperature.
struct Environment {
  double b_gauss = 0.0;
  double temperature = 0.0;  // K

  void validate() const {
    if (!(b_gauss >= 0.0)) throw InvalidArgument("environment.b_gauss: must be >= 0");
    if (!(temperature >= 0.0)) throw InvalidArgument("environment.temperature_mk: must be >= 0");
  }
};

/// Linear Zeeman shift g * muB * B * m / hbar of every basis state (rad/s).
inline std::array<double, kNumStates> zeeman_shifts(const Environment& env, const LevelScheme& scheme) {
  std::array<double, kNumStates> shifts{};
  const double larmor = kTwoPi * phys::kBohrMagnetonHzPerGauss * env.b_gauss;
  for (int i = 0; i < kNumStates; ++i) {
    shifts[i] = scheme.g_factor(kBasis[i].manifold) * larmor * kBasis[i].m();
  }
  return shifts;
}

namespace detail {

inline double factorial(int n) {
  static const auto table = [] {
    std::array<double, 32> t{};
    t[0] = 1.0;
    for (int i = 1; i < 32; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  if (n < 0 || n >= 32) throw InvalidArgument("factorial: argument out of range");
  return table[n];
}

}  // namespace detail

/**
 * Wigner 3j symbol (j1 j2 j3; m1 m2 m3) via the Racah formula.
 * All arguments are doubled so half-integers stay integral.
 */
inline double wigner_3j(int tj1, int tj2, int tj3, int tm1, int tm2, int tm3) {
  using detail::factorial;
  if (tm1 + tm2 + tm3 != 0) return 0.0;
  if (tj3 < std::abs(tj1 - tj2) || tj3 > tj1 + tj2) return 0.0;
  if (std::abs(tm1) > tj1 || std::abs(tm2) > tj2 || std::abs(tm3) > tj3) return 0.0;
  if ((tj1 + tm1) % 2 || (tj2 + tm2) % 2 || (tj3 + tm3) % 2) return 0.0;
  if ((tj1 + tj2 + tj3) % 2) return 0.0;

  const int a = (tj1 + tj2 - tj3) / 2;
  const int b = (tj1 - tj2 + tj3) / 2;
  const int c = (-tj1 + tj2 + tj3) / 2;
  const int big = (tj1 + tj2 + tj3) / 2 + 1;
  const double triangle = factorial(a) * factorial(b) * factorial(c) / factorial(big);
  const double norm = std::sqrt(triangle * factorial((tj1 + tm1) / 2) * factorial((tj1 - tm1) / 2) *
                                factorial((tj2 + tm2) / 2) * factorial((tj2 - tm2) / 2) *
                                factorial((tj3 + tm3) / 2) * factorial((tj3 - tm3) / 2));

  const int k1 = (tj3 - tj2 + tm1) / 2;
  const int k2 = (tj3 - tj1 - tm2) / 2;
  const int k3 = (tj1 + tj2 - tj3) / 2;
  const int k4 = (tj1 - tm1) / 2;
  const int k5 = (tj2 + tm2) / 2;
  double sum = 0.0;
  for (int k = std::max({0, -k1, -k2}); k <= std::min({k3, k4, k5}); ++k) {
    const double term = 1.0 / (factorial(k) * factorial(k1 + k) * factorial(k2 + k) * factorial(k3 - k) *
                               factorial(k4 - k) * factorial(k5 - k));
    sum += (k % 2 ? -term : term);
  }
  const int phase = (tj1 - tj2 - tm3) / 2;
  return (phase % 2 ? -1.0 : 1.0) * norm * sum;
}

/**
 * Normalized dipole coefficient between lower sublevel `lower` and P sublevel
 * `upper`: sqrt(2J_P+1) (-1)^(J_P-m_P) (J_P 1 J_l; -m_P q m_l), so the squared
 * coefficients out of each P sublevel sum to one per lower manifold.
 *
 * The ket |D,-3/2> carries an extra -1 phase; with it the D-P block reproduces
 * the published H+ matrix entry by entry. It is a basis phase choice and has
 * no observable effect.
 */
inline double dipole_coefficient(int lower, int upper) {
  const auto& l = kBasis.at(lower);
  const auto& u = kBasis.at(upper);
  const int two_q = u.two_m - l.two_m;
  if (std::abs(two_q) > 2) return 0.0;
  const double sign_p = ((u.two_j - u.two_m) / 2) % 2 ? -1.0 : 1.0;
  double c = sign_p * std::sqrt(u.two_j + 1.0) * wigner_3j(u.two_j, 2, l.two_j, -u.two_m, two_q, l.two_m);
  if (l.manifold == Manifold::D && l.two_m == -3) c = -c;
  return c;
}

/**
 * Dimensionless coupling of one laser: entry (lower, P) = eps_q * coefficient,
 * q = m_P - m_lower. Rows are lower-manifold states, columns are P states; all
 * other entries vanish. For the D-P transition this is the H+ matrix.
 */
inline Matrix8c coupling_matrix(Transition t, const Polarization& pol) {
  if (pol.norm_error() > 1e-9) throw InvalidArgument("coupling_matrix: polarization must have unit norm");
  Matrix8c c = Matrix8c::Zero();
  const Manifold lower = lower_manifold(t);
  for (int l = 0; l < kNumStates; ++l) {
    if (kBasis[l].manifold != lower) continue;
    for (int p = kExcitedA; p <= kExcitedB; ++p) {
      const int two_q = kBasis[p].two_m - kBasis[l].two_m;
      if (std::abs(two_q) > 2) continue;
      c(l, p) = pol.amplitude(two_q / 2) * dipole_coefficient(l, p);
    }
  }
  return c;
}

/**
 * Rotating-frame Hamiltonian for the Doppler (S-P) and probe (D-P) lasers.
 * The frame rotates S at omega_dop and D at omega_pr, which puts the detunings
 * on the lower-state diagonal: H_ii = z_i + Delta_dop (S), z_i (P),
 * z_i + Delta_pr (D). Off-diagonal blocks are (Omega/2)(C + C^dagger).
 */
inline Matrix8c build_H0(const LaserField& dop, const LaserField& pr, const Environment& env,
                         const LevelScheme& scheme) {
  if (dop.transition != Transition::SP) throw InvalidArgument("build_H0: Doppler laser must drive S-P");
  if (pr.transition != Transition::DP) throw InvalidArgument("build_H0: probe laser must drive D-P");
  const auto z = zeeman_shifts(env, scheme);
  Matrix8c h = Matrix8c::Zero();
  for (int i = 0; i < kNumStates; ++i) {
    double d = z[i];
    if (kBasis[i].manifold == Manifold::S) d += dop.detuning;
    if (kBasis[i].manifold == Manifold::D) d += pr.detuning;
    h(i, i) = d;
  }
  const Matrix8c cd_dop = 0.5 * dop.rabi_frequency(scheme) * coupling_matrix(Transition::SP, dop.polarization);
  const Matrix8c cd_pr = 0.5 * pr.rabi_frequency(scheme) * coupling_matrix(Transition::DP, pr.polarization);
  h += cd_dop + cd_dop.adjoint() + cd_pr + cd_pr.adjoint();
  return h;
}

enum class ChannelKind { Decay, Dephasing };

struct CollapseOperator {
  Matrix8c op;
  ChannelKind kind;
  double rate;  // rad/s; op = sqrt(rate) * (unit-weight operator)
  std::string label;
};

/// Two-photon Doppler width |k_a - k_b| sqrt(kB T / 2m) between two beams.
inline double thermal_broadening(const LaserField& a, const LaserField& b, const Environment& env,
                                 const LevelScheme& scheme) {
  const double dk = (a.wavevector(scheme) - b.wavevector(scheme)).norm();
  return dk * std::sqrt(phys::kBoltzmann * env.temperature / (2.0 * scheme.mass));
}

/**
 * Dephasing rate of the S projector: sqrt(Gamma_dop^2 + Gamma_T(dop, pr)^2).
 * The relative 397/866 Doppler phase is carried by the 397 frame, so nothing
 * thermal acts on the 866 frame shared by collinear probe and repumper.
 */
inline double doppler_dephasing_rate(const LaserField& dop, const LaserField& pr, const Environment& env,
                                     const LevelScheme& scheme) {
  return std::hypot(dop.linewidth, thermal_broadening(dop, pr, env, scheme));
}

/**
 * Dephasing of the repumper phase relative to the probe frame:
 * sqrt(Gamma_rep^2 + Gamma_T(pr, rep)^2). Gamma_rep is read as the repumper
 * linewidth relative to the probe. The rate damps the n-th Floquet harmonic
 * at n^2 * rate / 2.
 */
inline double repumper_relative_dephasing(const LaserField& pr, const LaserField& rep, const Environment& env,
                                          const LevelScheme& scheme) {
  return std::hypot(rep.linewidth, thermal_broadening(pr, rep, env, scheme));
}

/**
 * Lindblad operators of the model.
 *
 * Spontaneous decay: one operator sqrt(Gamma_branch c^2) |l><P| per allowed
 * Zeeman channel. Laser dephasing: sqrt(doppler_dephasing_rate) projecting
 * on S and sqrt(Gamma_pr) projecting on D. `lasers` is {doppler, probe[, repumper]}; the repumper contributes no
 * operator here (see repumper_relative_dephasing).
 */
inline std::vector<CollapseOperator> build_collapse_operators(std::span<const LaserField> lasers,
                                                              const Environment& env, const LevelScheme& scheme) {
  if (lasers.size() < 2) throw InvalidArgument("build_collapse_operators: need at least two lasers");
  for (const auto& l : lasers) {
    if (l.linewidth < 0.0) throw InvalidArgument("build_collapse_operators: negative linewidth");
  }
  std::vector<CollapseOperator> ops;
  for (int p = kExcitedA; p <= kExcitedB; ++p) {
    for (int l = 0; l < kNumStates; ++l) {
      if (kBasis[l].manifold == Manifold::P) continue;
      const double c = dipole_coefficient(l, p);
      if (c == 0.0) continue;
      const Transition t = kBasis[l].manifold == Manifold::S ? Transition::SP : Transition::DP;
      const double rate = scheme.partial_linewidth(t) * c * c;
      CollapseOperator op{Matrix8c::Zero(), ChannelKind::Decay, rate,
                          "decay " + sublevel_label(p) + "->" + sublevel_label(l)};
      op.op(l, p) = std::sqrt(rate);
      ops.push_back(std::move(op));
    }
  }

  auto projector = [](Manifold m, double rate, std::string label) {
    CollapseOperator op{Matrix8c::Zero(), ChannelKind::Dephasing, rate, std::move(label)};
    for (int i = 0; i < kNumStates; ++i) {
      if (kBasis[i].manifold == m) op.op(i, i) = std::sqrt(rate);
    }
    return op;
  };
  const double dop_rate = doppler_dephasing_rate(lasers[0], lasers[1], env, scheme);
  const double pr_rate = lasers[1].linewidth;
  if (dop_rate > 0.0) ops.push_back(projector(Manifold::S, dop_rate, "dephasing doppler"));
  if (pr_rate > 0.0) ops.push_back(projector(Manifold::D, pr_rate, "dephasing probe"));
  return ops;
}

}  // namespace cptspec
