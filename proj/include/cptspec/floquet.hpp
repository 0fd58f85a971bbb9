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
 * @file floquet.hpp
 * @brief Time-averaged stationary state of the three-laser problem.
 *
 * With rho(t) = sum_n rho_n e^{i n dbar t} the harmonics obey
 *
 *   (L0 - i n dbar) rho_n + a L+ rho_{n-1} + a L- rho_{n+1} = 0,   a = Omega_rep / 2.
 *
 * Truncating at |n| = n_max and eliminating the outer harmonics downward gives
 *
 *   S+_{n-1} = -(L0 - i n dbar + a L- S+_n)^{-1} a L+,     S+_{n_max}  = 0,
 *   S-_{n+1} = -(L0 - i n dbar + a L+ S-_n)^{-1} a L-,     S-_{-n_max} = 0,
 *
 * and rho_0 is the trace-one null vector of L0 + a L- S+_0 + a L+ S-_0.
 *
 * Relative phase diffusion between repumper and probe damps harmonic n at
 * rate n^2 gamma / 2, which enters as an extra -n^2 gamma/2 next to -i n dbar.
 */
#pragma once

#include <cmath>
#include <string>

#include "cptspec/liouville.hpp"

namespace cptspec {

/// Raised when dbar = 0 reaches code that needs a finite modulation frequency.
class DegenerateDetuning : public Error {
 public:
  using Error::Error;
};

struct FloquetConfig {
  int n_max = 0;  // 0 selects adaptive_nmax
  int floor = 1;
  int cap = 12;
  SingularityPolicy policy = SingularityPolicy::MinimumNorm;
  bool check_inner_residuals = false;  // verify every inner solve to 1e-10
  bool explicit_minus_chain = false;   // run the S- recursion instead of the conjugation identity
  bool oracle_check = false;           // cross-check each point against time integration (slow)

  void validate() const {
    if (n_max < 0) throw InvalidArgument("floquet.n_max: must be >= 0 (0 = adaptive)");
    if (floor < 1) throw InvalidArgument("floquet.floor: must be >= 1");
    if (cap < floor) throw InvalidArgument("floquet.cap: must be >= floor");
  }
};

struct AveragedState {
  StateVector rho0;
  DensityMatrix state;
  double residual = 0.0;
  int n_max = 0;
  double drive_ratio = 0.0;  // Omega_rep / |dbar|
  bool degenerate = false;   // null space of the effective Liouvillian not unique
};

/// max(floor, min(cap, ceil(Omega_rep / |dbar|) + 2)).
inline int adaptive_nmax(double rabi_rep, double modulation, int floor = 1, int cap = 12) {
  if (modulation == 0.0) throw DegenerateDetuning("adaptive_nmax: dbar = 0 (degenerate repumper/probe detuning)");
  const double ratio = std::abs(rabi_rep / modulation);
  const double n = std::ceil(ratio) + 2.0;
  return std::max(floor, static_cast<int>(std::min<double>(cap, n)));
}

namespace detail {

inline SuperOperator inner_matrix(const LiouvillianSet& set, int n) {
  SuperOperator m = set.L0;
  const cd shift{-0.5 * n * n * set.relative_dephasing, -n * set.modulation};
  m.diagonal().array() += shift;
  return m;
}

/// X = -(M)^{-1} (a L), checking conditioning (and the residual when asked).
inline SuperOperator chain_step(const SuperOperator& m, const SuperOperator& a_l, int n, bool check) {
  Eigen::PartialPivLU<SuperOperator> lu(m);
  if (!lu_is_regular(lu, 1e-14)) throw SingularMatrix("floquet recursion: singular inner matrix at n = " + std::to_string(n));
  SuperOperator x = lu.solve(a_l);
  if (check) {
    const double scale = std::max(a_l.cwiseAbs().maxCoeff(), 1e-300);
    const double res = (m * x - a_l).cwiseAbs().maxCoeff() / scale;
    if (res > 1e-10)
      throw SingularMatrix("floquet recursion: inner residual " + std::to_string(res) + " at n = " + std::to_string(n));
  }
  return -x;
}

}  // namespace detail

/// S+_0 from the downward recursion with S+_{n_max} = 0.
inline SuperOperator s_plus_chain(const LiouvillianSet& set, int n_max, bool check = false) {
  if (n_max < 1) throw InvalidArgument("s_plus_chain: n_max must be >= 1");
  if (set.modulation == 0.0 && set.relative_dephasing == 0.0 && set.rabi_rep != 0.0)
    throw DegenerateDetuning("s_plus_chain: dbar = 0");
  const double a = set.drive();
  if (a == 0.0) return SuperOperator::Zero(kVecDim, kVecDim);
  const SparseSuperOperator minus = (a * set.L_minus).sparseView();
  const SuperOperator a_plus = a * set.L_plus;
  SuperOperator s = SuperOperator::Zero(kVecDim, kVecDim);
  for (int n = n_max; n >= 1; --n) {
    SuperOperator m = detail::inner_matrix(set, n);
    if (n < n_max) m += minus * s;
    s = detail::chain_step(m, a_plus, n, check);
  }
  return s;
}

/// S-_0 from the upward recursion with S-_{-n_max} = 0.
inline SuperOperator s_minus_chain(const LiouvillianSet& set, int n_max, bool check = false) {
  if (n_max < 1) throw InvalidArgument("s_minus_chain: n_max must be >= 1");
  if (set.modulation == 0.0 && set.relative_dephasing == 0.0 && set.rabi_rep != 0.0)
    throw DegenerateDetuning("s_minus_chain: dbar = 0");
  const double a = set.drive();
  if (a == 0.0) return SuperOperator::Zero(kVecDim, kVecDim);
  const SparseSuperOperator plus = (a * set.L_plus).sparseView();
  const SuperOperator a_minus = a * set.L_minus;
  SuperOperator s = SuperOperator::Zero(kVecDim, kVecDim);
  for (int n = -n_max; n <= -1; ++n) {
    SuperOperator m = detail::inner_matrix(set, n);
    if (n > -n_max) m += plus * s;
    s = detail::chain_step(m, a_minus, n, check);
  }
  return s;
}

/**
 * The master equation maps Hermitian rho to Hermitian rho, so with
 * J v = vec(unvec(v)^dagger) one has J L+- J = L-+ and J S+_n J = S-_{-n}.
 * Returns J X J.
 */
inline SuperOperator conjugate_superoperator(const SuperOperator& x) {
  SuperOperator y(kVecDim, kVecDim);
  auto swap = [](int i) { return vec_index(i % kNumStates, i / kNumStates); };
  for (int c = 0; c < kVecDim; ++c)
    for (int r = 0; r < kVecDim; ++r) y(r, c) = std::conj(x(swap(r), swap(c)));
  return y;
}

/// Effective Liouvillian L0 + a L- S+_0 + a L+ S-_0 for a given truncation.
inline SuperOperator effective_liouvillian(const LiouvillianSet& set, int n_max, const FloquetConfig& cfg = {}) {
  const double a = set.drive();
  if (a == 0.0) return set.L0;
  const SuperOperator sp = s_plus_chain(set, n_max, cfg.check_inner_residuals);
  const SuperOperator sm =
      cfg.explicit_minus_chain ? s_minus_chain(set, n_max, cfg.check_inner_residuals) : conjugate_superoperator(sp);
  SuperOperator l = set.L0;
  l.noalias() += (a * set.L_minus) * sp;
  l.noalias() += (a * set.L_plus) * sm;
  return l;
}

/// Time-averaged stationary state rho_0 of the three-laser problem.
inline AveragedState averaged_steady_state(const LiouvillianSet& set, const FloquetConfig& cfg = {}) {
  cfg.validate();
  AveragedState out;
  const double a = set.drive();
  if (a == 0.0) {
    out.n_max = cfg.n_max;
  } else if (cfg.n_max > 0) {
    out.n_max = cfg.n_max;
  } else {
    const double effective = std::abs(set.modulation) + 0.5 * set.relative_dephasing;
    if (effective == 0.0) throw DegenerateDetuning("averaged_steady_state: dbar = 0");
    out.n_max = adaptive_nmax(set.rabi_rep, effective, cfg.floor, cfg.cap);
  }
  out.drive_ratio = set.modulation == 0.0 ? INFINITY : std::abs(set.rabi_rep / set.modulation);
  const SuperOperator l = a == 0.0 ? set.L0 : effective_liouvillian(set, out.n_max, cfg);
  const SteadyState ss = solve_stationary(l, cfg.policy);
  out.state = ss.state;
  out.rho0 = vectorize(ss.state);
  out.residual = ss.residual;
  out.degenerate = ss.degenerate;
  return out;
}

}  // namespace cptspec
