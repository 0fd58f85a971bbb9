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
 * @file liouville.hpp
 * @brief Vectorized master equation: superoperators and stationary states.
 *
 * Density matrices are flattened row-major, rho_vec[8 r + s] = rho(r, s).
 * With that ordering vec(A rho B) = (A kron B^T) vec(rho).
 */
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "cptspec/atom_model.hpp"

namespace cptspec {

inline constexpr int kVecDim = kNumStates * kNumStates;

using StateVector = Eigen::VectorXcd;   // 64 components
using SuperOperator = Eigen::MatrixXcd;  // 64 x 64
using SparseSuperOperator = Eigen::SparseMatrix<cd>;

inline constexpr int vec_index(int r, int s) { return kNumStates * r + s; }

/// 8x8 density matrix with the validity checks used throughout the library.
struct DensityMatrix {
  Matrix8c rho = Matrix8c::Zero();

  cd trace() const { return rho.trace(); }
  double hermiticity_error() const { return (rho - rho.adjoint()).cwiseAbs().maxCoeff(); }
  double min_eigenvalue() const {
    const Matrix8c herm = 0.5 * (rho + rho.adjoint());
    Eigen::SelfAdjointEigenSolver<Matrix8c> es(herm, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  }
  double population(int i) const { return rho(i, i).real(); }
  /// rho_33 + rho_44 in ket labels: the P1/2 population.
  double excited_population() const { return rho(kExcitedA, kExcitedA).real() + rho(kExcitedB, kExcitedB).real(); }
};

struct StateValidity {
  double hermiticity = 0.0;
  double trace_error = 0.0;
  double min_eigenvalue = 0.0;

  bool ok(double herm_tol = 1e-10, double trace_tol = 1e-12, double eig_tol = -1e-9) const {
    return hermiticity < herm_tol && trace_error < trace_tol && min_eigenvalue > eig_tol;
  }
};

inline StateValidity check_state(const DensityMatrix& d) {
  return {d.hermiticity_error(), std::abs(d.trace() - 1.0), d.min_eigenvalue()};
}

/**
 * Opt-in, process-wide tally of the worst validity figures seen. Disabled by
 * default; scans record every point they solve while it is enabled.
 */
class ValidityAudit {
 public:
  struct Summary {
    long long states = 0;
    long long invalid = 0;
    StateValidity worst{0.0, 0.0, std::numeric_limits<double>::infinity()};
  };

  static ValidityAudit& global() {
    static ValidityAudit audit;
    return audit;
  }

  void enable(bool on = true) { enabled_.store(on, std::memory_order_relaxed); }
  bool enabled() const { return enabled_.load(std::memory_order_relaxed); }

  void record(const StateValidity& v) {
    if (!enabled()) return;
    std::lock_guard<std::mutex> lock(mutex_);
    ++sum_.states;
    if (!v.ok()) ++sum_.invalid;
    sum_.worst.hermiticity = std::max(sum_.worst.hermiticity, v.hermiticity);
    sum_.worst.trace_error = std::max(sum_.worst.trace_error, v.trace_error);
    sum_.worst.min_eigenvalue = std::min(sum_.worst.min_eigenvalue, v.min_eigenvalue);
  }
  void record(const DensityMatrix& d) {
    if (enabled()) record(check_state(d));
  }

  Summary summary() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return sum_;
  }
  void reset() {
    std::lock_guard<std::mutex> lock(mutex_);
    sum_ = {};
  }

 private:
  std::atomic<bool> enabled_{false};
  mutable std::mutex mutex_;
  Summary sum_;
};

inline StateVector vectorize(const DensityMatrix& d) {
  StateVector v(kVecDim);
  for (int r = 0; r < kNumStates; ++r)
    for (int s = 0; s < kNumStates; ++s) v(vec_index(r, s)) = d.rho(r, s);
  return v;
}

inline DensityMatrix unvectorize(const StateVector& v) {
  if (v.size() != kVecDim) throw InvalidArgument("unvectorize: expected 64 components");
  DensityMatrix d;
  for (int r = 0; r < kNumStates; ++r)
    for (int s = 0; s < kNumStates; ++s) d.rho(r, s) = v(vec_index(r, s));
  return d;
}

/// -i [H, .] as a superoperator.
inline SuperOperator commutator_superoperator(const Matrix8c& h) {
  SuperOperator l = SuperOperator::Zero(kVecDim, kVecDim);
  const cd mi{0.0, -1.0};
  for (int r = 0; r < kNumStates; ++r) {
    for (int s = 0; s < kNumStates; ++s) {
      const int row = vec_index(r, s);
      for (int k = 0; k < kNumStates; ++k) {
        l(row, vec_index(k, s)) += mi * h(r, k);
        l(row, vec_index(r, k)) -= mi * h(k, s);
      }
    }
  }
  return l;
}

/// sum_k C_k rho C_k^dagger - 1/2 {C_k^dagger C_k, rho} as a superoperator.
inline SuperOperator dissipator_superoperator(std::span<const CollapseOperator> ops) {
  SuperOperator l = SuperOperator::Zero(kVecDim, kVecDim);
  for (const auto& c : ops) {
    const Matrix8c& a = c.op;
    const Matrix8c ada = a.adjoint() * a;
    const Matrix8c a_conj = a.conjugate();
    for (int r = 0; r < kNumStates; ++r) {
      for (int s = 0; s < kNumStates; ++s) {
        const int row = vec_index(r, s);
        for (int k = 0; k < kNumStates; ++k) {
          for (int j = 0; j < kNumStates; ++j) {
            const cd jump = a(r, k) * a_conj(s, j);
            if (jump != cd{0.0}) l(row, vec_index(k, j)) += jump;
          }
          l(row, vec_index(k, s)) -= 0.5 * ada(r, k);
          l(row, vec_index(r, k)) -= 0.5 * ada(k, s);
        }
      }
    }
  }
  return l;
}

/// L0 = -i[H0, .] + D[collapse ops].
inline SuperOperator build_L0(const Matrix8c& h0, std::span<const CollapseOperator> ops) {
  if ((h0 - h0.adjoint()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, h0.cwiseAbs().maxCoeff()))
    throw InvalidArgument("build_L0: H0 must be Hermitian");
  return commutator_superoperator(h0) + dissipator_superoperator(ops);
}

/// Index-notation construction L_{8r+s, 8k+j} = -i (H_{r,k} d_{j,s} - H_{j,s} d_{r,k}).
inline SuperOperator build_L_from_H(const Matrix8c& h) { return commutator_superoperator(h); }

/// (L+, L-) from H+ with H- = H+^dagger. The Omega_rep/2 prefactor is applied by the caller.
inline std::pair<SuperOperator, SuperOperator> build_L_pm(const Matrix8c& h_plus) {
  return {build_L_from_H(h_plus), build_L_from_H(h_plus.adjoint())};
}

/// Overload taking an explicit H-; rejects pairs that are not mutually adjoint.
inline std::pair<SuperOperator, SuperOperator> build_L_pm(const Matrix8c& h_plus, const Matrix8c& h_minus) {
  if ((h_minus - h_plus.adjoint()).cwiseAbs().maxCoeff() > 1e-12)
    throw InvalidArgument("build_L_pm: H- must equal H+^dagger");
  return {build_L_from_H(h_plus), build_L_from_H(h_minus)};
}

/**
 * Everything needed for the three-laser equation
 *   d rho/dt = [L0 + (Omega_rep/2)(L+ e^{i dbar t} + L- e^{-i dbar t})] rho,
 * with dbar = Delta_rep - Delta_pr.
 */
struct LiouvillianSet {
  SuperOperator L0;
  SuperOperator L_plus;
  SuperOperator L_minus;
  double modulation = 0.0;          // dbar, rad/s
  double rabi_rep = 0.0;            // Omega_rep, rad/s
  double relative_dephasing = 0.0;  // repumper vs probe phase diffusion, rad/s

  double drive() const { return 0.5 * rabi_rep; }

  /// L(t) evaluated at time t.
  SuperOperator at(double t) const {
    const cd ph = std::polar(1.0, modulation * t);
    return L0 + drive() * (L_plus * ph + L_minus * std::conj(ph));
  }
};

enum class SingularityPolicy {
  /// Rank-deficient stationary problems are solved in the minimum-norm sense and flagged.
  MinimumNorm,
  /// Rank-deficient stationary problems raise SingularMatrix.
  Strict,
};

struct SteadyState {
  DensityMatrix state;
  double residual = 0.0;   // max |L rho| / max |L_ij|
  bool degenerate = false; // null space of L has dimension > 1
};

/// max |L x| in units of the largest entry of L. Rates span many decades in
/// rad/s, so an absolute residual would mostly measure the unit choice.
inline double relative_residual(const SuperOperator& L, const StateVector& x) {
  const double scale = L.cwiseAbs().maxCoeff();
  const double r = (L * x).cwiseAbs().maxCoeff();
  return scale > 0.0 ? r / scale : r;
}

/**
 * True when the LU factors are usable: finite, with the reciprocal condition
 * estimate and the smallest pivot ratio both above `floor`. Eigen's estimate
 * alone can come out O(1) for an exactly singular matrix (zero pivots), so the
 * pivots are checked as well.
 */
template <class Lu>
bool lu_is_regular(const Lu& lu, double floor) {
  const auto d = lu.matrixLU().diagonal().cwiseAbs();
  if (!d.allFinite()) return false;
  const double big = d.maxCoeff();
  if (!(big > 0.0) || !(d.minCoeff() >= floor * big)) return false;
  return lu.rcond() >= floor;
}

/**
 * Solves L rho = 0 with Tr rho = 1. L is normalized by its largest entry,
 * row 0 is replaced by the trace row (ones at the diagonal positions) and the
 * system is factorized with partial pivoting LU. When the reciprocal
 * condition estimate falls below `rcond_floor` the stationary state is not
 * unique; depending on `policy` this either throws or falls back to the
 * minimum-norm solution, which weights the stationary subspace symmetrically.
 */
inline SteadyState solve_stationary(const SuperOperator& L, SingularityPolicy policy = SingularityPolicy::MinimumNorm,
                                    double rcond_floor = 1e-15) {
  if (L.rows() != kVecDim || L.cols() != kVecDim) throw InvalidArgument("solve_stationary: expected a 64x64 matrix");
  const double scale = L.cwiseAbs().maxCoeff();
  SuperOperator a = scale > 0.0 ? SuperOperator(L / scale) : L;
  a.row(0).setZero();
  for (int i = 0; i < kNumStates; ++i) a(0, vec_index(i, i)) = 1.0;
  StateVector rhs = StateVector::Zero(kVecDim);
  rhs(0) = 1.0;

  SteadyState out;
  Eigen::PartialPivLU<SuperOperator> lu(a);
  StateVector x;
  if (!lu_is_regular(lu, rcond_floor)) {
    if (policy == SingularityPolicy::Strict)
      throw SingularMatrix("steady state: null space of the Liouvillian is more than one-dimensional");
    out.degenerate = true;
    Eigen::CompleteOrthogonalDecomposition<SuperOperator> cod(a);
    cod.setThreshold(1e-12);
    x = cod.solve(rhs);
  } else {
    x = lu.solve(rhs);
  }
  out.state = unvectorize(x);
  out.residual = relative_residual(L, x);
  return out;
}

/**
 * Real coordinates of a Hermitian 8x8 matrix: the 8 diagonal entries, then
 * (Re, Im) of each upper-triangular entry. A Hermiticity-preserving L acts on
 * these as a real 64x64 matrix, which halves the stationary solve to a real LU.
 */
namespace detail {

struct HermitianCoordinates {
  std::array<std::pair<int, int>, kVecDim> entry{};  // (r, s) per coordinate
  std::array<bool, kVecDim> imaginary{};

  HermitianCoordinates() {
    int c = 0;
    for (int r = 0; r < kNumStates; ++r) entry[c++] = {r, r};
    for (int r = 0; r < kNumStates; ++r)
      for (int s = r + 1; s < kNumStates; ++s) {
        entry[c] = {r, s};
        entry[c + 1] = {r, s};
        imaginary[c + 1] = true;
        c += 2;
      }
  }
};

inline const HermitianCoordinates& hermitian_coordinates() {
  static const HermitianCoordinates h;
  return h;
}

}  // namespace detail

/// L restricted to Hermitian matrices, in the real coordinates above.
inline Eigen::MatrixXd hermitian_real_form(const SuperOperator& L) {
  const auto& hc = detail::hermitian_coordinates();
  Eigen::MatrixXd out(kVecDim, kVecDim);
  for (int c = 0; c < kVecDim; ++c) {
    const auto [k, j] = hc.entry[c];
    // Image of the basis matrix for coordinate c.
    StateVector col;
    if (k == j) {
      col = L.col(vec_index(k, k));
    } else if (!hc.imaginary[c]) {
      col = L.col(vec_index(k, j)) + L.col(vec_index(j, k));
    } else {
      col = cd{0.0, 1.0} * (L.col(vec_index(k, j)) - L.col(vec_index(j, k)));
    }
    for (int r = 0; r < kVecDim; ++r) {
      const auto [a, b] = hc.entry[r];
      const cd v = col(vec_index(a, b));
      out(r, c) = hc.imaginary[r] ? v.imag() : v.real();
    }
  }
  return out;
}

inline DensityMatrix from_hermitian_coordinates(const Eigen::VectorXd& x) {
  const auto& hc = detail::hermitian_coordinates();
  DensityMatrix d;
  for (int c = 0; c < kVecDim; ++c) {
    const auto [r, s] = hc.entry[c];
    if (r == s) {
      d.rho(r, r) = x(c);
    } else if (!hc.imaginary[c]) {
      d.rho(r, s) += x(c);
      d.rho(s, r) += x(c);
    } else {
      d.rho(r, s) += cd{0.0, x(c)};
      d.rho(s, r) -= cd{0.0, x(c)};
    }
  }
  return d;
}

/**
 * Same contract as solve_stationary for Hermiticity-preserving L, using the
 * real form. Degenerate cases are handed to solve_stationary so both paths
 * agree on the minimum-norm convention.
 */
inline SteadyState solve_stationary_hermitian(const SuperOperator& L,
                                              SingularityPolicy policy = SingularityPolicy::MinimumNorm,
                                              double rcond_floor = 1e-15) {
  if (L.rows() != kVecDim || L.cols() != kVecDim) throw InvalidArgument("solve_stationary: expected a 64x64 matrix");
  Eigen::MatrixXd a = hermitian_real_form(L);
  const double scale = a.cwiseAbs().maxCoeff();
  if (scale > 0.0) a /= scale;
  a.row(0).setZero();
  a.row(0).head(kNumStates).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(kVecDim);
  rhs(0) = 1.0;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  if (!lu_is_regular(lu, rcond_floor)) return solve_stationary(L, policy, rcond_floor);
  SteadyState out;
  out.state = from_hermitian_coordinates(lu.solve(rhs));
  out.residual = relative_residual(L, vectorize(out.state));
  return out;
}

/// Two-laser stationary state of L0.
inline SteadyState steady_state_two_laser(const SuperOperator& L0,
                                          SingularityPolicy policy = SingularityPolicy::MinimumNorm) {
  return solve_stationary(L0, policy);
}

/// Convenience: L0 for (Doppler, probe) lasers.
inline SuperOperator build_two_laser_L0(const LaserField& dop, const LaserField& pr, const Environment& env,
                                        const LevelScheme& scheme) {
  const std::array<LaserField, 2> lasers{dop, pr};
  const auto ops = build_collapse_operators(lasers, env, scheme);
  return build_L0(build_H0(dop, pr, env, scheme), ops);
}

/// Full three-laser set (repumper on the D-P transition).
inline LiouvillianSet build_liouvillian_set(const LaserField& dop, const LaserField& pr, const LaserField& rep,
                                            const Environment& env, const LevelScheme& scheme) {
  if (rep.transition != Transition::DP) throw InvalidArgument("repumper must drive D-P");
  LiouvillianSet set;
  set.L0 = build_two_laser_L0(dop, pr, env, scheme);
  std::tie(set.L_plus, set.L_minus) = build_L_pm(coupling_matrix(Transition::DP, rep.polarization));
  set.modulation = rep.detuning - pr.detuning;
  set.rabi_rep = rep.rabi_frequency(scheme);
  set.relative_dephasing = repumper_relative_dephasing(pr, rep, env, scheme);
  return set;
}

}  // namespace cptspec
