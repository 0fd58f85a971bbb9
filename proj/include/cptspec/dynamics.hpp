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
 * @file dynamics.hpp
 * @brief Direct time integration of the three-laser master equation.
 *
 * This is the reference against which the Floquet solution is checked. The
 * complex state is integrated as interleaved real/imaginary doubles with an
 * embedded Dormand-Prince 5(4) pair.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <span>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "cptspec/floquet.hpp"

namespace cptspec {

struct EvolveOptions {
  double rel_tol = 1e-10;
  double abs_tol = 1e-12;
  double initial_step = 1e-11;  // s
  double min_step = 1e-20;      // s; below this the integration is abandoned
};

struct TrajectoryPoint {
  double t = 0.0;
  DensityMatrix state;
};

namespace detail {

using OdeState = std::vector<double>;

inline std::complex<double>* as_complex(OdeState& x) { return reinterpret_cast<std::complex<double>*>(x.data()); }
inline const std::complex<double>* as_complex(const OdeState& x) {
  return reinterpret_cast<const std::complex<double>*>(x.data());
}

/// Generator L(t) applied to `cols` stacked 64-vectors, plus optional running
/// integrals of e^{-i n dbar t} x(t) for each requested harmonic n.
class MasterEquationRhs {
 public:
  MasterEquationRhs(const LiouvillianSet& set, int cols, std::vector<int> harmonics = {})
      : set_(set), cols_(cols), harmonics_(std::move(harmonics)) {
    plus_ = set.L_plus.sparseView();
    minus_ = set.L_minus.sparseView();
  }

  std::size_t state_size() const { return 2 * static_cast<std::size_t>(kVecDim) * cols_ * (1 + harmonics_.size()); }

  void operator()(const OdeState& x, OdeState& dxdt, double t) const {
    using Block = Eigen::Map<const Eigen::MatrixXcd>;
    using MutBlock = Eigen::Map<Eigen::MatrixXcd>;
    const Block rho(as_complex(x), kVecDim, cols_);
    MutBlock out(as_complex(dxdt), kVecDim, cols_);
    const cd ph = std::polar(1.0, set_.modulation * t);
    out.noalias() = set_.L0 * rho;
    if (set_.rabi_rep != 0.0) {
      const double a = set_.drive();
      out += (a * ph) * (plus_ * rho);
      out += (a * std::conj(ph)) * (minus_ * rho);
    }
    const std::size_t block = static_cast<std::size_t>(kVecDim) * cols_;
    for (std::size_t h = 0; h < harmonics_.size(); ++h) {
      MutBlock acc(as_complex(dxdt) + block * (h + 1), kVecDim, cols_);
      acc = std::polar(1.0, -harmonics_[h] * set_.modulation * t) * rho;
    }
  }

 private:
  const LiouvillianSet& set_;
  int cols_;
  std::vector<int> harmonics_;
  SparseSuperOperator plus_;
  SparseSuperOperator minus_;
};

/// Adaptive integration of x from t0 to t1 with error control.
template <class Rhs>
void integrate(const Rhs& rhs, OdeState& x, double t0, double t1, double& dt, const EvolveOptions& opt) {
  namespace ode = boost::numeric::odeint;
  auto stepper = ode::make_controlled<ode::runge_kutta_dopri5<OdeState>>(opt.abs_tol, opt.rel_tol);
  double t = t0;
  while (t < t1) {
    double step = std::min(dt, t1 - t);
    const bool clipped = step < dt;
    const double before = step;
    if (stepper.try_step(rhs, x, t, step) == ode::success) {
      // On success `step` holds the suggested next step.
      if (!clipped || step > before) dt = step;
    } else {
      dt = step;
      if (dt < opt.min_step) throw Error("time_evolve: step-size underflow");
    }
  }
}

}  // namespace detail

/**
 * Integrates the master equation of `set` from rho0 at t = 0 and returns the
 * state at each requested time (non-decreasing, >= 0).
 */
inline std::vector<TrajectoryPoint> time_evolve(const DensityMatrix& rho0, const LiouvillianSet& set,
                                                std::span<const double> times, const EvolveOptions& opt = {}) {
  detail::MasterEquationRhs rhs(set, 1);
  detail::OdeState x(rhs.state_size());
  const StateVector v0 = vectorize(rho0);
  std::copy(v0.data(), v0.data() + kVecDim, detail::as_complex(x));

  std::vector<TrajectoryPoint> out;
  out.reserve(times.size());
  double t = 0.0;
  double dt = opt.initial_step;
  for (double target : times) {
    if (target < t) throw InvalidArgument("time_evolve: output times must be non-decreasing and >= 0");
    detail::integrate(rhs, x, t, target, dt, opt);
    t = target;
    StateVector v = Eigen::Map<const StateVector>(detail::as_complex(x), kVecDim);
    out.push_back({t, unvectorize(v)});
  }
  return out;
}

/// Periodic steady state of the driven problem found by shooting over whole periods.
struct PeriodicSolution {
  DensityMatrix initial;               // state at the start of a period
  std::vector<StateVector> harmonics;  // rho_n = (1/T) int rho(t) e^{-i n dbar t} dt, per requested n
  double period = 0.0;

  DensityMatrix mean() const { return unvectorize(harmonics.at(0)); }
};

/**
 * Reference solution for the time-averaged state. The one-period propagator M
 * is integrated column by column (64 columns at once); the periodic state is
 * the trace-one fixed point of M, and the Fourier coefficients are time
 * averages over the following period. `harmonics` must start with 0. With
 * Omega_rep = 0 or dbar = 0 the generator is constant and `static_window`
 * plays the role of the period.
 */
inline PeriodicSolution periodic_steady_state(const LiouvillianSet& set, std::vector<int> harmonics = {0},
                                              double static_window = 5e-8, const EvolveOptions& opt = {}) {
  if (harmonics.empty() || harmonics.front() != 0) throw InvalidArgument("periodic_steady_state: harmonics must start with 0");
  if (!(static_window > 0.0)) throw InvalidArgument("periodic_steady_state: static_window must be > 0");
  const bool driven = set.rabi_rep != 0.0 && set.modulation != 0.0;
  const double period = driven ? kTwoPi / std::abs(set.modulation) : static_window;

  detail::MasterEquationRhs prop(set, kVecDim);
  detail::OdeState m(prop.state_size());
  {
    Eigen::Map<Eigen::MatrixXcd> mm(detail::as_complex(m), kVecDim, kVecDim);
    mm.setIdentity();
  }
  double dt = opt.initial_step;
  detail::integrate(prop, m, 0.0, period, dt, opt);

  SuperOperator fixed = Eigen::Map<const Eigen::MatrixXcd>(detail::as_complex(m), kVecDim, kVecDim);
  fixed -= SuperOperator::Identity(kVecDim, kVecDim);
  const SteadyState start = solve_stationary(fixed);

  PeriodicSolution sol;
  sol.initial = start.state;
  sol.period = period;

  // The generator is periodic, so the following period starts again at t = 0.
  std::vector<int> integrals(harmonics);
  detail::MasterEquationRhs avg(set, 1, integrals);
  detail::OdeState x(avg.state_size(), 0.0);
  const StateVector v0 = vectorize(start.state);
  std::copy(v0.data(), v0.data() + kVecDim, detail::as_complex(x));
  dt = opt.initial_step;
  detail::integrate(avg, x, 0.0, period, dt, opt);
  for (std::size_t h = 0; h < harmonics.size(); ++h) {
    StateVector acc = Eigen::Map<const StateVector>(detail::as_complex(x) + kVecDim * (h + 1), kVecDim);
    sol.harmonics.push_back(acc / period);
  }
  return sol;
}

/// Averaged-state fluorescence against the period mean of the periodic solution.
struct OracleComparison {
  double floquet = 0.0;
  double oracle = 0.0;
  int n_max = 0;
  double deviation() const { return std::abs(floquet - oracle); }
};

/**
 * Compares averaged_steady_state with periodic_steady_state at one point. The
 * integrator has no phase diffusion, so both sides run with
 * relative_dephasing = 0.
 */
inline OracleComparison compare_with_oracle(const LiouvillianSet& set, const FloquetConfig& cfg = {},
                                            const EvolveOptions& opt = {}) {
  LiouvillianSet coherent = set;
  coherent.relative_dephasing = 0.0;
  const AveragedState av = averaged_steady_state(coherent, cfg);
  const PeriodicSolution ps = periodic_steady_state(coherent, {0}, 5e-8, opt);
  return {av.state.excited_population(), ps.mean().excited_population(), av.n_max};
}

/**
 * averaged_steady_state with truncation escalation: while the coherent
 * comparison with the oracle deviates by more than `tol`, n_max is doubled up
 * to cfg.cap. Throws if the cap is reached without agreement.
 */
inline AveragedState oracle_checked_state(const LiouvillianSet& set, FloquetConfig cfg, double tol = 1e-3) {
  if (set.drive() == 0.0) return averaged_steady_state(set, cfg);
  OracleComparison cmp = compare_with_oracle(set, cfg);
  cfg.n_max = cmp.n_max;
  while (cmp.deviation() > tol) {
    if (cfg.n_max >= cfg.cap)
      throw Error("floquet: no agreement with time integration at n_max = " + std::to_string(cfg.n_max) +
                  " (deviation " + std::to_string(cmp.deviation()) + ")");
    cfg.n_max = std::min(2 * cfg.n_max, cfg.cap);
    cmp = compare_with_oracle(set, cfg);
  }
  return averaged_steady_state(set, cfg);
}

}  // namespace cptspec
