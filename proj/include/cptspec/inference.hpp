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
 * @file inference.hpp
 * @brief Spectrum fitting, polarimetry estimators and D-D linewidth analysis.
 *
 * Fits minimize 0.5 * sum ((y - f) / sigma)^2 with Levenberg-Marquardt in
 * internal coordinates: log for strictly positive parameters, and
 * alpha = 90 deg * sin^2(u) for angles.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cptspec/config.hpp"
#include "cptspec/spectra.hpp"

namespace cptspec {

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

struct LmOptions {
  int max_iterations = 100;
  double gradient_tol = 1e-8;  // max_k |J_k . r| / (|J_k| |r|)
  double step_tol = 1e-10;     // |du| <= step_tol * (|u| + step_tol)
  double cost_tol = 1e-14;     // relative decrease of an accepted step
  double initial_damping = 1e-3;
  double max_damping = 1e16;
};

struct LeastSquaresProblem {
  /// Residual vector at u; false if u is not admissible (bounds, model failure).
  std::function<bool(const Eigen::VectorXd& u, Eigen::VectorXd& r)> residual;
  /// Jacobian dr/du given r(u). Empty: forward differences.
  std::function<void(const Eigen::VectorXd& u, const Eigen::VectorXd& r, Eigen::MatrixXd& j)> jacobian;
  double relative_step = 1e-6;
};

struct LmResult {
  Eigen::VectorXd u;
  double cost = 0.0;
  double initial_cost = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string reason;
};

/// Forward differences with step h_k = rel * max(|u_k|, 1); backward if the forward point is inadmissible.
inline void forward_difference_jacobian(const LeastSquaresProblem& p, const Eigen::VectorXd& u, const Eigen::VectorXd& r,
                                        Eigen::MatrixXd& j, int* evaluations = nullptr) {
  j.resize(r.size(), u.size());
  Eigen::VectorXd rk;
  for (int k = 0; k < u.size(); ++k) {
    const double h = p.relative_step * std::max(std::abs(u(k)), 1.0);
    Eigen::VectorXd up = u;
    up(k) += h;
    if (evaluations) ++*evaluations;
    if (p.residual(up, rk)) {
      j.col(k) = (rk - r) / h;
      continue;
    }
    up(k) = u(k) - h;
    if (evaluations) ++*evaluations;
    if (!p.residual(up, rk)) throw Error("jacobian: parameter " + std::to_string(k) + " cannot be perturbed");
    j.col(k) = (r - rk) / h;
  }
}

inline LmResult levenberg_marquardt(const LeastSquaresProblem& p, Eigen::VectorXd u, const LmOptions& opt = {}) {
  LmResult res;
  Eigen::VectorXd r, r_new;
  ++res.evaluations;
  if (!p.residual(u, r) || !r.allFinite()) throw Error("fit: model not evaluable at the initial point");
  double cost = 0.5 * r.squaredNorm();
  res.initial_cost = cost;
  double lambda = opt.initial_damping;
  Eigen::MatrixXd j;
  auto finish = [&](bool ok, std::string why) {
    res.u = u;
    res.cost = cost;
    res.converged = ok;
    res.reason = std::move(why);
    return res;
  };
  for (;;) {
    if (cost == 0.0) return finish(true, "zero residual");
    if (res.iterations >= opt.max_iterations) return finish(false, "maximum iterations reached");
    if (p.jacobian) {
      p.jacobian(u, r, j);
    } else {
      forward_difference_jacobian(p, u, r, j, &res.evaluations);
    }
    const Eigen::VectorXd g = j.transpose() * r;
    const Eigen::MatrixXd a = j.transpose() * j;
    const double rn = r.norm();
    double cosine = 0.0;
    for (int k = 0; k < g.size(); ++k) {
      const double c = std::sqrt(a(k, k));
      if (c > 0.0) cosine = std::max(cosine, std::abs(g(k)) / (c * rn));
    }
    if (cosine <= opt.gradient_tol) return finish(true, "gradient below tolerance");

    const double dmax = a.diagonal().maxCoeff();
    Eigen::VectorXd d = a.diagonal().cwiseMax(dmax > 0.0 ? 1e-15 * dmax : 1.0);
    for (;;) {
      Eigen::MatrixXd m = a;
      m.diagonal() += lambda * d;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
      Eigen::VectorXd step = ldlt.solve(-g);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        lambda *= 10.0;
        if (lambda > opt.max_damping) throw SingularMatrix("fit: singular normal equations after damping escalation");
        continue;
      }
      if (step.norm() <= opt.step_tol * (u.norm() + opt.step_tol)) return finish(true, "step below tolerance");
      const Eigen::VectorXd trial = u + step;
      ++res.evaluations;
      const bool ok = p.residual(trial, r_new) && r_new.allFinite();
      const double c_new = ok ? 0.5 * r_new.squaredNorm() : INFINITY;
      if (c_new < cost) {
        const double decrease = (cost - c_new) / cost;
        u = trial;
        r = r_new;
        cost = c_new;
        lambda = std::max(lambda / 3.0, 1e-12);
        ++res.iterations;
        if (decrease < opt.cost_tol) return finish(true, "cost decrease below tolerance");
        break;
      }
      lambda *= 10.0;
      if (lambda > opt.max_damping) return finish(cosine < 1e-4, "no decrease at maximum damping");
    }
  }
}

// ---------------------------------------------------------------------------
// Fit parameters

enum class FitParam { SDop, SPr, SRep, DeltaDop, DeltaRep, B, T, AlphaPr, AlphaRep, GammaDop, GammaPr, GammaRep, Scale, Offset };
enum class ParamTransform { Identity, Log, Angle };

struct ParamInfo {
  FitParam id;
  const char* name;
  const char* unit;
  ParamTransform transform;
};

inline const std::array<ParamInfo, 14>& param_table() {
  static const std::array<ParamInfo, 14> t{{
      {FitParam::SDop, "s_dop", "", ParamTransform::Log},
      {FitParam::SPr, "s_pr", "", ParamTransform::Log},
      {FitParam::SRep, "s_rep", "", ParamTransform::Log},
      {FitParam::DeltaDop, "delta_dop", "MHz", ParamTransform::Identity},
      {FitParam::DeltaRep, "delta_rep", "MHz", ParamTransform::Identity},
      {FitParam::B, "b", "G", ParamTransform::Identity},
      {FitParam::T, "t", "mK", ParamTransform::Log},
      {FitParam::AlphaPr, "alpha_pr", "deg", ParamTransform::Angle},
      {FitParam::AlphaRep, "alpha_rep", "deg", ParamTransform::Angle},
      {FitParam::GammaDop, "gamma_dop", "MHz", ParamTransform::Log},
      {FitParam::GammaPr, "gamma_pr", "MHz", ParamTransform::Log},
      {FitParam::GammaRep, "gamma_rep", "MHz", ParamTransform::Log},
      {FitParam::Scale, "scale", "counts", ParamTransform::Log},
      {FitParam::Offset, "offset", "counts", ParamTransform::Identity},
  }};
  return t;
}

inline const ParamInfo& param_info(FitParam id) { return param_table()[static_cast<int>(id)]; }

inline std::string valid_param_names() {
  std::string s;
  for (const auto& p : param_table()) s += (s.empty() ? "" : ", ") + std::string(p.name);
  return s;
}

inline FitParam parse_param(const std::string& name) {
  for (const auto& p : param_table())
    if (name == p.name) return p.id;
  throw InvalidArgument("unknown fit parameter '" + name + "'; valid names: " + valid_param_names());
}

inline bool is_repumper_param(FitParam id) {
  return id == FitParam::SRep || id == FitParam::DeltaRep || id == FitParam::AlphaRep || id == FitParam::GammaRep;
}

/// Linear polarization angle to B in degrees (0 = pi, 90 = sigma+ + sigma-).
inline double polarization_angle_deg(const Polarization& p) {
  const double side = std::sqrt(std::norm(p.amplitude(-1)) + std::norm(p.amplitude(1)));
  return units::rad_to_deg(std::atan2(side, std::abs(p.amplitude(0))));
}

/// Value in user units (MHz, G, mK, deg).
inline double get_param(const ExperimentConfig& cfg, FitParam id) {
  auto rep = [&]() -> const LaserField& {
    if (!cfg.repumper) throw InvalidArgument(std::string(param_info(id).name) + ": config has no repumper");
    return *cfg.repumper;
  };
  switch (id) {
    case FitParam::SDop: return cfg.doppler.saturation;
    case FitParam::SPr: return cfg.probe.saturation;
    case FitParam::SRep: return rep().saturation;
    case FitParam::DeltaDop: return units::rad_to_mhz(cfg.doppler.detuning);
    case FitParam::DeltaRep: return units::rad_to_mhz(rep().detuning);
    case FitParam::B: return cfg.environment.b_gauss;
    case FitParam::T: return cfg.environment.temperature * 1e3;
    case FitParam::AlphaPr: return polarization_angle_deg(cfg.probe.polarization);
    case FitParam::AlphaRep: return polarization_angle_deg(rep().polarization);
    case FitParam::GammaDop: return units::rad_to_mhz(cfg.doppler.linewidth);
    case FitParam::GammaPr: return units::rad_to_mhz(cfg.probe.linewidth);
    case FitParam::GammaRep: return units::rad_to_mhz(rep().linewidth);
    case FitParam::Scale: return cfg.detector.scale;
    case FitParam::Offset: return cfg.detector.offset;
  }
  return 0.0;
}

inline void set_param(ExperimentConfig& cfg, FitParam id, double v) {
  auto rep = [&]() -> LaserField& {
    if (!cfg.repumper) throw InvalidArgument(std::string(param_info(id).name) + ": config has no repumper");
    return *cfg.repumper;
  };
  switch (id) {
    case FitParam::SDop: cfg.doppler.saturation = v; break;
    case FitParam::SPr: cfg.probe.saturation = v; break;
    case FitParam::SRep: rep().saturation = v; break;
    case FitParam::DeltaDop: cfg.doppler.detuning = units::mhz_to_rad(v); break;
    case FitParam::DeltaRep: rep().detuning = units::mhz_to_rad(v); break;
    case FitParam::B: cfg.environment.b_gauss = v; break;
    case FitParam::T: cfg.environment.temperature = v * 1e-3; break;
    case FitParam::AlphaPr: cfg.probe.polarization = Polarization::linear(units::deg_to_rad(v)); break;
    case FitParam::AlphaRep: rep().polarization = Polarization::linear(units::deg_to_rad(v)); break;
    case FitParam::GammaDop: cfg.doppler.linewidth = units::mhz_to_rad(v); break;
    case FitParam::GammaPr: cfg.probe.linewidth = units::mhz_to_rad(v); break;
    case FitParam::GammaRep: rep().linewidth = units::mhz_to_rad(v); break;
    case FitParam::Scale: cfg.detector.scale = v; break;
    case FitParam::Offset: cfg.detector.offset = v; break;
  }
}

inline double to_internal(ParamTransform t, double v) {
  switch (t) {
    case ParamTransform::Log: return std::log(v);
    case ParamTransform::Angle: return std::asin(std::sqrt(std::clamp(v / 90.0, 0.0, 1.0)));
    case ParamTransform::Identity: return v;
  }
  return v;
}

inline double to_physical(ParamTransform t, double u) {
  switch (t) {
    case ParamTransform::Log: return std::exp(u);
    case ParamTransform::Angle: {
      const double s = std::sin(u);
      return 90.0 * s * s;
    }
    case ParamTransform::Identity: return u;
  }
  return u;
}

// ---------------------------------------------------------------------------
// Model evaluation

/// Populations keyed by config snapshot and detuning grid; safe to share across fits.
class ModelCache {
 public:
  std::optional<std::vector<double>> find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    const auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void insert(const std::string& key, std::vector<double> v) {
    std::lock_guard lock(mutex_);
    map_.emplace(key, std::move(v));
  }
  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return map_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<double>> map_;
};

/// Excited population rho_33 + rho_44 at each detuning (rad/s); NaN marks failed points.
inline std::vector<double> model_populations(const ExperimentConfig& cfg, const std::vector<double>& detunings,
                                             int threads = 0, ModelCache* cache = nullptr) {
  std::string key;
  if (cache) {
    std::ostringstream k;
    k << to_ini(cfg) << "#";
    std::string grid(reinterpret_cast<const char*>(detunings.data()), detunings.size() * sizeof(double));
    k << fnv1a_hex(grid) << ":" << detunings.size();
    key = k.str();
    if (auto hit = cache->find(key)) return *hit;
  }
  ExperimentConfig c = cfg;
  c.detector = {};
  const ScanModel model(c);
  ScanOptions so;
  so.threads = threads;
  const SpectrumCurve curve = scan_detunings(model, detunings, so).curve;
  std::vector<double> out = curve.fluorescence;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (curve.diagnostics[i].flag == PointFlag::Failed) out[i] = std::numeric_limits<double>::quiet_NaN();
  if (cache) cache->insert(key, out);
  return out;
}

// ---------------------------------------------------------------------------
// Spectrum fits

struct FitParameter {
  FitParam id = FitParam::SDop;
  double initial = std::numeric_limits<double>::quiet_NaN();  // NaN: take the config value
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

struct FitProblem {
  SpectrumCurve observed;
  ExperimentConfig config;  // template; free parameters are overwritten
  std::vector<FitParameter> free;
  LmOptions lm;
  double relative_step = 1e-6;
  int threads = 0;
  std::shared_ptr<ModelCache> cache;
};

struct FitEstimate {
  FitParam id = FitParam::SDop;
  std::string name;
  std::string unit;
  double value = 0.0;
  double sigma = 0.0;  // +inf when not identifiable
  double initial = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct FitResult {
  std::vector<FitEstimate> estimates;
  ExperimentConfig config;  // template with the estimates applied
  double cost = 0.0;
  double initial_cost = 0.0;
  double reduced_chi2 = 0.0;
  int dof = 0;
  Eigen::MatrixXd covariance;  // user units, estimate order
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  bool identifiable = true;
  std::string reason;
  bool poisson_weights = false;
  std::vector<double> model;  // fitted curve on the observed grid

  const FitEstimate& at(FitParam id) const {
    for (const auto& e : estimates)
      if (e.id == id) return e;
    throw InvalidArgument(std::string("fit result has no parameter ") + param_info(id).name);
  }
};

namespace detail {

struct FitSetup {
  std::vector<FitParameter> params;
  std::vector<int> physics;  // indices of parameters that need a model evaluation
  int scale_index = -1;
  int offset_index = -1;
};

inline FitSetup prepare_fit(const FitProblem& pb) {
  FitSetup s;
  const int n = static_cast<int>(pb.observed.size());
  const int p = static_cast<int>(pb.free.size());
  if (p == 0) throw InvalidArgument("fit: no free parameters");
  if (n < 3 * p) throw InvalidArgument("fit: need at least 3 data points per free parameter");
  for (double y : pb.observed.fluorescence)
    if (!std::isfinite(y)) throw InvalidArgument("fit: observed values must be finite");
  std::vector<bool> seen(param_table().size(), false);
  for (int k = 0; k < p; ++k) {
    FitParameter fp = pb.free[k];
    const ParamInfo& info = param_info(fp.id);
    if (seen[static_cast<int>(fp.id)]) throw InvalidArgument(std::string("fit: parameter listed twice: ") + info.name);
    seen[static_cast<int>(fp.id)] = true;
    if (is_repumper_param(fp.id) && !pb.config.repumper)
      throw InvalidArgument(std::string("fit: ") + info.name + " needs a repumper in the config");
    if (std::isnan(fp.initial)) fp.initial = get_param(pb.config, fp.id);
    if (info.transform == ParamTransform::Angle) {
      fp.lower = std::max(fp.lower, 0.0);
      fp.upper = std::min(fp.upper, 90.0);
    }
    if (info.transform == ParamTransform::Log) fp.lower = std::max(fp.lower, 0.0);
    if (!(fp.lower <= fp.upper)) throw InvalidArgument(std::string("fit: ") + info.name + ": lower bound above upper bound");
    if (info.transform == ParamTransform::Log && !(fp.initial > 0.0))
      throw InvalidArgument(std::string("fit: ") + info.name + ": initial value must be > 0");
    if (!(fp.initial >= fp.lower && fp.initial <= fp.upper))
      throw InvalidArgument(std::string("fit: ") + info.name + ": initial value outside its bounds");
    s.params.push_back(fp);
    if (fp.id == FitParam::Scale) s.scale_index = k;
    else if (fp.id == FitParam::Offset) s.offset_index = k;
    else s.physics.push_back(k);
  }
  return s;
}

/// Pseudo-inverse of a normal matrix with column scaling; parameters touching the null space get +inf variance.
inline Eigen::MatrixXd covariance_from_normal(const Eigen::MatrixXd& a, bool& identifiable) {
  const int p = static_cast<int>(a.rows());
  identifiable = true;
  Eigen::VectorXd d(p);
  for (int k = 0; k < p; ++k) d(k) = a(k, k) > 0.0 ? 1.0 / std::sqrt(a(k, k)) : 0.0;
  const Eigen::MatrixXd c = d.asDiagonal() * a * d.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double emax = std::max(ev.maxCoeff(), 0.0);
  Eigen::MatrixXd inv = Eigen::MatrixXd::Zero(p, p);
  std::vector<bool> bad(p, false);
  for (int k = 0; k < p; ++k)
    if (d(k) == 0.0) bad[k] = true;
  for (int i = 0; i < p; ++i) {
    const Eigen::VectorXd v = es.eigenvectors().col(i);
    if (ev(i) > 1e-12 * emax && emax > 0.0) {
      inv += v * v.transpose() / ev(i);
    } else {
      for (int k = 0; k < p; ++k)
        if (std::abs(v(k)) > 1e-3) bad[k] = true;
    }
  }
  Eigen::MatrixXd cov = d.asDiagonal() * inv * d.asDiagonal();
  for (int k = 0; k < p; ++k)
    if (bad[k]) {
      identifiable = false;
      cov.row(k).setConstant(std::numeric_limits<double>::quiet_NaN());
      cov.col(k).setConstant(std::numeric_limits<double>::quiet_NaN());
      cov(k, k) = std::numeric_limits<double>::infinity();
    }
  return cov;
}

}  // namespace detail

/**
 * Weighted least-squares fit of `observed` over the free parameters.
 * Poisson weights sigma = sqrt(counts) when the data are noisy counts, unit
 * weights otherwise (then the covariance is scaled by the reduced chi^2).
 * Scale and offset enter linearly and get analytic Jacobian columns.
 */
inline FitResult fit_spectrum(const FitProblem& pb) {
  const detail::FitSetup setup = detail::prepare_fit(pb);
  const auto& params = setup.params;
  const int p = static_cast<int>(params.size());
  const int n = static_cast<int>(pb.observed.size());
  const std::vector<double> sig = pb.observed.sigma();
  const Eigen::Map<const Eigen::VectorXd> y(pb.observed.fluorescence.data(), n);
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w(i) = 1.0 / sig[i];

  auto physical = [&](const Eigen::VectorXd& u, int k) { return to_physical(param_info(params[k].id).transform, u(k)); };
  auto config_at = [&](const Eigen::VectorXd& u) {
    ExperimentConfig c = pb.config;
    for (int k = 0; k < p; ++k) set_param(c, params[k].id, physical(u, k));
    return c;
  };
  auto in_bounds = [&](const Eigen::VectorXd& u) {
    for (int k = 0; k < p; ++k) {
      const double v = physical(u, k);
      if (!(v >= params[k].lower && v <= params[k].upper)) return false;
      if (param_info(params[k].id).transform == ParamTransform::Log && !(v > 0.0)) return false;
    }
    return true;
  };
  // Populations at the physics part of u; scale/offset do not change them.
  auto populations = [&](const ExperimentConfig& c) -> std::optional<Eigen::VectorXd> {
    try {
      const auto pop = model_populations(c, pb.observed.detuning, pb.threads, pb.cache.get());
      return Eigen::Map<const Eigen::VectorXd>(pop.data(), n).eval();
    } catch (const InvalidArgument&) {
      return std::nullopt;  // e.g. a parameter left the physical domain
    }
  };
  Eigen::VectorXd last_u, last_pop;
  auto pops_at = [&](const Eigen::VectorXd& u) -> std::optional<Eigen::VectorXd> {
    if (last_u.size() == u.size()) {
      bool same = true;
      for (int k : setup.physics) same = same && last_u(k) == u(k);
      if (same) return last_pop;
    }
    auto pop = populations(config_at(u));
    if (pop) {
      last_u = u;
      last_pop = *pop;
    }
    return pop;
  };
  auto curve = [&](const ExperimentConfig& c, const Eigen::VectorXd& pop) {
    return (c.detector.scale * pop.array() + c.detector.offset).matrix();
  };

  LeastSquaresProblem ls;
  ls.relative_step = pb.relative_step;
  ls.residual = [&](const Eigen::VectorXd& u, Eigen::VectorXd& r) {
    if (!in_bounds(u)) return false;
    const auto pop = pops_at(u);
    if (!pop) return false;
    r = ((y - curve(config_at(u), *pop)).array() * w.array()).matrix();
    return r.allFinite();
  };
  int jac_evals = 0;
  ls.jacobian = [&](const Eigen::VectorXd& u, const Eigen::VectorXd& r, Eigen::MatrixXd& j) {
    j.resize(n, p);
    const ExperimentConfig c = config_at(u);
    const Eigen::VectorXd pop = *pops_at(u);
    if (setup.scale_index >= 0) j.col(setup.scale_index) = -(c.detector.scale * pop.array() * w.array()).matrix();
    if (setup.offset_index >= 0) j.col(setup.offset_index) = -w;
    Eigen::VectorXd rk;
    for (int k : setup.physics) {
      const double h = ls.relative_step * std::max(std::abs(u(k)), 1.0);
      Eigen::VectorXd up = u;
      up(k) += h;
      double step = h;
      if (!in_bounds(up)) {
        up(k) = u(k) - h;
        step = -h;
      }
      ++jac_evals;
      const auto pk = populations(config_at(up));
      if (!pk) throw Error(std::string("fit: cannot perturb ") + param_info(params[k].id).name);
      rk = ((y - curve(config_at(up), *pk)).array() * w.array()).matrix();
      j.col(k) = (rk - r) / step;
    }
  };

  Eigen::VectorXd u0(p);
  for (int k = 0; k < p; ++k) u0(k) = to_internal(param_info(params[k].id).transform, params[k].initial);
  const LmResult lm = levenberg_marquardt(ls, u0, pb.lm);

  FitResult res;
  res.config = config_at(lm.u);
  res.cost = lm.cost;
  res.initial_cost = lm.initial_cost;
  res.iterations = lm.iterations;
  res.evaluations = lm.evaluations + jac_evals;
  res.converged = lm.converged;
  res.reason = lm.reason;
  res.dof = n - p;
  res.reduced_chi2 = 2.0 * lm.cost / std::max(res.dof, 1);
  res.poisson_weights = pb.observed.noisy;

  // Covariance from a Jacobian in user units at the optimum.
  const Eigen::VectorXd pop = *pops_at(lm.u);
  const Eigen::VectorXd f = curve(res.config, pop);
  res.model.assign(f.data(), f.data() + n);
  Eigen::MatrixXd jv(n, p);
  for (int k = 0; k < p; ++k) {
    const FitParameter& fp = params[k];
    const double v = get_param(res.config, fp.id);
    if (fp.id == FitParam::Scale) {
      jv.col(k) = (pop.array() * w.array()).matrix();
      continue;
    }
    if (fp.id == FitParam::Offset) {
      jv.col(k) = w;
      continue;
    }
    double h = pb.relative_step * std::max(std::abs(v), 1.0);
    if (v + h > fp.upper) h = -h;
    ExperimentConfig c = res.config;
    set_param(c, fp.id, v + h);
    const auto pk = populations(c);
    ++res.evaluations;
    if (!pk) throw Error(std::string("fit: cannot perturb ") + param_info(fp.id).name + " at the optimum");
    jv.col(k) = ((curve(c, *pk) - f).array() * w.array()).matrix() / h;
  }
  bool identifiable = true;
  res.covariance = detail::covariance_from_normal(jv.transpose() * jv, identifiable);
  if (!pb.observed.noisy) res.covariance *= res.reduced_chi2;
  res.identifiable = identifiable;
  for (int k = 0; k < p; ++k) {
    const FitParameter& fp = params[k];
    const ParamInfo& info = param_info(fp.id);
    const double var = res.covariance(k, k);
    res.estimates.push_back({fp.id, info.name, info.unit, get_param(res.config, fp.id),
                             std::isfinite(var) ? std::sqrt(std::max(var, 0.0)) : INFINITY, fp.initial, fp.lower,
                             fp.upper});
  }
  return res;
}

/// Stage 1 fits the reference spectrum with the repumper off; stage 2 fits the
/// repumper parameters on the three-laser spectrum with stage-1 values frozen.
struct TwoStageFit {
  FitResult reference;
  FitResult repumper;
  ExperimentConfig config;
};

inline TwoStageFit two_stage_fit(const SpectrumCurve& reference, const SpectrumCurve& three_laser, const ExperimentConfig& cfg,
                                 const std::vector<FitParameter>& reference_free,
                                 std::vector<FitParameter> repumper_free = {{FitParam::SRep}, {FitParam::DeltaRep}},
                                 int threads = 0) {
  if (!cfg.repumper) throw InvalidArgument("two_stage_fit: the config needs a repumper");
  for (const auto& fp : reference_free)
    if (is_repumper_param(fp.id))
      throw InvalidArgument(std::string("two_stage_fit: ") + param_info(fp.id).name + " belongs to stage 2");
  TwoStageFit out;
  FitProblem first;
  first.observed = reference;
  first.config = cfg;
  first.config.repumper->saturation = 0.0;
  first.free = reference_free;
  first.threads = threads;
  out.reference = fit_spectrum(first);

  FitProblem second;
  second.observed = three_laser;
  second.config = out.reference.config;
  second.config.repumper = cfg.repumper;
  second.free = std::move(repumper_free);
  second.threads = threads;
  out.repumper = fit_spectrum(second);
  out.config = out.repumper.config;
  return out;
}

// ---------------------------------------------------------------------------
// Probe polarimetry

struct AngleOptions {
  bool free_scale = false;
  bool free_offset = false;
  int threads = 0;
  std::shared_ptr<ModelCache> cache;  // reuse the starting-grid evaluations across data sets
  LmOptions lm;
};

struct AngleEstimate {
  double alpha_deg = 0.0;
  double sigma_deg = 0.0;
  bool identifiable = true;
  bool converged = false;
  double start_deg = 0.0;
  FitResult fit;
};

/// Starting angles of the initialization heuristic. The ends are moved off 0 and 90 deg where d alpha / du = 0.
inline constexpr std::array<double, 5> kAngleStarts{0.5, 22.5, 45.0, 67.5, 89.5};

/**
 * Fits alpha_pr with everything else known. Starts from the best of five
 * angles. Without a repumper the angle is only readable from resonance
 * structure, so a fitted model with no dark resonances is non-identifiable.
 */
inline AngleEstimate estimate_probe_angle(const SpectrumCurve& observed, const ExperimentConfig& known,
                                          const AngleOptions& opt = {}) {
  const std::vector<double> sig = observed.sigma();
  double best = INFINITY, start = kAngleStarts[0];
  for (double a : kAngleStarts) {
    ExperimentConfig c = known;
    set_param(c, FitParam::AlphaPr, a);
    const auto pop = model_populations(c, observed.detuning, opt.threads, opt.cache.get());
    double cost = 0.0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
      const double r = (observed.fluorescence[i] - (c.detector.scale * pop[i] + c.detector.offset)) / sig[i];
      cost += 0.5 * r * r;
    }
    if (cost < best) {
      best = cost;
      start = a;
    }
  }
  FitProblem pb;
  pb.observed = observed;
  pb.config = known;
  pb.free = {{FitParam::AlphaPr, start}};
  if (opt.free_scale) pb.free.push_back({FitParam::Scale});
  if (opt.free_offset) pb.free.push_back({FitParam::Offset});
  pb.threads = opt.threads;
  pb.lm = opt.lm;
  AngleEstimate est;
  est.start_deg = start;
  est.fit = fit_spectrum(pb);
  const FitEstimate& a = est.fit.at(FitParam::AlphaPr);
  est.alpha_deg = a.value;
  est.sigma_deg = a.sigma;
  est.converged = est.fit.converged;
  est.identifiable = est.fit.identifiable;
  if (!known.has_repumper() || known.repumper->saturation == 0.0) {
    // Populations below 1e-9 are rounding noise of a dark state, not structure.
    MinimumOptions mo;
    mo.absolute_floor = 1e-9 * std::abs(est.fit.config.detector.scale);
    if (find_local_minima(est.fit.model, est.fit.config.detector.offset, mo).empty()) est.identifiable = false;
  }
  if (!est.identifiable) est.sigma_deg = INFINITY;
  return est;
}

// ---------------------------------------------------------------------------
// Repumper (kicking) polarimetry

using DepthVector = std::array<double, 4>;

/// Four sigma depths read from a curve (full or windowed).
inline DepthVector depth_vector(const SpectrumCurve& curve, const ResonanceSet& sigma, const DepthOptions& depth = {}) {
  const ResonanceSet d = resonance_depths(curve, sigma, depth);
  DepthVector out{};
  for (int k = 0; k < 4; ++k) out[k] = d[k].depth;
  return out;
}

inline ResonanceSet sigma_resonances(const ExperimentConfig& cfg) {
  ResonanceSet out;
  for (const auto& r : predict_resonance_positions(cfg))
    if (r.kind == ResonanceKind::Sigma) out.push_back(r);
  return out;
}

/**
 * Depths of the four sigma resonances, evaluated only on the grid points the
 * depth convention reads (windows of +-background_outer steps). The values
 * equal those of a full scan on the same grid.
 */
inline DepthVector sigma_depths(const ExperimentConfig& cfg, const DepthOptions& depth = {}, const ScanOptions& scan = {},
                                SpectrumCurve* windowed = nullptr) {
  const ResonanceSet sigma = sigma_resonances(cfg);
  if (sigma.size() != 4) throw InvalidArgument("sigma_depths: expected 4 sigma resonances (B > 0 and a sigma-polarized probe)");
  const std::vector<double> full = grid_detunings(cfg.grid);
  std::vector<int> idx;
  for (const auto& r : sigma) {
    const int i0 = nearest_index(full, r.position);
    for (int i = std::max(0, i0 - depth.background_outer); i <= std::min<int>(full.size() - 1, i0 + depth.background_outer); ++i)
      idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  std::vector<double> det;
  for (int i : idx) det.push_back(full[i]);
  const ScanModel model(cfg);
  const SpectrumCurve c = scan_detunings(model, det, scan).curve;
  if (windowed) *windowed = c;
  return depth_vector(c, sigma, depth);
}

/// Hash of the settings a kicking calibration depends on (the repumper angle excluded).
inline std::string kicking_config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  if (c.repumper) c.repumper->polarization = Polarization::pi();
  return config_hash(c);
}

struct KickingCalibration {
  std::vector<double> alpha_deg;
  std::vector<DepthVector> depths;
  std::string config_hash;

  void validate() const {
    if (alpha_deg.size() < 2 || alpha_deg.size() != depths.size())
      throw InvalidArgument("calibration: need at least two angles with one depth vector each");
    if (alpha_deg.front() != 0.0 || alpha_deg.back() != 90.0) throw InvalidArgument("calibration: grid must cover [0, 90] deg");
    for (std::size_t i = 1; i < alpha_deg.size(); ++i)
      if (!(alpha_deg[i] > alpha_deg[i - 1])) throw InvalidArgument("calibration: angles must increase");
    for (const auto& d : depths)
      for (double v : d)
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("calibration: depths must lie in [0, 1]");
  }

  /// Linear interpolation at alpha in [0, 90].
  DepthVector at(double alpha) const {
    if (alpha <= alpha_deg.front()) return depths.front();
    if (alpha >= alpha_deg.back()) return depths.back();
    const auto it = std::upper_bound(alpha_deg.begin(), alpha_deg.end(), alpha);
    const std::size_t i = it - alpha_deg.begin() - 1;
    const double t = (alpha - alpha_deg[i]) / (alpha_deg[i + 1] - alpha_deg[i]);
    DepthVector d;
    for (int k = 0; k < 4; ++k) d[k] = depths[i][k] + t * (depths[i + 1][k] - depths[i][k]);
    return d;
  }

  void write_csv(std::ostream& out) const {
    out << "# format=cptspec-kicking-calibration-1\n# config_hash=" << config_hash << "\n";
    out << "alpha_deg,depth1,depth2,depth3,depth4\n";
    char buf[64];
    for (std::size_t i = 0; i < alpha_deg.size(); ++i) {
      out << format_number(alpha_deg[i]);
      for (double v : depths[i]) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out << buf;
      }
      out << "\n";
    }
  }

  static KickingCalibration read_csv(std::istream& in, const std::string& name = "calibration") {
    KickingCalibration c;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (line.rfind("# config_hash=", 0) == 0) {
        c.config_hash = line.substr(14);
        continue;
      }
      if (line.front() == '#') continue;
      if (!header) {
        if (line != "alpha_deg,depth1,depth2,depth3,depth4") throw InvalidArgument(name + ": unexpected column header '" + line + "'");
        header = true;
        continue;
      }
      std::istringstream row(line);
      std::string cell;
      std::vector<double> v;
      while (std::getline(row, cell, ',')) {
        try {
          v.push_back(std::stod(cell));
        } catch (const std::exception&) {
          throw InvalidArgument(name + ": malformed row '" + line + "'");
        }
      }
      if (v.size() != 5) throw InvalidArgument(name + ": expected 5 columns in '" + line + "'");
      c.alpha_deg.push_back(v[0]);
      c.depths.push_back({v[1], v[2], v[3], v[4]});
    }
    if (c.config_hash.empty()) throw InvalidArgument(name + ": missing config_hash header");
    c.validate();
    return c;
  }
};

/**
 * Depth vectors at alpha_rep = 0, step, ..., 90 deg with every other setting
 * taken from `cfg` (which must have a repumper and a sigma probe).
 */
inline KickingCalibration build_kicking_calibration(const ExperimentConfig& cfg, double step_deg = 5.0,
                                                    const ScanOptions& scan = {}, const DepthOptions& depth = {}) {
  if (!cfg.repumper) throw InvalidArgument("calibration: the config needs a repumper");
  if (!(step_deg > 0.0) || std::abs(90.0 / step_deg - std::round(90.0 / step_deg)) > 1e-9)
    throw InvalidArgument("calibration: step must divide 90 deg");
  KickingCalibration cal;
  cal.config_hash = kicking_config_hash(cfg);
  const int n = static_cast<int>(std::round(90.0 / step_deg)) + 1;
  cal.alpha_deg.resize(n);
  cal.depths.resize(n);
  for (int i = 0; i < n; ++i) {
    cal.alpha_deg[i] = i == n - 1 ? 90.0 : i * step_deg;
    ExperimentConfig c = cfg;
    set_param(c, FitParam::AlphaRep, cal.alpha_deg[i]);
    cal.depths[i] = sigma_depths(c, depth, scan);
    for (double& v : cal.depths[i])
      if (!std::isfinite(v)) throw Error("calibration: depth window clipped by the scan grid");
  }
  return cal;
}

/// Lawson-Hanson non-negative least squares: min |A x - b| subject to x >= 0.
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iter = 500) {
  const int n = static_cast<int>(a.cols());
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(n, false);
  const double tol = 1e-14 * n * std::max(1.0, a.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff());
  auto solve_passive = [&]() {
    std::vector<int> idx;
    for (int j = 0; j < n; ++j)
      if (passive[j]) idx.push_back(j);
    Eigen::MatrixXd ap(a.rows(), idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) ap.col(k) = a.col(idx[k]);
    const Eigen::VectorXd zp = ap.colPivHouseholderQr().solve(b);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zp(k);
    return z;
  };
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd wgrad = a.transpose() * (b - a * x);
    int jmax = -1;
    for (int j = 0; j < n; ++j)
      if (!passive[j] && wgrad(j) > tol && (jmax < 0 || wgrad(j) > wgrad(jmax))) jmax = j;
    if (jmax < 0) break;
    passive[jmax] = true;
    for (int inner = 0; inner < max_iter; ++inner) {
      const Eigen::VectorXd z = solve_passive();
      bool feasible = true;
      for (int j = 0; j < n; ++j)
        if (passive[j] && z(j) <= 0.0) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      double alpha = 1.0;
      for (int j = 0; j < n; ++j)
        if (passive[j] && z(j) <= 0.0) alpha = std::min(alpha, x(j) / (x(j) - z(j)));
      x += alpha * (z - x);
      for (int j = 0; j < n; ++j)
        if (passive[j] && x(j) <= 1e-15) {
          passive[j] = false;
          x(j) = 0.0;
        }
    }
  }
  return x;
}

/**
 * Distance from `d` to the convex hull of the calibration depth vectors:
 * min |[D; 1] lambda - [d; 1]| over lambda >= 0. It is zero exactly when d is
 * a convex combination of calibration points.
 */
inline double hull_distance(const DepthVector& d, const KickingCalibration& cal) {
  const int m = static_cast<int>(cal.depths.size());
  Eigen::MatrixXd a(5, m);
  Eigen::VectorXd b(5);
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < 4; ++k) a(k, i) = cal.depths[i][k];
    a(4, i) = 1.0;
  }
  for (int k = 0; k < 4; ++k) b(k) = d[k];
  b(4) = 1.0;
  return (a * nnls(a, b) - b).norm();
}

struct RepumperAngleEstimate {
  double alpha_deg = 0.0;
  double sigma_deg = 0.0;
  double distance = 0.0;  // weighted squared distance at the optimum
  bool extrapolated = false;
};

/**
 * argmin over alpha of sum_k w_k (d_k - D_k(alpha))^2 with D the linearly
 * interpolated calibration. Each segment is a quadratic in alpha and is
 * minimized exactly. sigma = sqrt(2 s^2 / chi''), with s^2 = 1 when depth
 * uncertainties are given and the residual variance otherwise.
 */
inline RepumperAngleEstimate estimate_repumper_angle(const DepthVector& depths, const KickingCalibration& cal,
                                                     const std::optional<DepthVector>& depth_sigma = std::nullopt,
                                                     double hull_tol = 1e-6) {
  cal.validate();
  for (double v : depths)
    if (!std::isfinite(v)) throw InvalidArgument("kicking estimator: depths must be finite");
  DepthVector w{1, 1, 1, 1};
  if (depth_sigma)
    for (int k = 0; k < 4; ++k) {
      if (!((*depth_sigma)[k] > 0.0)) throw InvalidArgument("kicking estimator: depth uncertainties must be > 0");
      w[k] = 1.0 / ((*depth_sigma)[k] * (*depth_sigma)[k]);
    }
  const std::size_t segs = cal.alpha_deg.size() - 1;
  double best = INFINITY, best_alpha = 0.0;
  std::size_t best_seg = 0;
  for (std::size_t i = 0; i < segs; ++i) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double slope = cal.depths[i + 1][k] - cal.depths[i][k];
      num += w[k] * (depths[k] - cal.depths[i][k]) * slope;
      den += w[k] * slope * slope;
    }
    const double t = den > 0.0 ? std::clamp(num / den, 0.0, 1.0) : 0.0;
    double chi = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double r = depths[k] - (cal.depths[i][k] + t * (cal.depths[i + 1][k] - cal.depths[i][k]));
      chi += w[k] * r * r;
    }
    if (chi < best - 1e-15) {
      best = chi;
      best_alpha = cal.alpha_deg[i] + t * (cal.alpha_deg[i + 1] - cal.alpha_deg[i]);
      best_seg = i;
    }
  }
  // Curvature: d^2 chi / d alpha^2 = 2 sum w (dD/d alpha)^2, averaged over the segments meeting at a node.
  auto curvature = [&](std::size_t i) {
    const double da = cal.alpha_deg[i + 1] - cal.alpha_deg[i];
    double c = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double s = (cal.depths[i + 1][k] - cal.depths[i][k]) / da;
      c += 2.0 * w[k] * s * s;
    }
    return c;
  };
  double curv = curvature(best_seg);
  const bool at_left = best_alpha == cal.alpha_deg[best_seg];
  const bool at_right = best_alpha == cal.alpha_deg[best_seg + 1];
  if (at_left && best_seg > 0) curv = 0.5 * (curv + curvature(best_seg - 1));
  if (at_right && best_seg + 1 < segs) curv = 0.5 * (curv + curvature(best_seg + 1));
  const double s2 = depth_sigma ? 1.0 : best / 3.0;
  RepumperAngleEstimate est;
  est.alpha_deg = best_alpha;
  est.distance = best;
  est.sigma_deg = curv > 0.0 ? std::sqrt(2.0 * s2 / curv) : INFINITY;
  est.extrapolated = hull_distance(depths, cal) > hull_tol;
  return est;
}

// ---------------------------------------------------------------------------
// Lorentzian linewidths and D-D thermometry

struct LorentzianFit {
  double center_mhz = 0.0;
  double fwhm_mhz = 0.0;
  double amplitude = 0.0;  // dip depth below the background
  bool ok = false;
  std::string message;
};

/**
 * Joint fit of dips near `centers_mhz` to
 *
 *   y = b0 + b1 x + b2 x^2 - sum_j A_j g_j^2 / ((x - x_j)^2 + g_j^2),  g_j = FWHM_j / 2,
 *
 * (x relative to the mean center) over the points within half_window_mhz of
 * any center. Overlapping resonances must be fitted together.
 */
inline std::vector<LorentzianFit> fit_lorentzian_dips(const std::vector<double>& x_mhz, const std::vector<double>& y,
                                                      const std::vector<double>& centers_mhz, double half_window_mhz) {
  const int nd = static_cast<int>(centers_mhz.size());
  std::vector<LorentzianFit> out(nd);
  if (nd == 0) return out;
  const double lo = *std::min_element(centers_mhz.begin(), centers_mhz.end()) - half_window_mhz;
  const double hi = *std::max_element(centers_mhz.begin(), centers_mhz.end()) + half_window_mhz;
  const double mid = 0.5 * (lo + hi);
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < x_mhz.size(); ++i)
    if (x_mhz[i] >= lo && x_mhz[i] <= hi && std::isfinite(y[i])) {
      xs.push_back(x_mhz[i] - mid);
      ys.push_back(y[i]);
    }
  const int m = static_cast<int>(xs.size());
  if (m < 3 * nd + 6) {
    for (auto& f : out) f.message = "too few points in the window";
    return out;
  }
  // Starting background: quadratic regression over the points away from every
  // center (all points if too few remain).
  auto far = [&](double x) {
    for (double c : centers_mhz)
      if (std::abs(x + mid - c) < 0.5 * half_window_mhz) return false;
    return true;
  };
  std::vector<int> bg_idx;
  for (int i = 0; i < m; ++i)
    if (far(xs[i])) bg_idx.push_back(i);
  if (bg_idx.size() < 6) {
    bg_idx.resize(m);
    std::iota(bg_idx.begin(), bg_idx.end(), 0);
  }
  Eigen::MatrixXd a(bg_idx.size(), 3);
  Eigen::VectorXd yv(bg_idx.size());
  for (std::size_t k = 0; k < bg_idx.size(); ++k) {
    const double x = xs[bg_idx[k]];
    a.row(k) << 1.0, x, x * x;
    yv(k) = ys[bg_idx[k]];
  }
  const Eigen::Vector3d bg = a.colPivHouseholderQr().solve(yv);
  Eigen::VectorXd resid(m);
  for (int i = 0; i < m; ++i) resid(i) = ys[i] - (bg(0) + bg(1) * xs[i] + bg(2) * xs[i] * xs[i]);
  const double scale = std::max(resid.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd u0(3 * nd + 3);
  for (int j = 0; j < nd; ++j) {
    // Deepest residual within a quarter window of the predicted center.
    int best = -1;
    for (int i = 0; i < m; ++i)
      if (std::abs(xs[i] + mid - centers_mhz[j]) <= 0.25 * half_window_mhz && (best < 0 || resid(i) < resid(best))) best = i;
    if (best < 0) {
      for (auto& f : out) f.message = "no samples near a predicted center";
      return out;
    }
    const double amp = std::max(-resid(best), 1e-3 * scale);
    // Nearer half-maximum crossing, capped at half the distance to a neighbouring center.
    double half = 0.1 * half_window_mhz;
    for (int i = best; i < m; ++i)
      if (resid(i) > -0.5 * amp) {
        half = std::max(xs[i] - xs[best], 1e-3);
        break;
      }
    for (int i = best; i >= 0; --i)
      if (resid(i) > -0.5 * amp) {
        half = std::min(half, std::max(xs[best] - xs[i], 1e-3));
        break;
      }
    for (int k = 0; k < nd; ++k)
      if (k != j) half = std::min(half, std::max(0.5 * std::abs(centers_mhz[k] - centers_mhz[j]), 1e-3));
    u0.segment<3>(3 * j) << xs[best], std::log(half), amp;
  }
  u0.tail<3>() = bg;
  auto model = [&](const Eigen::VectorXd& u, double x) {
    double v = u(3 * nd) + u(3 * nd + 1) * x + u(3 * nd + 2) * x * x;
    for (int j = 0; j < nd; ++j) {
      const double g = std::exp(u(3 * j + 1));
      const double dx = x - u(3 * j);
      v -= u(3 * j + 2) * g * g / (dx * dx + g * g);
    }
    return v;
  };
  LeastSquaresProblem ls;
  ls.residual = [&](const Eigen::VectorXd& u, Eigen::VectorXd& r) {
    r.resize(m);
    for (int i = 0; i < m; ++i) r(i) = (ys[i] - model(u, xs[i])) / scale;
    return true;
  };
  LmOptions lo_opt;
  lo_opt.max_iterations = 300;
  LmResult lm;
  try {
    lm = levenberg_marquardt(ls, u0, lo_opt);
  } catch (const Error& e) {
    for (auto& f : out) f.message = e.what();
    return out;
  }
  for (int j = 0; j < nd; ++j) {
    LorentzianFit& f = out[j];
    f.center_mhz = lm.u(3 * j) + mid;
    f.fwhm_mhz = 2.0 * std::exp(lm.u(3 * j + 1));
    f.amplitude = lm.u(3 * j + 2);
    const bool inside = std::abs(f.center_mhz - centers_mhz[j]) < 0.5 * half_window_mhz;
    f.ok = lm.converged && f.amplitude > 0.0 && inside && f.fwhm_mhz < 4.0 * half_window_mhz;
    if (!f.ok)
      f.message = !lm.converged ? "fit did not converge (" + lm.reason + ")"
                                : "no resolvable dip near the predicted position";
  }
  return out;
}

/// Unit vector in the horizontal plane at `angle_deg` from `k`, rotating about z.
inline Eigen::Vector3d rotate_about_z(const Eigen::Vector3d& k, double angle_deg) {
  return Eigen::AngleAxisd(units::deg_to_rad(angle_deg), Eigen::Vector3d::UnitZ()) * k;
}

struct LinewidthOptions {
  double half_window_mhz = 5.0;
  double step_mhz = 0.1;
  int threads = 0;
};

/**
 * FWHM of each resonance in `positions` (sorted) from a dense scan around
 * them. Resonances whose windows overlap are fitted jointly.
 */
inline std::vector<LorentzianFit> resonance_linewidths(const ExperimentConfig& cfg, const ResonanceSet& positions,
                                                       const LinewidthOptions& opt = {}) {
  const ScanModel model(cfg);
  std::vector<LorentzianFit> out;
  std::size_t i = 0;
  while (i < positions.size()) {
    std::vector<double> centers{units::rad_to_mhz(positions[i].position)};
    std::size_t j = i + 1;
    while (j < positions.size() && units::rad_to_mhz(positions[j].position) - centers.back() < 2.0 * opt.half_window_mhz)
      centers.push_back(units::rad_to_mhz(positions[j++].position));
    std::vector<double> det, x;
    const double lo = centers.front() - opt.half_window_mhz, hi = centers.back() + opt.half_window_mhz;
    const int n = static_cast<int>(std::floor((hi - lo) / opt.step_mhz + 1e-9)) + 1;
    for (int k = 0; k < n; ++k) {
      x.push_back(lo + k * opt.step_mhz);
      det.push_back(units::mhz_to_rad(x.back()));
    }
    ScanOptions so;
    so.threads = opt.threads;
    const SpectrumCurve curve = scan_detunings(model, det, so).curve;
    for (auto& f : fit_lorentzian_dips(x, curve.fluorescence, centers, opt.half_window_mhz)) out.push_back(f);
    i = j;
  }
  return out;
}

struct ThermometryRow {
  double angle_deg = 0.0;
  double temperature_mk = 0.0;
  std::vector<double> fwhm_mhz;  // one per D-D resonance, NaN if flagged
  bool flagged = false;
};

struct ThermometryTable {
  std::vector<ThermometryRow> rows;
  std::map<double, double> slope_mhz_per_mk;  // per angle, least-squares dFWHM/dT (mean over resonances)
};

/**
 * D-D linewidth against temperature for several angles between the probe and
 * repumper wavevectors (repumper rotated about z from the probe direction).
 */
inline ThermometryTable dd_thermometry_sensitivity(const ExperimentConfig& cfg, const std::vector<double>& angles_deg,
                                                   const std::vector<double>& temps_mk, const LinewidthOptions& opt = {}) {
  if (!cfg.repumper) throw InvalidArgument("thermometry: the config needs a repumper");
  const double rep = units::rad_to_mhz(cfg.repumper->detuning);
  if (rep < cfg.grid.start_mhz || rep > cfg.grid.stop_mhz)
    throw InvalidArgument("thermometry: repumper detuning must lie inside the scan window");
  ThermometryTable table;
  for (double angle : angles_deg) {
    double st = 0, sf = 0, stt = 0, stf = 0;
    int cnt = 0;
    for (double t : temps_mk) {
      ExperimentConfig c = cfg;
      c.environment.temperature = t * 1e-3;
      c.repumper->k_hat = rotate_about_z(cfg.probe.k_hat, angle);
      ThermometryRow row{angle, t, {}, false};
      for (const auto& f : resonance_linewidths(c, predict_dd_resonance_positions(c), opt)) {
        row.fwhm_mhz.push_back(f.ok ? f.fwhm_mhz : std::numeric_limits<double>::quiet_NaN());
        if (!f.ok) row.flagged = true;
      }
      if (row.fwhm_mhz.empty()) row.flagged = true;
      if (!row.flagged) {
        const double mean = std::accumulate(row.fwhm_mhz.begin(), row.fwhm_mhz.end(), 0.0) / row.fwhm_mhz.size();
        st += t;
        sf += mean;
        stt += t * t;
        stf += t * mean;
        ++cnt;
      }
      table.rows.push_back(std::move(row));
    }
    const double den = cnt * stt - st * st;
    table.slope_mhz_per_mk[angle] = cnt >= 2 && den > 0.0 ? (cnt * stf - st * sf) / den : std::numeric_limits<double>::quiet_NaN();
  }
  return table;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_fit_report(std::ostream& out, const FitResult& r, const std::string& manifest_hash = "") {
  if (!manifest_hash.empty()) out << "# manifest_hash=" << manifest_hash << "\n";
  out << "parameter,unit,estimate,sigma,initial,lower,upper\n";
  for (const auto& e : r.estimates)
    out << e.name << "," << e.unit << "," << format_number(e.value) << "," << format_number(e.sigma) << ","
        << format_number(e.initial) << "," << format_number(e.lower) << "," << format_number(e.upper) << "\n";
  out << "# converged=" << (r.converged ? "true" : "false") << "\n"
      << "# reason=" << r.reason << "\n"
      << "# identifiable=" << (r.identifiable ? "true" : "false") << "\n"
      << "# iterations=" << r.iterations << "\n"
      << "# evaluations=" << r.evaluations << "\n"
      << "# initial_cost=" << format_number(r.initial_cost) << "\n"
      << "# final_cost=" << format_number(r.cost) << "\n"
      << "# reduced_chi2=" << format_number(r.reduced_chi2) << "\n"
      << "# dof=" << r.dof << "\n"
      << "# weights=" << (r.poisson_weights ? "poisson" : "unit") << "\n";
}

}  // namespace cptspec
