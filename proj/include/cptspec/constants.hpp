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

#pragma once

#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cptspec {

using cd = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

namespace phys {
// CODATA 2018
inline constexpr double kBohrMagnetonHzPerGauss = 1.39962449361e6;
inline constexpr double kBoltzmann = 1.380649e-23;       // J/K
inline constexpr double kAtomicMassUnit = 1.66053906660e-27;  // kg
}  // namespace phys

/// Internal unit system: angular frequencies in rad/s, field in gauss,
/// temperature in kelvin. User-facing inputs are converted once at parse time.
namespace units {
inline constexpr double mhz_to_rad(double mhz) { return kTwoPi * 1e6 * mhz; }
inline constexpr double rad_to_mhz(double rad) { return rad / (kTwoPi * 1e6); }
inline constexpr double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad_to_deg(double rad) { return rad * 180.0 / kPi; }
}  // namespace units

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid physical input (negative linewidth, unnormalized polarization...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A linear solve or recursion step hit a (numerically) singular matrix.
class SingularMatrix : public Error {
 public:
  using Error::Error;
};

}  // namespace cptspec
