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

#include <gsl/gsl_sf_coupling.h>
#include <gtest/gtest.h>

#include <random>

#include "cptspec/atom_model.hpp"
#include "test_support.hpp"

using namespace cptspec;

namespace {

constexpr double kInvSqrt3 = 0.57735026918962576;

// CODATA 2018: muB / h in Hz per gauss, evaluated from the SI constants.
double bohr_hz_per_gauss() { return 9.2740100783e-24 / 6.62607015e-34 * 1e-4; }

}  // namespace

TEST(Zeeman, ZeroFieldGivesZeroShifts) {
  for (double z : zeeman_shifts({0.0, 0.0}, LevelScheme{})) EXPECT_EQ(z, 0.0);
}

TEST(Zeeman, GroundStateSplittingAtReferenceField) {
  const auto z = zeeman_shifts({3.7, 0.0}, LevelScheme{});
  const double expected = 2.0023 * bohr_hz_per_gauss() * 3.7 * 0.5;
  EXPECT_NEAR(units::rad_to_mhz(z[1]), expected * 1e-6, 1e-9);
  // Published value for the S(+1/2) shift at 3.7 G.
  EXPECT_NEAR(units::rad_to_mhz(z[1]), 5.18, 0.005 * 5.18);
}

TEST(Zeeman, ShiftsAreAntisymmetricInM) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> b(0.0, 10.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = zeeman_shifts({b(rng), 0.0}, LevelScheme{});
    EXPECT_DOUBLE_EQ(z[0], -z[1]);
    EXPECT_DOUBLE_EQ(z[2], -z[3]);
    EXPECT_DOUBLE_EQ(z[4], -z[7]);
    EXPECT_DOUBLE_EQ(z[5], -z[6]);
  }
}

TEST(Wigner3j, MatchesGslForAllSmallArguments) {
  int checked = 0;
  for (int j1 = 0; j1 <= 5; ++j1)
    for (int j2 = 0; j2 <= 5; ++j2)
      for (int j3 = 0; j3 <= 5; ++j3)
        for (int m1 = -j1; m1 <= j1; m1 += 2)
          for (int m2 = -j2; m2 <= j2; m2 += 2)
            for (int m3 = -j3; m3 <= j3; m3 += 2) {
              const double ours = wigner_3j(j1, j2, j3, m1, m2, m3);
              const double ref = gsl_sf_coupling_3j(j1, j2, j3, m1, m2, m3);
              EXPECT_NEAR(ours, ref, 1e-13) << j1 << " " << j2 << " " << j3 << " " << m1 << " " << m2 << " " << m3;
              ++checked;
            }
  EXPECT_GT(checked, 1000);
}

TEST(Coupling, PiPolarizedProbeMatchesPublishedEntries) {
  const Matrix8c c = coupling_matrix(Transition::DP, Polarization::pi());
  EXPECT_NEAR(std::abs(c(5, 2) - (-kInvSqrt3)), 0.0, 1e-14);
  EXPECT_NEAR(std::abs(c(6, 3) - (-kInvSqrt3)), 0.0, 1e-14);
  // All sigma entries vanish.
  EXPECT_EQ(std::abs(c(4, 2)), 0.0);
  EXPECT_EQ(std::abs(c(6, 2)), 0.0);
  EXPECT_EQ(std::abs(c(5, 3)), 0.0);
  EXPECT_EQ(std::abs(c(7, 3)), 0.0);
}

TEST(Coupling, SigmaPolarizedProbeMatchesPublishedEntries) {
  const Matrix8c c = coupling_matrix(Transition::DP, Polarization::linear(kPi / 2, 0.0));
  EXPECT_NEAR(std::abs(c(4, 2) - 0.5), 0.0, 1e-14);
  EXPECT_NEAR(std::abs(c(7, 3) - 0.5), 0.0, 1e-14);
  EXPECT_NEAR(std::abs(c(5, 3) - (-0.5 * kInvSqrt3)), 0.0, 1e-14);
  EXPECT_NEAR(std::abs(c(6, 2) - 0.5 * kInvSqrt3), 0.0, 1e-14);
  EXPECT_LT(std::abs(c(5, 2)), 1e-15);
  EXPECT_LT(std::abs(c(6, 3)), 1e-15);
}

TEST(Coupling, GeneralAngleEntries) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> th(0.0, kPi), ph(-kPi, kPi);
  for (int trial = 0; trial < 50; ++trial) {
    const double t = th(rng), p = ph(rng);
    const Matrix8c c = coupling_matrix(Transition::DP, Polarization::linear(t, p));
    EXPECT_NEAR(std::abs(c(4, 2) - 0.5 * std::sin(t) * std::polar(1.0, p)), 0.0, 1e-14);
    EXPECT_NEAR(std::abs(c(5, 2) - (-kInvSqrt3 * std::cos(t))), 0.0, 1e-14);
  }
}

TEST(Coupling, OnlyTheAddressedBlockIsNonzero) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Polarization pol = fixtures::random_polarization(rng);
    for (Transition t : {Transition::SP, Transition::DP}) {
      const Matrix8c c = coupling_matrix(t, pol);
      for (int r = 0; r < kNumStates; ++r)
        for (int k = 0; k < kNumStates; ++k) {
          const bool in_block = kBasis[r].manifold == lower_manifold(t) && kBasis[k].manifold == Manifold::P;
          if (!in_block) {
            EXPECT_EQ(std::abs(c(r, k)), 0.0);
          }
        }
    }
  }
}

TEST(Coupling, LinearInSphericalComponents) {
  std::mt19937_64 rng(4);
  std::array<Matrix8c, 3> unit;
  for (int q = -1; q <= 1; ++q) {
    Polarization e{{cd{0}, cd{0}, cd{0}}};
    e.amplitudes[q + 1] = 1.0;
    unit[q + 1] = coupling_matrix(Transition::DP, e);
  }
  for (int trial = 0; trial < 50; ++trial) {
    const Polarization pol = fixtures::random_polarization(rng);
    Matrix8c sum = Matrix8c::Zero();
    for (int q = -1; q <= 1; ++q) sum += pol.amplitude(q) * unit[q + 1];
    EXPECT_LT((coupling_matrix(Transition::DP, pol) - sum).cwiseAbs().maxCoeff(), 1e-14);
  }
}

// Squared dipole coefficients from GSL: each P sublevel decays with unit total
// weight into each lower manifold.
TEST(Coupling, BranchingSumRulesFromIndependent3j) {
  for (int p = kExcitedA; p <= kExcitedB; ++p) {
    for (Manifold lower : {Manifold::S, Manifold::D}) {
      double ours = 0.0, ref = 0.0;
      for (int l = 0; l < kNumStates; ++l) {
        if (kBasis[l].manifold != lower) continue;
        const int two_q = kBasis[p].two_m - kBasis[l].two_m;
        const double c = dipole_coefficient(l, p);
        ours += c * c;
        const double w = gsl_sf_coupling_3j(1, 2, kBasis[l].two_j, -kBasis[p].two_m, two_q, kBasis[l].two_m);
        ref += 2.0 * w * w;
        EXPECT_NEAR(c * c, 2.0 * w * w, 1e-14);
      }
      EXPECT_NEAR(ours, 1.0, 1e-14);
      EXPECT_NEAR(ref, 1.0, 1e-14);
    }
  }
}

TEST(Coupling, RejectsUnnormalizedPolarization) {
  Polarization bad{{cd{1.0}, cd{1.0}, cd{0.0}}};
  EXPECT_THROW(coupling_matrix(Transition::DP, bad), InvalidArgument);
  EXPECT_THROW(Polarization::spherical(1.0, 1.0, 0.0), InvalidArgument);
}

TEST(Hamiltonian, HermitianForRandomInputs) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    LaserField dop{Transition::SP, 10 * u(rng), units::mhz_to_rad(-50 + 100 * u(rng))};
    LaserField pr{Transition::DP, 10 * u(rng), units::mhz_to_rad(-50 + 100 * u(rng))};
    dop.polarization = fixtures::random_polarization(rng);
    pr.polarization = fixtures::random_polarization(rng);
    const Matrix8c h = build_H0(dop, pr, {10 * u(rng), 0.0}, LevelScheme{});
    EXPECT_LT((h - h.adjoint()).cwiseAbs().maxCoeff(), 1e-12 * h.cwiseAbs().maxCoeff());
  }
}

TEST(Hamiltonian, DarkLasersLeaveShiftedDiagonal) {
  LaserField dop{Transition::SP, 0.0, units::mhz_to_rad(-9.8)};
  LaserField pr{Transition::DP, 0.0, units::mhz_to_rad(3.0)};
  const Environment env{3.7, 0.0};
  const LevelScheme scheme;
  const auto z = zeeman_shifts(env, scheme);
  const Matrix8c h = build_H0(dop, pr, env, scheme);
  for (int i = 0; i < kNumStates; ++i) {
    double expect = z[i];
    if (kBasis[i].manifold == Manifold::S) expect += dop.detuning;
    if (kBasis[i].manifold == Manifold::D) expect += pr.detuning;
    EXPECT_DOUBLE_EQ(h(i, i).real(), expect);
  }
  EXPECT_EQ((h - Matrix8c(h.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Hamiltonian, RabiFrequencyFromSaturation) {
  const LevelScheme scheme;
  LaserField l{Transition::SP, 2.0};
  EXPECT_DOUBLE_EQ(l.rabi_frequency(scheme), scheme.gamma_sp());
  EXPECT_NEAR(saturation_from_rabi(l.rabi_frequency(scheme), Transition::SP, scheme), 2.0, 1e-14);
}

TEST(Hamiltonian, RejectsWrongTransitions) {
  LaserField a{Transition::DP}, b{Transition::DP};
  EXPECT_THROW(build_H0(a, b, {}, LevelScheme{}), InvalidArgument);
}

TEST(Dissipation, TotalDecayRateOfEachExcitedState) {
  const LevelScheme scheme;
  const std::array<LaserField, 2> lasers{LaserField{Transition::SP}, LaserField{Transition::DP}};
  const auto ops = build_collapse_operators(lasers, {}, scheme);
  for (int p = kExcitedA; p <= kExcitedB; ++p) {
    double total = 0.0;
    for (const auto& op : ops) {
      if (op.kind != ChannelKind::Decay) continue;
      total += (op.op.adjoint() * op.op)(p, p).real();
    }
    EXPECT_NEAR(total / (1.0 / 6.9e-9), 1.0, 1e-12);
  }
  for (const auto& op : ops) EXPECT_EQ(op.kind, ChannelKind::Decay);
}

TEST(Dissipation, DephasingFollowsLinewidthsAndTemperature) {
  const LevelScheme scheme;
  LaserField dop{Transition::SP}, pr{Transition::DP}, rep{Transition::DP};
  dop.linewidth = units::mhz_to_rad(0.1);
  pr.linewidth = units::mhz_to_rad(0.2);
  rep.linewidth = units::mhz_to_rad(0.3);
  const Environment cold{3.7, 0.0};
  EXPECT_DOUBLE_EQ(doppler_dephasing_rate(dop, pr, cold, scheme), dop.linewidth);
  // Collinear probe and repumper share one Doppler phase.
  EXPECT_DOUBLE_EQ(repumper_relative_dephasing(pr, rep, {3.7, 5e-3}, scheme), rep.linewidth);

  // Independent two-photon Doppler width for collinear beams at 1 mK.
  const Environment warm{3.7, 1e-3};
  const double dk = kTwoPi / 397e-9 - kTwoPi / 866e-9;
  const double v = std::sqrt(1.380649e-23 * 1e-3 / (2.0 * 39.962591 * 1.66053906660e-27));
  EXPECT_NEAR(thermal_broadening(dop, pr, warm, scheme) / (dk * v), 1.0, 1e-9);

  const std::array<LaserField, 2> lasers{dop, pr};
  const auto ops = build_collapse_operators(lasers, warm, scheme);
  int dephasing = 0;
  for (const auto& op : ops) {
    if (op.kind != ChannelKind::Dephasing) continue;
    ++dephasing;
    const bool on_s = std::abs(op.op(0, 0)) > 0.0;
    const double expect = on_s ? std::hypot(dop.linewidth, dk * v) : pr.linewidth;
    EXPECT_NEAR(op.rate / expect, 1.0, 1e-9);
  }
  EXPECT_EQ(dephasing, 2);
}

TEST(Dissipation, RejectsNegativeLinewidth) {
  LaserField dop{Transition::SP}, pr{Transition::DP};
  pr.linewidth = -1.0;
  const std::array<LaserField, 2> lasers{dop, pr};
  EXPECT_THROW(build_collapse_operators(lasers, {}, LevelScheme{}), InvalidArgument);
}

TEST(Environment, RejectsNegativeFieldAndTemperature) {
  EXPECT_THROW((Environment{-1.0, 0.0}).validate(), InvalidArgument);
  EXPECT_THROW((Environment{1.0, -1e-3}).validate(), InvalidArgument);
}
