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

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cptspec/inference.hpp"
#include "cptspec/spectrum_io.hpp"
#include "test_support.hpp"

using namespace cptspec;
using ::testing::HasSubstr;

namespace {

std::vector<std::string> config_errors(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.errors();
  }
  return {};
}

const char* kAllConfigs[] = {"fig1a.ini",        "fig1b.ini",       "fig1c.ini",        "fig1c_repumper.ini",
                             "fig2.ini",         "fig4.ini",        "fig5_alpha90.ini", "fig5_alpha15.ini",
                             "fig5_alpha5.ini",  "fig6a_s0.ini",    "fig6a_s1.61.ini",  "fig6a_s7.23.ini",
                             "fig6b_s0.ini",     "fig6b_s2.68.ini", "fig6b_s9.31.ini",  "fig7.ini",
                             "fig8.ini"};

}  // namespace

TEST(Config, BundledConfigsParseAndRoundTrip) {
  for (const char* name : kAllConfigs) {
    const ExperimentConfig c = fixtures::load(name);
    const std::string once = to_ini(c);
    const ExperimentConfig back = parse_config(once);
    EXPECT_EQ(to_ini(back), once) << name;
    EXPECT_EQ(config_hash(back), config_hash(c)) << name;
  }
}

TEST(Config, ValuesAndUnits) {
  const ExperimentConfig c = fixtures::load("fig5_alpha15.ini");
  EXPECT_DOUBLE_EQ(c.doppler.saturation, 0.68);
  EXPECT_DOUBLE_EQ(units::rad_to_mhz(c.doppler.detuning), -14.7);
  EXPECT_DOUBLE_EQ(c.environment.temperature, 4.7e-3);
  ASSERT_TRUE(c.repumper);
  EXPECT_NEAR(units::rad_to_mhz(c.repumper->detuning), 25.7, 1e-12);
  EXPECT_NEAR(polarization_angle_deg(c.probe.polarization), 15.0, 1e-9);
  EXPECT_NEAR(polarization_angle_deg(c.repumper->polarization), 90.0, 1e-9);
  EXPECT_NEAR(c.grid.start_mhz, -54.7, 1e-12);
  EXPECT_EQ(c.grid.size(), 401);
}

TEST(Config, EveryBadFieldIsListed) {
  const auto errs = config_errors(
      "[doppler]\nsaturation = -1\n[probe]\nlinewidth_mhz = abc\npolarization = circular\n"
      "[environment]\nb_gauss = -2\ncolour = red\n[scan]\nstep_mhz = 0\n[bogus]\nx = 1\n");
  auto has = [&](const std::string& needle) {
    return std::any_of(errs.begin(), errs.end(), [&](const std::string& e) { return e.find(needle) != std::string::npos; });
  };
  EXPECT_TRUE(has("probe.linewidth_mhz"));
  EXPECT_TRUE(has("probe.polarization"));
  EXPECT_TRUE(has("environment.colour"));
  EXPECT_TRUE(has("bogus"));
  EXPECT_GE(errs.size(), 4u);

  // Validation errors are also collected together.
  const auto verrs = config_errors("[doppler]\nsaturation = -1\n[environment]\nb_gauss = -2\n[scan]\nstep_mhz = 0\n");
  auto vhas = [&](const std::string& needle) {
    return std::any_of(verrs.begin(), verrs.end(), [&](const std::string& e) { return e.find(needle) != std::string::npos; });
  };
  EXPECT_TRUE(vhas("doppler.saturation"));
  EXPECT_TRUE(vhas("environment.b_gauss"));
  EXPECT_TRUE(vhas("scan.step_mhz"));
}

TEST(Config, SyntaxErrorsAndMissingFiles) {
  EXPECT_THROW(parse_config("[doppler\nsaturation = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("saturation = 1\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.ini"), ConfigError);
}

TEST(Config, SphericalPolarizationRoundTrips) {
  const std::string text =
      "[probe]\npolarization = spherical\nspherical = 0.6 0 0 0.8 0 0\n"
      "[repumper]\nsaturation = 1\ndetuning_mhz = 5\npolarization = pi\n";
  const ExperimentConfig c = parse_config(text);
  EXPECT_NEAR(std::abs(c.probe.polarization.amplitude(0) - cd{0.0, 0.8}), 0.0, 1e-15);
  EXPECT_EQ(to_ini(parse_config(to_ini(c))), to_ini(c));
  EXPECT_FALSE(config_errors("[probe]\npolarization = spherical\nspherical = 1 0 1 0 0 0\n").empty());
}

TEST(Config, FloquetSection) {
  const ExperimentConfig c =
      parse_config("[floquet]\nn_max = 4\npolicy = strict\ncheck_inner_residuals = true\noracle_check = yes\n");
  EXPECT_EQ(c.floquet.n_max, 4);
  EXPECT_EQ(c.floquet.policy, SingularityPolicy::Strict);
  EXPECT_TRUE(c.floquet.check_inner_residuals);
  EXPECT_TRUE(c.floquet.oracle_check);
  EXPECT_FALSE(config_errors("[floquet]\nn_max = 1.5\n").empty());
  EXPECT_FALSE(config_errors("[floquet]\nfloor = 5\ncap = 3\n").empty());
}

TEST(SpectrumCsv, WriteReadRoundTrip) {
  ExperimentConfig c = fixtures::reference_config();
  c.grid = {-20.0, -15.0, 0.25};
  c.detector = {1000.0, 5.0};
  const SpectrumCurve curve = probe_scan(c);
  std::stringstream ss;
  write_spectrum_csv(ss, curve, c, "0123456789abcdef", {{"minima_count", "1"}});
  const SpectrumFile f = read_spectrum_csv(ss);
  ASSERT_EQ(f.curve.size(), curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    EXPECT_NEAR(f.curve.detuning[i], curve.detuning[i], 1e-9 * std::abs(curve.detuning[i]) + 1e-6);
    EXPECT_EQ(f.curve.fluorescence[i], curve.fluorescence[i]);
  }
  EXPECT_EQ(f.metadata.at("manifest_hash"), "0123456789abcdef");
  EXPECT_EQ(f.metadata.at("minima_count"), "1");
  EXPECT_EQ(f.curve.scale, 1000.0);
  EXPECT_EQ(f.curve.offset, 5.0);
  const auto back = config_from_metadata(f.metadata);
  ASSERT_TRUE(back);
  EXPECT_EQ(to_ini(*back), to_ini(c));
}

TEST(SpectrumCsv, SchemaErrorsNameTheLine) {
  auto read = [](const std::string& text) {
    std::istringstream in(text);
    return read_spectrum_csv(in, "data.csv");
  };
  try {
    read("detuning_MHz,fluorescence\n1,2\n0.5,3\n");
    FAIL() << "expected a SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_THAT(e.what(), HasSubstr("data.csv:3"));
    EXPECT_THAT(e.what(), HasSubstr("strictly increasing"));
  }
  EXPECT_THROW(read("x,y\n1,2\n"), SchemaError);
  EXPECT_THROW(read("detuning_MHz,fluorescence\n1,abc\n"), SchemaError);
  EXPECT_THROW(read("detuning_MHz,fluorescence\n1\n"), SchemaError);
  EXPECT_THROW(read("detuning_MHz,fluorescence,flag\n1,2,weird\n"), SchemaError);
  EXPECT_THROW(read("detuning_MHz,fluorescence\n"), SchemaError);
  EXPECT_THROW(read("# detector.scale=x\ndetuning_MHz,fluorescence\n1,2\n"), SchemaError);
  EXPECT_THROW(read_spectrum_csv("/nonexistent/data.csv"), SchemaError);
  EXPECT_NO_THROW(read("# a comment without key\r\ndetuning_MHz,fluorescence\r\n1,2\r\n"));
}

TEST(Manifest, HashIgnoresOutputsAndWallTime) {
  RunManifest a;
  a.command = "spectrum";
  a.config_snapshot = to_ini(fixtures::reference_config());
  a.inputs = {"config.ini"};
  RunManifest b = a;
  b.outputs = {"/elsewhere/out.csv"};
  b.wall_time_s = 12.0;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
  const RunManifest c = RunManifest::from_json(a.to_json());
  EXPECT_EQ(c.hash(), a.hash());
  EXPECT_EQ(a.to_json().at("hash"), a.hash());
}

TEST(Hashing, Fnv1aReferenceValues) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(-9.8), "-9.8");
  EXPECT_EQ(std::stod(format_number(1.0 / 3.0)), std::stod("0.333333333333333"));
}

TEST(Svg, RendersSeriesAndMarkers) {
  const ExperimentConfig c = fixtures::load("fig1a.ini");
  const std::string svg = spectrum_svg(probe_scan(c), c, "test plot");
  EXPECT_THAT(svg, HasSubstr("<svg"));
  EXPECT_THAT(svg, HasSubstr("test plot"));
  EXPECT_THAT(svg, HasSubstr("</svg>"));
  EXPECT_THAT(svg, HasSubstr("<polyline"));
}
