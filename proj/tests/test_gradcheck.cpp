#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tokfuse/gradcheck.hpp"

using namespace tokfuse;
using gradcheck::Module;

TEST(RelativeError, Definition) {
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(gradcheck::relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(Gradcheck, ReportStructure) {
  const auto r = gradcheck::check_module(Module::mbtf,
                                         gradcheck::tiny_config(), 0);
  ASSERT_EQ(r.blocks.size(), 4u);
  EXPECT_EQ(r.blocks[0].name, "mbtf.conv1.weight");
  EXPECT_EQ(r.blocks[1].name, "mbtf.conv1.bias");
  // weight blocks hold more than 200 entries and are subsampled to 200
  EXPECT_EQ(r.blocks[0].checked, 64u);
  EXPECT_EQ(r.epsilon, 1e-3);
  for (const auto& b : r.blocks) {
    EXPECT_EQ(b.pass, b.max_rel_error <= r.threshold);
  }
}

TEST(Gradcheck, SubsamplesAtLeastTwoHundred) {
  FusionConfig c = gradcheck::tiny_config();
  c.mbtf_hidden = 32;
  const auto r = gradcheck::check_module(Module::mbtf, c, 0);
  EXPECT_EQ(r.blocks[0].checked, 200u);  // 8 * 32 = 256 weights
  EXPECT_EQ(r.blocks[1].checked, 32u);   // every bias
}

TEST(Gradcheck, DeterministicForSeed) {
  const auto a = gradcheck::check_module(Module::stf,
                                         gradcheck::tiny_config(), 3);
  const auto b = gradcheck::check_module(Module::stf,
                                         gradcheck::tiny_config(), 3);
  ASSERT_EQ(a.blocks.size(), b.blocks.size());
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    EXPECT_EQ(a.blocks[i].max_rel_error, b.blocks[i].max_rel_error);
    EXPECT_EQ(a.blocks[i].worst_index, b.blocks[i].worst_index);
  }
}

TEST(Gradcheck, MbtfTinyConfig) {
  const auto r = gradcheck::check_module(Module::mbtf,
                                         gradcheck::tiny_config(), 0);
  EXPECT_TRUE(r.passed()) << r.max_rel_error();
}

TEST(Gradcheck, LinearProbeIsExact) {
  FusionConfig c = gradcheck::tiny_config();
  c.activation = Activation::identity;
  gradcheck::Options o;
  o.threshold = 1e-5;
  for (auto m : {Module::mbtf, Module::stf, Module::projector,
                 Module::avgpool, Module::tokenconcat}) {
    const auto r = gradcheck::check_module(m, c, 1, o);
    EXPECT_TRUE(r.passed()) << r.module << " " << r.max_rel_error();
  }
}

TEST(Gradcheck, ErrorShrinksQuadraticallyInEpsilon) {
  const std::vector<double> eps{0.1, 0.05, 0.025, 0.0125, 0.01};
  const auto err = gradcheck::epsilon_sweep(Module::projector,
                                            gradcheck::tiny_config(), 0, eps);
  ASSERT_EQ(err.size(), eps.size());
  for (std::size_t i = 1; i + 1 < eps.size(); ++i) {
    EXPECT_NEAR(err[i - 1] / err[i], 4.0, 0.4) << i;
  }
  const double slope = std::log(err.front() / err.back()) /
                       std::log(eps.front() / eps.back());
  EXPECT_NEAR(slope, 2.0, 0.1);
}

TEST(Gradcheck, ParseModule) {
  EXPECT_EQ(gradcheck::parse_module("stf"), Module::stf);
  EXPECT_THROW(gradcheck::parse_module("nope"), ConfigError);
}
