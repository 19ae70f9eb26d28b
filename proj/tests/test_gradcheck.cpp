#include <gtest/gtest.h>

#include "icegan/gradcheck_suites.hpp"

using namespace icegan;

namespace {

class Suite : public ::testing::TestWithParam<std::string> {};

std::string suite_name(const ::testing::TestParamInfo<std::string>& info) { return info.param; }

}  // namespace

TEST_P(Suite, AnalyticMatchesNumeric) {
  auto results = run_gradcheck_suites(false, GetParam());
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_TRUE(r.report.passed()) << r.name << "\n" << r.report.summary();
    EXPECT_LT(r.report.max_rel_error(), 1e-4) << r.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Gradcheck, Suite,
                         ::testing::Values("elementwise", "tensor_ops", "conv2d", "deconv2d", "linear", "graph_reasoning",
                                           "capsule_routing", "losses", "encoder", "generator", "discriminator"),
                         suite_name);

// A wrong backward rule has to be caught by every cheap suite.
TEST(Gradcheck, InjectedBugIsDetected) {
  for (const char* name : {"elementwise", "tensor_ops", "conv2d", "deconv2d", "linear", "graph_reasoning", "capsule_routing"}) {
    auto results = run_gradcheck_suites(true, name);
    ASSERT_FALSE(results.empty()) << name;
    for (const auto& r : results) EXPECT_FALSE(r.report.passed()) << r.name;
  }
}

TEST(Gradcheck, FilterSelectsBySubstring) {
  auto conv = run_gradcheck_suites(false, "conv");
  ASSERT_EQ(conv.size(), 2u);
  EXPECT_EQ(conv[0].name, "conv2d");
  EXPECT_EQ(conv[1].name, "deconv2d");
  EXPECT_TRUE(run_gradcheck_suites(false, "no_such_suite").empty());
}
