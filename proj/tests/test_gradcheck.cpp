#include <gtest/gtest.h>

#include "cruseg/gradcheck_suites.hpp"

using namespace cruseg;

class PrimitiveGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradients, AgreeWithCentralDifferences) {
  GradSuiteOptions opt;
  opt.seed = 5;
  opt.samples = 60;
  const auto r = run_gradcheck_suite(GetParam(), opt);
  ASSERT_GE(r.result.coords.size(), 60u);
  EXPECT_LT(r.result.max_rel_error(), 1e-6) << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradients, [] {
  auto names = gradcheck_suite_names();
  std::erase(names, std::string("composite_loss"));
  return ::testing::ValuesIn(names);
}(), [](const auto& info) { return info.param; });

TEST(GradCheck, CorruptedRuleIsCaught) {
  for (const std::string op : {"conv2d", "softmax", "dense_message", "scale_by"}) {
    GradSuiteOptions opt;
    opt.corrupt_op = op;
    const std::string suite = op == "softmax" ? "softmax_channels" : op == "scale_by" ? "mean_field_step" : op;
    EXPECT_GT(run_gradcheck_suite(suite, opt).result.max_rel_error(), 1e-3) << op;
  }
}

TEST(GradCheck, RejectsZeroSamplesAndUnknownSuites) {
  GradSuiteOptions opt;
  opt.samples = 0;
  EXPECT_THROW(run_gradcheck_suite("relu", opt), std::invalid_argument);
  EXPECT_THROW(run_gradcheck_suite("no_such_op", GradSuiteOptions{}), std::invalid_argument);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(relative_error(1e-12, 0.0), 1e-4, 1e-18);
  EXPECT_NEAR(relative_error(2.0, 1.0), 0.5, 1e-15);
}
