#include <gtest/gtest.h>

#include "klq/verify.hpp"

using namespace klq;

TEST(Verify, OperatorChecksPassOnSmallSamples) {
  EXPECT_TRUE(check_contraction(5, 20, -1.0).passed);
  EXPECT_TRUE(check_contraction(5, 20, 0.5).passed);
  EXPECT_TRUE(check_fixed_points(5).passed);
  EXPECT_TRUE(check_mapping_roundtrip(20).passed);
  EXPECT_TRUE(check_improvement(5).passed);
  EXPECT_TRUE(check_monte_carlo(3, 20000).passed);
}

TEST(Verify, EstimatorAndGradientSuites) {
  EXPECT_TRUE(run_estimators_suite().passed());
  for (auto kind : {LossKind::Klq, LossKind::PpoClip, LossKind::PpoPenalty})
    EXPECT_TRUE(check_gradients(kind, 10).passed);
}

TEST(Verify, SuiteInstancesAreReproducible) {
  const auto a = detail::suite_instance(4, 11), b = detail::suite_instance(4, 11);
  EXPECT_EQ(a.mdp.num_states(), b.mdp.num_states());
  EXPECT_EQ(a.pi_b.probs(), b.pi_b.probs());
  EXPECT_THROW(run_verify("nope"), UsageError);
}

TEST(Verify, FormatMarksFailures) {
  EXPECT_EQ(format_check({"x", false, 0.5, "d"}).rfind("FAIL", 0), 0u);
  EXPECT_EQ(format_check({"x", true, 0.5, "d"}).rfind("PASS", 0), 0u);
}
