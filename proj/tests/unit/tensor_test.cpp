#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mrgan/gradcheck.hpp"
#include "mrgan/ops.hpp"
#include "mrgan/tensor.hpp"
#include "support/test_util.hpp"

using namespace mrgan;
using mrgan::test_support::grad_copy;
using mrgan::test_support::random_param;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), Error);
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
}

TEST(Tensor, FiniteDetection) {
  Tensor<double> t({3}, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN(), 2.0});
  EXPECT_FALSE(t.is_finite());
  try {
    require_finite(t, "probe");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
  EXPECT_TRUE(Tensor<double>({2}, 1.0).is_finite());
}

TEST(Backward, SumGivesOnes) {
  auto x = random_param({2, 3, 4}, 1);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  auto x = random_param({5, 7}, 2);
  backward(sum(x * x) * 0.5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = random_param({3}, 3);
  try {
    backward(x * 2.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
  }
}

TEST(Backward, DetachedInputsContributeNothing) {
  auto x = random_param({4}, 4);
  auto y = x.detach();
  backward(sum(x * 3.0 + y * y));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, TwoConsumersAccumulate) {
  auto x = random_param({6}, 5);
  auto f = [](const Tensor<double>& t) { return sum(tanh(t) * 2.0); };
  auto g = [](const Tensor<double>& t) { return sum(exp(t)); };

  backward(f(x));
  auto gf = grad_copy(x);
  x.zero_grad();
  backward(g(x));
  auto gg = grad_copy(x);
  x.zero_grad();
  backward(f(x) + g(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], gf[i] + gg[i], 1e-12);
}

TEST(Backward, TapeIsConsumed) {
  auto x = random_param({3}, 6);
  auto loss = sum(x * x);
  backward(loss);
  auto first = grad_copy(x);
  backward(loss);  // graph released: nothing more flows
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], first[i]);
}

TEST(Backward, ScalarBroadcastOps) {
  auto x = random_param({5}, 7, 0.5, 2.0);
  auto s = random_param({1}, 8, 0.5, 2.0);
  auto loss_fn = [&] { return sum(log(x / s) * s - x * s + s / x); };
  backward(loss_fn());
  auto r1 = check_gradient("x", x, x.grad(), [&] { return loss_fn().item(); });
  auto r2 = check_gradient("s", s, s.grad(), [&] { return loss_fn().item(); });
  EXPECT_LE(r1.max_rel_err, 1e-6);
  EXPECT_LE(r2.max_rel_err, 1e-6);
}

TEST(Backward, ElementwiseChainMatchesFiniteDifference) {
  auto x = random_param({4, 3}, 9, 0.2, 1.5);
  auto loss_fn = [&] { return mean(sqrt(square(x) + 1.0) * exp(-x) - clamp_min(x, 0.7)); };
  backward(loss_fn());
  auto r = check_gradient("x", x, x.grad(), [&] { return loss_fn().item(); });
  EXPECT_LE(r.max_rel_err, 1e-6);
}

TEST(Backward, GatherRepeatsAccumulate) {
  auto x = random_param({4}, 10);
  backward(sum(gather(x, {1, 1, 3})));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[3], 1.0);
}

TEST(Tensor, OpsAreDeterministic) {
  auto a = mrgan::test_support::random_tensor({2, 6, 6}, 11);
  auto k = mrgan::test_support::random_tensor({3, 2, 3, 3}, 12);
  auto r1 = tanh(conv2d(a, k, Tensor<double>(), 2));
  auto r2 = tanh(conv2d(a, k, Tensor<double>(), 2));
  EXPECT_EQ(r1.values(), r2.values());
}
