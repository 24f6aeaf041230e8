#include <cmath>

#include <gtest/gtest.h>

#include "findrec/mamba.hpp"

using namespace findrec;
using ad::Var;

namespace {

struct ScanInputs {
  Tensor u, delta, b, c, a, d;
};

ScanInputs random_scan(Rng& rng, std::size_t B, std::size_t L, std::size_t D, std::size_t N) {
  ScanInputs s;
  s.u = rng.normal_tensor({B, L, D}, 1.0);
  s.delta = rng.uniform_tensor({B, L, D}, 0.01, 1.5);
  s.b = rng.normal_tensor({B, L, N}, 1.0);
  s.c = rng.normal_tensor({B, L, N}, 1.0);
  s.a = rng.uniform_tensor({D, N}, -3.0, -0.05);
  s.d = rng.normal_tensor({D}, 1.0);
  return s;
}

Tensor run_scan(const ScanInputs& s) {
  return selective_scan(ad::constant(s.u), ad::constant(s.delta), ad::constant(s.b), ad::constant(s.c),
                        ad::constant(s.a), ad::constant(s.d))
      .value();
}

double max_abs_diff(const Tensor& x, const Tensor& y) {
  double m = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

ScanInputs hand_case() {
  return {Tensor({1, 2, 1}, std::vector<double>{1, 1}), Tensor({1, 2, 1}, std::vector<double>{1, 1}),
          Tensor({1, 2, 1}, std::vector<double>{1, 1}), Tensor({1, 2, 1}, std::vector<double>{1, 1}),
          Tensor({1, 1}, std::vector<double>{-std::log(2.0)}), Tensor({1}, std::vector<double>{0.0})};
}

MambaConfig small_config() { return MambaConfig{6, 3, 2, 3, 2}; }

}  // namespace

TEST(SelectiveScan, HandRecurrence) {
  const ScanInputs s = hand_case();
  const Tensor y = run_scan(s);
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 1.5, 1e-15);
  const Tensor r = scan_reference(s.u, s.delta, s.b, s.c, s.a, s.d);
  EXPECT_NEAR(r[0], 1.0, 1e-15);
  EXPECT_NEAR(r[1], 1.5, 1e-15);
}

TEST(SelectiveScan, ZeroInputGivesZeroOutput) {
  Rng rng(3);
  ScanInputs s = random_scan(rng, 2, 7, 3, 2);
  s.u = Tensor(s.u.shape(), 0.0);
  const Tensor y = run_scan(s);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveScan, SingleStepClosedForm) {
  Rng rng(5);
  const ScanInputs s = random_scan(rng, 1, 1, 2, 3);
  const Tensor r = scan_reference(s.u, s.delta, s.b, s.c, s.a, s.d);
  for (std::size_t c = 0; c < 2; ++c) {
    double cb = 0.0;
    for (std::size_t n = 0; n < 3; ++n) cb += s.c.at(0, 0, n) * s.b.at(0, 0, n);
    const double expect = cb * s.delta.at(0, 0, c) * s.u.at(0, 0, c) + s.d[c] * s.u.at(0, 0, c);
    EXPECT_NEAR(r.at(0, 0, c), expect, 1e-14);
  }
}

TEST(SelectiveScan, MatchesReferenceOnRandomInstances) {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t L = 1 + static_cast<std::size_t>(rng.uniform_int(0, 31));
    const std::size_t D = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7));
    const std::size_t N = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const std::size_t B = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const ScanInputs s = random_scan(rng, B, L, D, N);
    worst = std::max(worst, max_abs_diff(run_scan(s), scan_reference(s.u, s.delta, s.b, s.c, s.a, s.d)));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(SelectiveScan, ImpulseResponseDecaysMonotonically) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    ScanInputs s = random_scan(rng, 1, 24, 1, 1);
    s.u = Tensor(s.u.shape(), 0.0);
    s.u[0] = 1.0;
    s.c = Tensor(s.c.shape(), 1.0);
    s.d = Tensor(s.d.shape(), 0.0);
    const Tensor y = run_scan(s);
    for (std::size_t t = 1; t < 24; ++t) EXPECT_LT(std::abs(y[t]), std::abs(y[t - 1]));
  }
}

TEST(SelectiveScan, RejectsMismatchedShapes) {
  Rng rng(2);
  ScanInputs s = random_scan(rng, 1, 4, 2, 2);
  s.a = Tensor({3, 2}, -1.0);
  EXPECT_THROW(run_scan(s), ShapeMismatch);
}

TEST(SelectiveScan, OverflowRaisesNumericalError) {
  Rng rng(2);
  ScanInputs s = random_scan(rng, 1, 3, 1, 1);
  s.u = Tensor(s.u.shape(), 1e308);
  s.b = Tensor(s.b.shape(), 1e308);
  EXPECT_THROW(run_scan(s), NumericalError);
}

TEST(CausalConv, LeftPaddedKernel) {
  // K=2: y_t = bias + w0 x_{t-1} + w1 x_t
  Var x = ad::constant(Tensor({1, 3, 1}, std::vector<double>{1, 2, 3}));
  Var w = ad::constant(Tensor({1, 2}, std::vector<double>{10, 1}));
  Var b = ad::constant(Tensor({1}, std::vector<double>{0.5}));
  EXPECT_EQ(causal_conv1d(x, w, b).value().vec(), (std::vector<double>{1.5, 12.5, 23.5}));
}

TEST(MambaBlock, ZeroInputWithZeroBiasesIsZero) {
  Rng rng(1);
  ParamStore store;
  MambaBlock block(store, "b", small_config(), rng);
  block.conv_bias.mutable_value().fill(0.0);
  block.dt_proj.bias.mutable_value().fill(0.0);
  const Tensor y = block(ad::constant(Tensor({2, 5, 6}, 0.0))).value();
  EXPECT_EQ(y.shape(), (Shape{2, 5, 6}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(MambaBlock, ParameterizationKeepsAandDeltaInRange) {
  Rng rng(1);
  ParamStore store;
  MambaBlock block(store, "b", small_config(), rng);
  for (double v : block.a_log.value().data()) EXPECT_TRUE(std::isfinite(-std::exp(v)) && -std::exp(v) < 0.0);
  for (std::size_t c = 0; c < block.d_inner; ++c) {
    for (std::size_t n = 0; n < 3; ++n) EXPECT_DOUBLE_EQ(block.a_log.value().at(c, n), std::log(n + 1.0));
    const double dt = std::log1p(std::exp(block.dt_proj.bias.value()[c]));
    EXPECT_GE(dt, 1e-3 - 1e-12);
    EXPECT_LE(dt, 1e-1 + 1e-12);
  }
}

TEST(MambaBlock, PerturbationNeverReachesEarlierPositions) {
  Rng rng(9);
  ParamStore store;
  MambaBlock block(store, "b", small_config(), rng);
  const Tensor x = rng.normal_tensor({1, 8, 6}, 1.0);
  const Tensor base = block(ad::constant(x)).value();
  for (std::size_t t = 0; t < 8; ++t) {
    Tensor x2 = x;
    for (std::size_t c = 0; c < 6; ++c) x2.at(0, t, c) += 3.0;
    const Tensor y = block(ad::constant(x2)).value();
    for (std::size_t s = 0; s < t; ++s) {
      for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(y.at(0, s, c), base.at(0, s, c));
    }
    double moved = 0.0;
    for (std::size_t c = 0; c < 6; ++c) moved += std::abs(y.at(0, t, c) - base.at(0, t, c));
    EXPECT_GT(moved, 0.0);
  }
}

TEST(MambaLayer, AlphaZeroIsExactIdentity) {
  Rng rng(4);
  ParamStore store;
  MambaLayer layer(store, "l", small_config(), rng);
  layer.alpha.mutable_value()[0] = 0.0;
  const Tensor x = rng.normal_tensor({2, 4, 6}, 1.0);
  EXPECT_EQ(layer(ad::constant(x), ForwardContext{true, 1, 1, 0.3}).value(), x);
}

TEST(MambaLayer, EvalModeIsResidualPlusBlock) {
  Rng rng(4);
  ParamStore store;
  MambaLayer layer(store, "l", small_config(), rng);
  const Tensor x = rng.normal_tensor({2, 4, 6}, 1.0);
  const Tensor y = layer(ad::constant(x), ForwardContext{false, 1, 1, 0.3}).value();
  const Tensor blk = layer.block(layer.norm(ad::constant(x))).value();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i] + blk[i], 1e-14);
}

TEST(MambaLayer, AlphaGradientEqualsBlockOutput) {
  Rng rng(6);
  ParamStore store;
  MambaLayer layer(store, "l", small_config(), rng);
  const Tensor x = rng.normal_tensor({1, 3, 6}, 1.0);
  ad::backward(ad::sum(layer(ad::constant(x), ForwardContext{})));
  const Tensor blk = layer.block(layer.norm(ad::constant(x))).value();
  double total = 0.0;
  for (double v : blk.data()) total += v;
  EXPECT_NEAR(layer.alpha.grad()[0], total, 1e-12);

  const double eps = 1e-6;
  layer.alpha.mutable_value()[0] = 1.0 + eps;
  const double fp = ad::sum(layer(ad::constant(x), ForwardContext{})).item();
  layer.alpha.mutable_value()[0] = 1.0 - eps;
  const double fm = ad::sum(layer(ad::constant(x), ForwardContext{})).item();
  EXPECT_NEAR((fp - fm) / (2 * eps), total, 1e-6);
}

TEST(MambaLayer, DropoutIsReproducibleForAFixedStep) {
  Rng rng(4);
  ParamStore store;
  MambaLayer layer(store, "l", small_config(), rng);
  const Var x = ad::constant(rng.normal_tensor({2, 4, 6}, 1.0));
  const ForwardContext ctx{true, 7, 3, 0.5};
  EXPECT_EQ(layer(x, ctx).value(), layer(x, ctx).value());
  EXPECT_NE(layer(x, ctx).value(), layer(x, ForwardContext{true, 7, 4, 0.5}).value());
}

TEST(MambaStack, AllAlphasZeroIsIdentity) {
  Rng rng(8);
  ParamStore store;
  MambaStack stack(store, "s", small_config(), rng);
  ASSERT_EQ(stack.layers.size(), 2u);
  for (auto& l : stack.layers) l.alpha.mutable_value()[0] = 0.0;
  const Tensor x = rng.normal_tensor({2, 5, 6}, 1.0);
  const std::vector<std::size_t> len = {5, 3};
  const StackOutput out = stack(ad::constant(x), len, ForwardContext{});
  EXPECT_EQ(out.sequence.value(), x);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(out.last.value().at(0, c), x.at(0, 4, c));
    EXPECT_EQ(out.last.value().at(1, c), x.at(1, 2, c));
  }
}

TEST(MambaStack, ValidLengthOnlyMovesTheSummary) {
  Rng rng(8);
  ParamStore store;
  MambaStack stack(store, "s", small_config(), rng);
  const Var x = ad::constant(rng.normal_tensor({1, 6, 6}, 1.0));
  const std::vector<std::size_t> a = {6}, b = {2};
  const StackOutput oa = stack(x, a, ForwardContext{});
  const StackOutput ob = stack(x, b, ForwardContext{});
  EXPECT_EQ(oa.sequence.value(), ob.sequence.value());
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(ob.last.value().at(0, c), oa.sequence.value().at(0, 1, c));
  const std::vector<std::size_t> zero = {0};
  EXPECT_THROW(stack(x, zero, ForwardContext{}), ShapeMismatch);
}

TEST(MambaConfig, RejectsZeroDimensions) {
  MambaConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.d_inner(), 256u);
  cfg.d_state = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
