#include <gtest/gtest.h>

#include <cmath>

#include "mtp/blocks.hpp"
#include "mtp/errors.hpp"

using namespace mtp;

namespace {

int64_t count(torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

void zero_all(torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.zero_();
}

}  // namespace

TEST(ConvBlock, StrideTwoHalvesSpatialDims) {
  ConvBlock c(16, 32, 3, 2);
  auto y = c->forward(torch::randn({1, 16, 64, 64}));
  EXPECT_EQ(TensorSpec::of(y), (TensorSpec{1, 32, 32, 32}));
}

TEST(ConvBlock, IdentityKernelGivesActivationOfInput) {
  ConvBlock c(8, 8, 1, 1);
  c->eval();
  {
    torch::NoGradGuard ng;
    c->conv->weight.copy_(torch::eye(8).view({8, 8, 1, 1}));
    c->bn->weight.fill_(1.0);
    c->bn->bias.zero_();
    c->bn->running_mean.zero_();
    // var + eps == 1 so the normalisation is an exact identity
    c->bn->running_var.fill_(1.0 - c->bn->options.eps());
  }
  auto x = torch::randn({1, 8, 10, 10});
  auto y = c->forward(x);
  EXPECT_TRUE(torch::allclose(y, torch::silu(x), 1e-6, 1e-6));
}

TEST(ConvBlock, ParameterCount) {
  ConvBlock c(16, 32, 3);
  EXPECT_EQ(count(*c), 16 * 32 * 9 + 2 * 32);
  EXPECT_EQ(count(*c), 4672);
}

TEST(ConvBlock, RejectsUnsupportedKernel) {
  EXPECT_THROW(ConvBlock(8, 8, 5), ConfigError);
}

TEST(ConvBlock, ChannelMismatchIsShapeError) {
  ConvBlock c(16, 32, 3);
  try {
    c->forward(torch::randn({1, 8, 16, 16}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("conv"), std::string::npos) << e.what();
  }
}

TEST(C2f, PreservesShape) {
  C2f b(64, 64, 1);
  auto y = b->forward(torch::randn({1, 64, 32, 32}));
  EXPECT_EQ(TensorSpec::of(y), (TensorSpec{1, 64, 32, 32}));
}

TEST(C2f, FusionInputChannels) {
  C2f b(64, 64, 2);
  EXPECT_EQ(b->fusion_in_channels(), (2 + 2) * (64 / 2));
}

TEST(C2f, OddOutputChannelsRejected) { EXPECT_THROW(C2f(64, 63, 1), ConfigError); }

TEST(Bottleneck, ZeroWeightsWithResidualIsIdentity) {
  Bottleneck b(16, 16, true);
  zero_all(*b);
  b->eval();
  auto x = torch::randn({2, 16, 8, 8});
  EXPECT_TRUE(torch::equal(b->forward(x), x));
}

TEST(SPPF, PreservesShape) {
  SPPF s(256, 256);
  auto y = s->forward(torch::randn({1, 256, 20, 20}));
  EXPECT_EQ(TensorSpec::of(y), (TensorSpec{1, 256, 20, 20}));
}

TEST(SPPF, PoolingOfConstantIsConstant) {
  auto x = torch::full({1, 4, 12, 12}, 3.25);
  auto p = torch::max_pool2d(x, 5, 1, 2);
  EXPECT_TRUE(torch::equal(p, x));
  EXPECT_TRUE(torch::equal(torch::max_pool2d(p, 5, 1, 2), x));
}

TEST(SPPF, PeakSpreadsToFiveByFivePlateau) {
  auto x = torch::zeros({1, 1, 15, 15});
  x[0][0][7][7] = 1.0;
  auto p = torch::max_pool2d(x, 5, 1, 2);
  for (int i = 0; i < 15; ++i) {
    for (int j = 0; j < 15; ++j) {
      const bool inside = std::abs(i - 7) <= 2 && std::abs(j - 7) <= 2;
      EXPECT_EQ(p[0][0][i][j].item<float>(), inside ? 1.0f : 0.0f) << i << "," << j;
    }
  }
}

TEST(AdaptiveConcat, FreshGateTakesConcatBranch) {
  AdaptiveConcat a(16, 24, "p8");
  EXPECT_DOUBLE_EQ(a->weight.item<double>(), 5.0);
  EXPECT_NEAR(a->gate(), 0.99331, 5e-6);
  EXPECT_TRUE(a->concat_active());
  EXPECT_EQ(a->weight.dim(), 0);
  EXPECT_EQ(a->fuse->in_channels(), 40);
  EXPECT_EQ(a->fuse->out_channels(), 16);
}

TEST(AdaptiveConcat, ZeroWeightPassesNeckThroughInEval) {
  AdaptiveConcat a(8, 8, "p4");
  {
    torch::NoGradGuard ng;
    a->weight.fill_(0.0);
  }
  a->eval();
  auto xn = torch::randn({1, 8, 6, 6});
  auto xb = torch::randn({1, 8, 6, 6});
  EXPECT_TRUE(torch::equal(a->forward(xn, xb), xn));
}

TEST(AdaptiveConcat, EvalConcatBranchIsFuseOfConcat) {
  AdaptiveConcat a(8, 4, "p4");
  a->eval();
  auto xn = torch::randn({1, 8, 6, 6});
  auto xb = torch::randn({1, 4, 6, 6});
  auto expect = a->fuse->forward(torch::cat({xn, xb}, 1));
  EXPECT_TRUE(torch::equal(a->forward(xn, xb), expect));
}

TEST(AdaptiveConcat, TrainModeSoftGateWithZeroFuse) {
  AdaptiveConcat a(8, 8, "p4");
  zero_all(*a->fuse);
  {
    torch::NoGradGuard ng;
    a->weight.fill_(-5.0);
  }
  a->train();
  auto xn = torch::randn({2, 8, 6, 6});
  auto xb = torch::randn({2, 8, 6, 6});
  const double g = 1.0 / (1.0 + std::exp(5.0));
  EXPECT_NEAR(g, 0.00669, 1e-5);
  EXPECT_TRUE(torch::allclose(a->forward(xn, xb), (1 - g) * xn, 1e-6, 1e-6));
}

TEST(AdaptiveConcat, TrainModeLimitsMatchBranches) {
  AdaptiveConcat a(8, 8, "p4");
  a->train();
  auto xn = torch::randn({2, 8, 6, 6});
  auto xb = torch::randn({2, 8, 6, 6});
  torch::NoGradGuard ng;
  a->weight.fill_(20.0);
  auto fused = a->fuse->forward(torch::cat({xn, xb}, 1));
  EXPECT_LT((a->forward(xn, xb) - fused).abs().max().item<double>(), 1e-6);
  a->weight.fill_(-20.0);
  EXPECT_LT((a->forward(xn, xb) - xn).abs().max().item<double>(), 1e-6);
}

TEST(AdaptiveConcat, OutputChannelsAlwaysMatchNeck) {
  AdaptiveConcat a(12, 20, "p16");
  auto xn = torch::randn({1, 12, 4, 4});
  auto xb = torch::randn({1, 20, 4, 4});
  for (double w : {-3.0, 0.0, 3.0}) {
    {
      torch::NoGradGuard ng;
      a->weight.fill_(w);
    }
    a->train();
    EXPECT_EQ(a->forward(xn, xb).size(1), 12);
    a->eval();
    EXPECT_EQ(a->forward(xn, xb).size(1), 12);
  }
}

TEST(AdaptiveConcat, SpatialMismatchNamesLevel) {
  AdaptiveConcat a(8, 8, "p16");
  try {
    a->forward(torch::randn({1, 8, 4, 4}), torch::randn({1, 8, 8, 8}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("p16"), std::string::npos) << e.what();
  }
}

TEST(AdaptiveConcat, WeightReceivesGradientInTrainMode) {
  AdaptiveConcat a(4, 4, "p4");
  a->train();
  a->forward(torch::randn({2, 4, 4, 4}), torch::randn({2, 4, 4, 4})).sum().backward();
  ASSERT_TRUE(a->weight.grad().defined());
  EXPECT_NE(a->weight.grad().item<double>(), 0.0);
}

TEST(SegmentHead, DoublesResolution) {
  SegmentHead h(16, 1);
  h->eval();
  torch::NoGradGuard ng;
  auto y = h->forward(torch::randn({1, 16, 320, 320}));
  EXPECT_EQ(TensorSpec::of(y), (TensorSpec{1, 2, 640, 640}));
  auto z = h->forward(torch::randn({2, 16, 7, 9}));
  EXPECT_EQ(TensorSpec::of(z), (TensorSpec{2, 2, 14, 18}));
}

TEST(SegmentHead, ParameterCount) {
  SegmentHead h(16, 1);
  EXPECT_EQ(count(*h), 7940);
  EXPECT_EQ(SegmentHeadImpl::kFeatureDim, 32);
}

TEST(SegmentHead, ZeroWeightsGiveZeroLogits) {
  SegmentHead h(16, 1);
  zero_all(*h);
  h->eval();
  auto y = h->forward(torch::randn({1, 16, 8, 8}));
  EXPECT_TRUE(torch::equal(y, torch::zeros_like(y)));
  EXPECT_TRUE(torch::allclose(torch::sigmoid(y), torch::full_like(y, 0.5)));
}

TEST(SegmentHead, ChannelMismatchIsShapeError) {
  SegmentHead h(16, 1);
  EXPECT_THROW(h->forward(torch::randn({1, 8, 8, 8})), ShapeError);
}

using V = std::vector<int64_t>;

TEST(DetectHead, TrainModeReturnsThreeRawTensors) {
  DetectHead d(1, V{16, 32, 64}, V{8, 16, 32});
  d->train();
  for (int64_t b : {1, 3}) {
    auto out = d->forward({torch::randn({b, 16, 8, 8}), torch::randn({b, 32, 4, 4}),
                           torch::randn({b, 64, 2, 2})});
    ASSERT_EQ(out.raw.size(), 3u);
    EXPECT_EQ(out.raw[0].size(1), 4 * 16 + 1);
    EXPECT_EQ(out.raw[2].size(2), 2);
    EXPECT_FALSE(out.decoded.defined());
  }
}

TEST(DetectHead, EvalModeDecodesAllCells) {
  DetectHead d(1, V{16, 32, 64}, V{8, 16, 32});
  d->eval();
  torch::NoGradGuard ng;
  auto out = d->forward({torch::randn({1, 16, 80, 80}), torch::randn({1, 32, 40, 40}),
                         torch::randn({1, 64, 20, 20})});
  EXPECT_EQ(out.decoded.size(1), 4 + 1);
  EXPECT_EQ(out.decoded.size(2), 80 * 80 + 40 * 40 + 20 * 20);
  EXPECT_EQ(out.decoded.size(2), 8400);
  EXPECT_EQ(d->outputs_per_cell(), 65);
}

TEST(DetectHead, WrongScaleCountIsConfigError) {
  EXPECT_THROW(DetectHead(1, V{16, 32}, V{8, 16, 32}), ConfigError);
}

TEST(Blocks, ForwardIsDeterministic) {
  C2f b(16, 16, 2, true);
  b->eval();
  auto x = torch::randn({1, 16, 8, 8});
  EXPECT_TRUE(torch::equal(b->forward(x), b->forward(x)));
}
