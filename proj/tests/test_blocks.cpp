// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "miniseg/blocks.hpp"
#include "miniseg/error.hpp"

using namespace miniseg;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(s);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

void fill(Tensor t, float v) {
  for (float& x : t.data()) x = v;
}

struct Fixture {
  ModelWeights weights;
  std::mt19937_64 rng{42};
  LayerFactory factory{weights, rng, "blk"};
};

std::size_t count_learnable(const ModelWeights& w) { return w.learnable_count(); }

}  // namespace

TEST(Ahsp, ShapesFor24To32) {
  Fixture f;
  AhspBlock block(f.factory, 24, 32, 2, {});
  std::mt19937_64 rng(3);
  AhspBlock::Trace trace;
  Tensor y = block.forward(random_tensor({1, 24, 16, 16}, rng), Mode::Train, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(trace.shrunk.shape(), (Shape{1, 8, 16, 16}));
  EXPECT_EQ(trace.pooled.shape(), (Shape{1, 8, 8, 8}));
  ASSERT_EQ(trace.branches.size(), 4u);
  for (const Tensor& b : trace.branches) EXPECT_EQ(b.shape(), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(trace.attention.shape(), (Shape{1, 4, 8, 8}));
}

TEST(Ahsp, BranchDilationsArePowersOfTwo) {
  Fixture f;
  AhspBlock block(f.factory, 8, 16, 1, {});
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(block.depthwise(k).spec.dilation, 1 << k);
    EXPECT_EQ(block.depthwise(k).spec.padding, 1 << k);
  }
  EXPECT_EQ(block.shrink().spec.stride, 1);
}

TEST(Ahsp, ZeroAttentionWeightsScaleByOneAndAHalf) {
  Fixture f;
  AhspBlock block(f.factory, 8, 16, 1, {});
  fill(block.attention()->weight, 0.0f);
  fill(block.attention()->bias, 0.0f);
  std::mt19937_64 rng(5);
  AhspBlock::Trace trace;
  block.forward(random_tensor({2, 8, 8, 8}, rng), Mode::Train, &trace);
  for (float a : trace.attention.data()) EXPECT_EQ(a, 0.5f);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto h = trace.hierarchical[k].data();
    const auto a = trace.attended[k].data();
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(a[i], 1.5f * h[i]);
  }
}

TEST(Ahsp, AttentionStrictlyInsideUnitInterval) {
  Fixture f;
  AhspBlock block(f.factory, 24, 32, 2, {});
  std::mt19937_64 rng(6);
  AhspBlock::Trace trace;
  block.forward(random_tensor({2, 24, 16, 16}, rng), Mode::Train, &trace);
  for (float a : trace.attention.data()) {
    EXPECT_GT(a, 0.0f);
    EXPECT_LT(a, 1.0f);
  }
}

TEST(Ahsp, HierarchicalSumsTelescope) {
  Fixture f;
  AhspBlock block(f.factory, 24, 32, 1, {});
  std::mt19937_64 rng(7);
  AhspBlock::Trace trace;
  block.forward(random_tensor({1, 24, 12, 12}, rng), Mode::Train, &trace);
  const auto last = trace.hierarchical.back().data();
  for (std::size_t i = 0; i < last.size(); ++i) {
    double expect = trace.pooled.data()[i];
    for (const Tensor& b : trace.branches) expect += b.data()[i];
    EXPECT_NEAR(last[i], expect, 1e-5);
  }
}

TEST(Ahsp, ZeroDepthwiseKernelsLeaveOnlyPooling) {
  Fixture f;
  AhspBlock block(f.factory, 8, 16, 1, {});
  for (int k = 0; k < 4; ++k) fill(block.depthwise(k).weight, 0.0f);
  AhspBlock::Trace trace;
  block.forward(Tensor({1, 8, 6, 6}, 0.7f), Mode::Train, &trace);
  for (std::size_t k = 1; k < 4; ++k) {
    const auto a = trace.hierarchical[0].data();
    const auto b = trace.hierarchical[k].data();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Ahsp, GroupedFuseHasReducedWeightCount) {
  for (int c : {8, 24, 32, 64}) {
    Fixture f;
    AhspBlock block(f.factory, c, c, 1, {});
    EXPECT_EQ(block.fuse().weight.numel(), static_cast<std::size_t>(c * c / 4));
    EXPECT_EQ(block.attention()->weight.numel(), static_cast<std::size_t>(c));
  }
}

TEST(Ahsp, RejectsIndivisibleWidth) {
  Fixture f;
  EXPECT_THROW(AhspBlock(f.factory, 8, 10, 1, {}), UsageError);
}

// Saturating the attention bias drives A to exactly 0 in float, which must
// reproduce the block built without attention.
TEST(Ahsp, NoAttentionMatchesSaturatedAttention) {
  Fixture with;
  AhspBlock full(with.factory, 16, 16, 1, {});
  ModelWeights plain_weights;
  std::mt19937_64 rng2(99);
  BlockOptions opts;
  opts.attention = false;
  AhspBlock plain(LayerFactory(plain_weights, rng2, "blk"), 16, 16, 1, opts);
  EXPECT_EQ(plain.attention(), nullptr);
  for (const WeightEntry& e : plain_weights.entries()) {
    const WeightEntry* src = with.weights.find(e.name);
    ASSERT_NE(src, nullptr) << e.name;
    Tensor dst = e.tensor;
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), dst.data().begin());
  }
  fill(full.attention()->weight, 0.0f);
  fill(full.attention()->bias, -200.0f);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({1, 16, 8, 8}, rng);
  Tensor a = full.forward(x, Mode::Infer);
  Tensor b = plain.forward(x, Mode::Infer);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Downsampler, StridedShape) {
  Fixture f;
  DownsamplerBlock block(f.factory, 32, 64, 2, {});
  std::mt19937_64 rng(9);
  EXPECT_EQ(block.forward(random_tensor({1, 32, 64, 64}, rng), Mode::Infer).shape(),
            (Shape{1, 64, 32, 32}));
  EXPECT_EQ(block.depthwise().spec.kernel_h, 5);
  EXPECT_EQ(block.depthwise().spec.dilation, 1);
}

TEST(Downsampler, ParameterCountClosedForm) {
  Fixture f;
  DownsamplerBlock block(f.factory, 24, 32, 2, {});
  EXPECT_EQ(count_learnable(f.weights), 24u * 32 + 25 * 32 + 2 * 32 + 32);
}

TEST(Downsampler, ComposedIdentities) {
  Fixture f;
  DownsamplerBlock block(f.factory, 4, 4, 1, {});
  Tensor pw = block.pointwise().weight;
  fill(pw, 0.0f);
  for (int c = 0; c < 4; ++c) pw.at(c, c, 0, 0) = 1.0f;
  Tensor dw = block.depthwise().weight;
  fill(dw, 0.0f);
  for (int c = 0; c < 4; ++c) dw.at(c, 0, 2, 2) = 1.0f;
  fill(block.bn().running_var, 1.0f - 1e-3f);
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({1, 4, 7, 7}, rng, 0.1f, 2.0f);
  Tensor y = block.forward(x, Mode::Infer);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(ConvBlock, FirstStageBlock) {
  Fixture f;
  ConvBlock block(f.factory, 3, 8, 2, {});
  EXPECT_EQ(count_learnable(f.weights), 240u);
  std::mt19937_64 rng(11);
  EXPECT_EQ(block.forward(random_tensor({1, 3, 64, 64}, rng), Mode::Infer).shape(),
            (Shape{1, 8, 32, 32}));
}

TEST(ConvBlock, DeltaKernelIdentity) {
  Fixture f;
  ConvBlock block(f.factory, 2, 2, 1, {});
  Tensor w = block.conv().weight;
  fill(w, 0.0f);
  for (int c = 0; c < 2; ++c) w.at(c, c, 1, 1) = 1.0f;
  fill(block.bn().running_var, 1.0f - 1e-3f);
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({1, 2, 5, 5}, rng, 0.1f, 1.0f);
  Tensor y = block.forward(x, Mode::Infer);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(FeatureFusion, ChannelsAndExtent) {
  Fixture f;
  FeatureFusionModule ffm(f.factory, 64, 32);
  std::mt19937_64 rng(13);
  EXPECT_EQ(ffm.forward(random_tensor({1, 64, 10, 14}, rng), Mode::Infer).shape(),
            (Shape{1, 32, 10, 14}));
  EXPECT_EQ(ffm.dilated().spec.dilation, 2);
}

TEST(FeatureFusion, ZeroKernelsGiveBeta) {
  Fixture f;
  FeatureFusionModule ffm(f.factory, 6, 3);
  fill(ffm.local().weight, 0.0f);
  fill(ffm.dilated().weight, 0.0f);
  Tensor beta = ffm.bn().beta;
  for (int c = 0; c < 3; ++c) beta.data()[c] = 0.5f * static_cast<float>(c + 1);
  std::mt19937_64 rng(14);
  Tensor y = ffm.forward(random_tensor({1, 6, 4, 4}, rng), Mode::Infer);
  for (int c = 0; c < 3; ++c)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 4; ++w) EXPECT_EQ(y.at(0, c, h, w), beta.data()[c]);
}

TEST(Blocks, InferLeavesRunningStatsAlone) {
  Fixture f;
  AhspBlock block(f.factory, 8, 16, 1, {});
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({2, 8, 6, 6}, rng);
  block.forward(x, Mode::Infer);
  for (float v : block.bn().running_mean.data()) EXPECT_EQ(v, 0.0f);
  block.forward(x, Mode::Train);
  bool moved = false;
  for (float v : block.bn().running_mean.data()) moved |= v != 0.0f;
  EXPECT_TRUE(moved);
}

TEST(Blocks, SingleBranchIsSmaller) {
  Fixture a, b;
  AhspBlock full(a.factory, 32, 32, 1, {});
  SingleBranchBlock single(b.factory, 32, 32, 1, {});
  EXPECT_LT(count_learnable(b.weights), count_learnable(a.weights));
}

TEST(Blocks, ReluOptionDropsSlopes) {
  Fixture f;
  BlockOptions opts;
  opts.relu = true;
  ConvBlock block(f.factory, 3, 8, 1, opts);
  EXPECT_EQ(count_learnable(f.weights), 240u - 8);
  EXPECT_EQ(f.weights.find("blk.act.alpha"), nullptr);
}
