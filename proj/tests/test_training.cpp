// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "miniseg/error.hpp"
#include "miniseg/training.hpp"

using namespace miniseg;

namespace {

MiniSegConfig tiny_config() {
  MiniSegConfig c;
  c.channels = {4, 8, 8, 8};
  c.blocks = {2, 2, 2, 2};
  c.downsamplers = {1, 1, 1, 1};
  return c;
}

Sample toy_sample(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Sample s{"toy" + std::to_string(seed), GrayImage(h, w), Mask(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool fg = (y - h / 2) * (y - h / 2) + (x - w / 3) * (x - w / 3) < h * w / 12;
      s.mask.at(y, x) = fg ? 1 : 0;
      s.image.at(y, x) = (fg ? 0.7f : 0.2f) + 0.1f * unit(rng);
    }
  return s;
}

std::vector<Sample> toy_set(int n, int size) {
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(toy_sample(size, size, 100 + i));
  return out;
}

Tensor constant_logits(int n, int h, int w, float bg, float fg) {
  Tensor t({n, 2, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        t.at(b, 0, y, x) = bg;
        t.at(b, 1, y, x) = fg;
      }
  return t;
}

}  // namespace

TEST(Loss, NearOneHotIsTiny) {
  std::vector<std::uint8_t> labels(16, 1);
  std::vector<Tensor> heads(4, constant_logits(1, 4, 4, -20.0f, 20.0f));
  const float w[] = {1, 1, 1, 1};
  EXPECT_LT(deep_supervision_loss(heads, labels, w).item(), 1e-3f);
}

TEST(Loss, UniformLogitsGiveLnTwoPerHead) {
  std::vector<std::uint8_t> labels = {0, 1, 1, 0, 1, 0};
  std::vector<Tensor> heads(4, constant_logits(1, 2, 3, 0.3f, 0.3f));
  const float w[] = {1, 1, 1, 1};
  EXPECT_NEAR(deep_supervision_loss(heads, labels, w).item(), 4.0 * std::log(2.0), 1e-6);
}

TEST(Loss, ZeroAuxWeightsReduceToSingleHead) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n01;
  std::vector<Tensor> heads;
  for (int i = 0; i < 4; ++i) {
    Tensor t({2, 2, 3, 3});
    for (float& v : t.data()) v = n01(rng);
    heads.push_back(t);
  }
  std::vector<std::uint8_t> labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 3 == 0;
  const float w[] = {1, 0, 0, 0};
  EXPECT_EQ(deep_supervision_loss(heads, labels, w).item(), softmax_cross_entropy(heads[0], labels).item());
}

TEST(Loss, RejectsNonBinaryLabels) {
  std::vector<std::uint8_t> labels = {0, 2, 1, 0};
  std::vector<Tensor> heads(1, constant_logits(1, 2, 2, 0, 0));
  const float w[] = {1};
  EXPECT_THROW(deep_supervision_loss(heads, labels, w), DataError);
}

TEST(Schedule, PolyValues) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(poly_lr(0, 1000, cfg), 1e-3);
  EXPECT_DOUBLE_EQ(poly_lr(1000, 1000, cfg), 0.0);
  EXPECT_NEAR(poly_lr(500, 1000, cfg), 5.359e-4, 1e-7);
  double prev = 1.0;
  for (long i = 0; i <= 1000; ++i) {
    const double lr = poly_lr(i, 1000, cfg);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(poly_lr(1001, 1000, cfg), UsageError);
}

TEST(Adam, ZeroGradientNoDecayIsNoop) {
  ModelWeights w;
  Tensor k = w.add("k", Role::Kernel, {1, 1, 2, 2}, 0.5f);
  k.zero_grad();
  AdamState st;
  adam_step(w, st, 0.1, 0.0);
  for (float v : k.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelWeights w;
  Tensor k = w.add("k", Role::Kernel, {1, 1, 1, 1}, 0.0f);
  k.grad()[0] = 1.0f;
  AdamState st;
  adam_step(w, st, 0.1, 0.0);
  EXPECT_NEAR(k.data()[0], -0.1f, 1e-6);
}

TEST(Adam, LocalityAndDecoupledDecay) {
  ModelWeights w;
  Tensor a = w.add("a", Role::Kernel, {1, 1, 1, 2}, 1.0f);
  Tensor b = w.add("b", Role::Kernel, {1, 1, 1, 2}, 2.0f);
  Tensor gamma = w.add("g", Role::BnGamma, {1, 1, 1, 1}, 1.0f);
  Tensor mean = w.add("m", Role::BnMean, {1, 1, 1, 1}, 3.0f);
  a.grad()[0] = 0.5f;
  a.grad()[1] = -0.5f;
  AdamState st;
  adam_step(w, st, 0.01, 0.1);
  EXPECT_NEAR(b.data()[0], 2.0f * (1.0f - 0.01f * 0.1f), 1e-7);
  EXPECT_NE(a.data()[0], 1.0f * (1.0f - 0.001f));
  EXPECT_EQ(gamma.data()[0], 1.0f);  // no decay, no gradient
  EXPECT_EQ(mean.data()[0], 3.0f);
}

TEST(Adam, DecayOnlyShrinksNorm) {
  ModelWeights w;
  Tensor a = w.add("a", Role::Kernel, {1, 1, 1, 3}, 0.0f);
  a.data()[0] = 3;
  a.data()[1] = -4;
  a.data()[2] = 1;
  AdamState st;
  auto norm = [&] {
    double s = 0;
    for (float v : a.data()) s += double(v) * v;
    return s;
  };
  const double before = norm();
  adam_step(w, st, 0.1, 0.5);
  EXPECT_LT(norm(), before);
  for (float v : a.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Adam, NonFiniteGradientAbortsWithoutChanges) {
  ModelWeights w;
  Tensor a = w.add("a", Role::Kernel, {1, 1, 1, 1}, 1.0f);
  Tensor b = w.add("b", Role::Kernel, {1, 1, 1, 1}, 1.0f);
  a.grad()[0] = 1.0f;
  b.grad()[0] = std::nanf("");
  AdamState st;
  try {
    adam_step(w, st, 0.1, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0f);
  EXPECT_EQ(st.step, 0);
}

TEST(Augment, FlipTwiceIsIdentity) {
  const Sample s = toy_sample(8, 12, 1);
  const Sample back = hflip(hflip(s));
  EXPECT_EQ(back.image.pixels, s.image.pixels);
  EXPECT_EQ(back.mask, s.mask);
  EXPECT_NE(hflip(s).mask, s.mask);
}

TEST(Augment, GeometryStaysInSync) {
  Sample s{"m", GrayImage(48, 40), Mask(48, 40)};
  std::mt19937_64 fill(3);
  for (std::size_t i = 0; i < s.mask.size(); ++i) {
    s.mask.bits[i] = fill() % 2;
    s.image.pixels[i] = static_cast<float>(s.mask.bits[i]);
  }
  TrainConfig cfg;
  cfg.crop = 32;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const Sample a = augment(s, rng, cfg);
    ASSERT_EQ(a.mask.height, 32);
    ASSERT_EQ(a.image.width, 32);
    for (std::size_t p = 0; p < a.mask.size(); ++p) {
      ASSERT_LE(a.mask.bits[p], 1);
      ASSERT_EQ(a.image.pixels[p], static_cast<float>(a.mask.bits[p]));
    }
  }
}

TEST(Augment, DeterministicAndValidated) {
  const Sample s = toy_sample(40, 40, 2);
  TrainConfig cfg;
  cfg.crop = 32;
  std::mt19937_64 r1(9), r2(9);
  for (int i = 0; i < 5; ++i) {
    const Sample a = augment(s, r1, cfg), b = augment(s, r2, cfg);
    EXPECT_EQ(a.image.pixels, b.image.pixels);
    EXPECT_EQ(a.mask, b.mask);
  }
  cfg.crop = 48;
  EXPECT_THROW(augment(s, r1, cfg), UsageError);
  cfg.crop = 20;
  EXPECT_THROW(cfg.validate(), UsageError);
}

TEST(KFold, PartitionProperties) {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("id" + std::to_string(i));
  const auto folds = kfold_split(ids, 5, 11);
  std::set<std::string> seen;
  for (const Fold& f : folds) {
    EXPECT_EQ(f.val.size(), 20u);
    EXPECT_EQ(f.train.size(), 80u);
    for (const auto& id : f.val) EXPECT_TRUE(seen.insert(id).second) << id;
    for (const auto& id : f.val) EXPECT_EQ(std::count(f.train.begin(), f.train.end(), id), 0);
  }
  EXPECT_EQ(seen.size(), ids.size());
  const auto again = kfold_split(ids, 5, 11);
  for (std::size_t i = 0; i < folds.size(); ++i) EXPECT_EQ(folds[i].val, again[i].val);
  EXPECT_NE(kfold_split(ids, 5, 12)[0].val, folds[0].val);
}

TEST(KFold, BalancedRemainderAndErrors) {
  const std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f", "g"};
  std::vector<std::size_t> sizes;
  for (const Fold& f : kfold_split(ids, 5, 1)) sizes.push_back(f.val.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 1, 1, 1}));
  EXPECT_THROW(kfold_split({"a", "b"}, 5, 1), UsageError);
}

TEST(KFold, ExplicitAssignment) {
  const auto folds = folds_from_assignment({"a", "b", "c"}, {{"a", 1}, {"b", 0}, {"c", 1}});
  ASSERT_EQ(folds.size(), 2u);
  EXPECT_EQ(folds[1].val, (std::vector<std::string>{"a", "c"}));
  EXPECT_EQ(folds[1].train, (std::vector<std::string>{"b"}));
  EXPECT_THROW(folds_from_assignment({"a", "z"}, {{"a", 0}}), DataError);
}

TEST(Fit, ZeroEpochsKeepsWeights) {
  MiniSeg m = MiniSeg::build(tiny_config(), 3);
  const auto before = m.weights().entries()[0].tensor.clone();
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_TRUE(fit(m, toy_set(2, 32), {}, cfg).empty());
  const auto after = m.weights().entries()[0].tensor.data();
  EXPECT_TRUE(std::equal(after.begin(), after.end(), before.data().begin()));
}

TEST(Fit, LossDecreasesAndRepeats) {
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 2;
  cfg.crop = 0;
  cfg.initial_lr = 5e-3;
  const auto data = toy_set(4, 32);
  const auto log_path = fs::temp_directory_path() / "miniseg_fit_log.csv";
  fs::remove(log_path);
  MiniSeg a = MiniSeg::build(tiny_config(), 3);
  FitOptions opts;
  opts.log_path = log_path;
  const auto la = fit(a, data, data, cfg, opts);
  MiniSeg b = MiniSeg::build(tiny_config(), 3);
  const auto lb = fit(b, data, data, cfg);
  ASSERT_EQ(la.size(), 6u);
  EXPECT_GT(la.front().mean_train_loss, la.back().mean_train_loss);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].mean_train_loss, lb[i].mean_train_loss);
    EXPECT_EQ(la[i].val_dsc, lb[i].val_dsc);
  }
  std::ifstream in(log_path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,mean_train_loss,lr,val_DSC,val_mIoU");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 6);
  fs::remove(log_path);
}

TEST(Fit, NonFiniteLossRestoresWeights) {
  MiniSeg m = MiniSeg::build(tiny_config(), 3);
  auto data = toy_set(2, 32);
  data[1].image.pixels[5] = std::nanf("");
  std::vector<std::vector<float>> before;
  for (const auto& e : m.weights().entries()) before.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.crop = 0;
  EXPECT_THROW(fit(m, data, {}, cfg), NumericError);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto now = m.weights().entries()[i].tensor.data();
    ASSERT_TRUE(std::equal(now.begin(), now.end(), before[i].begin())) << m.weights().entries()[i].name;
  }
}
