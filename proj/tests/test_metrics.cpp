// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "miniseg/error.hpp"
#include "miniseg/metrics.hpp"
#include "oracles.hpp"

using namespace miniseg;

namespace {

// 10x10: prediction covers rows 0-1 x cols 0-4, truth rows 0-1 x cols 1-5,
// so 8 pixels are shared.
std::pair<Mask, Mask> worked_fixture() {
  Mask pred(10, 10), gt(10, 10);
  for (int x = 0; x < 5; ++x) {
    pred.at(0, x) = pred.at(1, x) = 1;
    gt.at(0, x + 1) = gt.at(1, x + 1) = 1;
  }
  return {pred, gt};
}

Mask from_rows(const std::vector<std::string>& rows) {
  Mask m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) m.at(y, x) = rows[y][x] == '#' ? 1 : 0;
  return m;
}

}  // namespace

TEST(Confusion, WorkedFixture) {
  auto [pred, gt] = worked_fixture();
  const ConfusionCounts c = confusion(pred, gt);
  EXPECT_EQ(c.tp, 8u);
  EXPECT_EQ(c.fp, 2u);
  EXPECT_EQ(c.fn, 2u);
  EXPECT_EQ(c.tn, 88u);
  const Scores s = compute_metrics(c);
  EXPECT_DOUBLE_EQ(s.dsc, 0.8);
  EXPECT_DOUBLE_EQ(s.sen, 0.8);
  EXPECT_NEAR(s.spc, 0.9778, 5e-5);
  EXPECT_NEAR(s.miou, 0.8116, 5e-5);
}

TEST(Confusion, PerfectAndInverted) {
  std::mt19937_64 rng(1);
  const Mask m = oracle::random_mask(rng, 12);
  ConfusionCounts c = confusion(m, m);
  EXPECT_EQ(c.fp + c.fn, 0u);
  const Scores s = compute_metrics(c);
  EXPECT_EQ(s.dsc, 1.0);
  EXPECT_EQ(s.miou, 1.0);
  EXPECT_EQ(s.sen, 1.0);
  EXPECT_EQ(s.spc, 1.0);
  Mask inv = m;
  for (auto& b : inv.bits) b = 1 - b;
  c = confusion(inv, m);
  EXPECT_EQ(c.tp + c.tn, 0u);
}

TEST(Confusion, RejectsBadInput) {
  Mask a(3, 3), b(3, 4);
  EXPECT_THROW(confusion(a, b), ShapeError);
  Mask c(3, 3);
  c.at(1, 1) = 255;
  EXPECT_THROW(confusion(a, c), DataError);
}

TEST(Metrics, EmptyConventions) {
  Mask empty(4, 4), full(4, 4, 1);
  Scores s = compute_metrics(confusion(empty, empty));
  EXPECT_EQ(s.dsc, 1.0);
  EXPECT_EQ(s.sen, 1.0);
  s = compute_metrics(confusion(full, empty));
  EXPECT_EQ(s.dsc, 0.0);
  s = compute_metrics(confusion(full, full));
  EXPECT_EQ(s.spc, 1.0);
  EXPECT_EQ(hausdorff(empty, empty), 0.0);
  EXPECT_DOUBLE_EQ(hausdorff(full, empty), std::sqrt(32.0));
}

TEST(Metrics, RandomMasksMatchOracles) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const Mask gt = oracle::random_mask(rng, 32);
    Mask pred(gt.height, gt.width);
    std::bernoulli_distribution coin(trial % 3 == 0 ? 0.05 : 0.5);
    for (auto& b : pred.bits) b = coin(rng) ? 1 : 0;
    const Scores s = compute_metrics(confusion(pred, gt));
    const oracle::Scores o = oracle::scores(pred, gt);
    ASSERT_EQ(s.dsc, o.dsc);
    ASSERT_EQ(s.sen, o.sen);
    ASSERT_EQ(s.spc, o.spc);
    ASSERT_EQ(s.miou, o.miou);
    ASSERT_EQ(hausdorff(pred, gt), oracle::hausdorff(pred, gt)) << "trial " << trial;
    ASSERT_EQ(lesion_count(gt), oracle::components(gt)) << "trial " << trial;
    const ConfusionCounts c = confusion(pred, gt);
    if (c.tp + c.fp + c.fn > 0) {
      const double iou = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
      ASSERT_NEAR(s.dsc, 2 * iou / (1 + iou), 1e-12);
    }
    for (double v : {s.dsc, s.sen, s.spc, s.miou}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Hausdorff, ThreeFourFive) {
  Mask a(8, 8), b(8, 8);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;
  EXPECT_DOUBLE_EQ(hausdorff(a, b), 5.0);
  EXPECT_DOUBLE_EQ(hausdorff(b, a), 5.0);
  EXPECT_EQ(hausdorff(a, a), 0.0);
}

TEST(Hausdorff, InteriorPixelsIgnored) {
  const Mask big = from_rows({"#####", "#####", "#####", "#####", "#####"});
  const Mask ring = from_rows({"#####", "#...#", "#...#", "#...#", "#####"});
  EXPECT_EQ(hausdorff(big, ring), 0.0);
}

TEST(Lesions, Examples) {
  EXPECT_EQ(lesion_count(from_rows({"##...", "##...", ".....", "...##", "...##"})), 2);
  EXPECT_EQ(lesion_count(from_rows({"#..", ".#.", "..#"})), 1);
  const SliceReport r = slice_analysis(Mask(6, 6), Mask(6, 6));
  EXPECT_EQ(r.lesion_count, 0);
  EXPECT_EQ(r.infected_area, 0.0);
}

TEST(MetricsCsv, RowsAndAggregates) {
  auto [pred, gt] = worked_fixture();
  const SliceReport r = slice_analysis(pred, gt);
  const auto path = std::filesystem::temp_directory_path() / "miniseg_metrics.csv";
  write_metrics_csv(path, {{"a", 0, r}, {"b", 0, r}, {"c", 1, r}});
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 1u + 3 + 2 + 2);
  EXPECT_EQ(lines[0], "slice_id,fold,mIoU,SEN,SPC,DSC,HD,infected_area,lesion_count");
  EXPECT_EQ(lines[1].rfind("a,0,", 0), 0u);
  EXPECT_EQ(lines[4].rfind("mean,0,", 0), 0u);
  EXPECT_EQ(lines[6].rfind("mean,all,", 0), 0u);
  EXPECT_EQ(lines[7], "std,all,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000,0.000000");
  std::filesystem::remove(path);
}
