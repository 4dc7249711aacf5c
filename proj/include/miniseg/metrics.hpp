// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miniseg/raster.hpp"

namespace miniseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;
};

struct Scores {
  double miou = 0;
  double sen = 0;
  double spc = 0;
  double dsc = 0;
};

struct SliceReport {
  Scores scores;
  double hd = 0;
  double infected_area = 0;
  int lesion_count = 0;
};

/// Throws ShapeError on extent mismatch and DataError on non-binary values.
ConfusionCounts confusion(const Mask& pred, const Mask& gt);

/// Ratios with an empty denominator are 1, except DSC which is 0 when exactly
/// one mask is empty.
Scores compute_metrics(const ConfusionCounts& c);

/// Foreground pixels with a 4-neighbour outside the foreground or on the
/// image border.
std::vector<std::pair<int, int>> boundary_pixels(const Mask& m);

/// Symmetric Hausdorff distance between the boundary pixel sets, in pixels.
/// Both empty gives 0, one empty gives the image diagonal.
double hausdorff(const Mask& pred, const Mask& gt);

/// Number of 8-connected foreground components.
int lesion_count(const Mask& m);

SliceReport slice_analysis(const Mask& pred, const Mask& gt);

struct MetricsRow {
  std::string slice_id;
  int fold = 0;
  SliceReport report;
};

struct ReportAverage {
  Scores scores;
  double hd = 0;
  double infected_area = 0;
  double lesion_count = 0;
  std::size_t slices = 0;
};

ReportAverage average(const std::vector<SliceReport>& reports);

/// Per-slice rows, then one "mean" row per fold, then mean and std rows over
/// the per-fold means.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

}  // namespace miniseg
