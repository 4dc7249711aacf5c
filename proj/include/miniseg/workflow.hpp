// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <json.hpp>

#include "miniseg/training.hpp"

namespace miniseg {

/// Settings shared by the command workflows.
struct RunOptions {
  std::filesystem::path data;
  std::filesystem::path out = "miniseg_out";
  std::filesystem::path ckpt;
  std::uint64_t seed = 1;
  int size = 512;        // summary input extent
  int fold = -1;         // -1 runs every fold
  int folds = 5;
  std::uint32_t ablations = 0;
  bool overlays = false;
  int workers = 1;
  int latency_runs = 3;
  TrainConfig train;

  /// Reads the keys of a JSON object; unknown keys are a UsageError.
  static RunOptions from_json(const nlohmann::json& j);
};

using LogFn = std::function<void(const std::string&)>;

/// k-fold (or single --fold) training. Writes fold<k>.msg, fold<k>_log.csv and
/// metrics.csv under `out`.
nlohmann::json run_train(const RunOptions& opt, const LogFn& log = {});
/// Evaluates a checkpoint on a dataset (or one fold of it); writes
/// metrics.csv and, with overlays, <id>_overlay.png.
nlohmann::json run_eval(const RunOptions& opt, const LogFn& log = {});
/// Predicts masks for a PNG file, a directory of PNGs, or a dataset
/// directory; writes <id>_mask.png and <id>_overlay.png.
nlohmann::json run_infer(const RunOptions& opt, const LogFn& log = {});
/// Parameter breakdown, FLOPs at opt.size and single-thread latency.
nlohmann::json run_summary(const RunOptions& opt, const LogFn& log = {});
/// Op-level finite-difference suite; "passed" is false on any failure.
nlohmann::json run_gradcheck(const RunOptions& opt, const LogFn& log = {});

}  // namespace miniseg
