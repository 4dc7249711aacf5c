// SPDX-License-Identifier: Apache-2.0
#include "miniseg/workflow.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "miniseg/checkpoint.hpp"
#include "miniseg/error.hpp"
#include "miniseg/gradcheck.hpp"
#include "miniseg/metrics.hpp"

namespace miniseg {

using nlohmann::json;

namespace {

constexpr double kParamTarget = 82910;
constexpr double kParamLow = 75000, kParamHigh = 91000;
constexpr double kFlopTarget = 0.50e9;
constexpr double kFlopLow = 0.35e9, kFlopHigh = 0.65e9;

template <typename T>
void take(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("option '") + key + "' has the wrong type");
  }
}

void say(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

json scores_json(const Scores& s) {
  return {{"mIoU", s.miou}, {"SEN", s.sen}, {"SPC", s.spc}, {"DSC", s.dsc}};
}

json average_json(const ReportAverage& a) {
  json j = scores_json(a.scores);
  j["HD"] = a.hd;
  j["infected_area"] = a.infected_area;
  j["lesion_count"] = a.lesion_count;
  j["slices"] = a.slices;
  return j;
}

std::vector<Fold> make_folds(const DatasetIndex& index, const RunOptions& opt) {
  if (!index.folds.empty()) return folds_from_assignment(index.ids, index.folds);
  return kfold_split(index.ids, opt.folds, opt.seed);
}

std::vector<int> selected_folds(const RunOptions& opt, std::size_t count) {
  if (opt.fold >= static_cast<int>(count))
    throw UsageError("fold " + std::to_string(opt.fold) + " requested but only " + std::to_string(count) +
                     " folds exist");
  if (opt.fold >= 0) return {opt.fold};
  std::vector<int> all(count);
  for (std::size_t i = 0; i < count; ++i) all[i] = static_cast<int>(i);
  return all;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

MiniSegConfig config_for(const RunOptions& opt) {
  MiniSegConfig c;
  c.ablations = opt.ablations;
  return c;
}

}  // namespace

RunOptions RunOptions::from_json(const json& j) {
  if (!j.is_object()) throw UsageError("options must be a JSON object");
  static const char* const known[] = {"data", "out", "ckpt", "seed", "size", "fold", "folds", "ablate",
                                      "overlays", "workers", "latency_runs", "epochs", "batch_size", "lr",
                                      "weight_decay", "crop", "flip", "poly_power", "inverse_frequency",
                                      "head_weights"};
  for (const auto& [key, value] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw UsageError("unknown option '" + key + "'");
  RunOptions o;
  auto path = [&j](const char* key, std::filesystem::path& into) {
    std::string s;
    if (!j.contains(key)) return;
    take(j, key, s);
    into = s;
  };
  path("data", o.data);
  path("out", o.out);
  path("ckpt", o.ckpt);
  std::string ablate;
  take(j, "ablate", ablate);
  o.ablations = parse_ablations(ablate);
  take(j, "seed", o.seed);
  take(j, "size", o.size);
  take(j, "fold", o.fold);
  take(j, "folds", o.folds);
  take(j, "overlays", o.overlays);
  take(j, "workers", o.workers);
  take(j, "latency_runs", o.latency_runs);
  take(j, "epochs", o.train.epochs);
  take(j, "batch_size", o.train.batch_size);
  take(j, "lr", o.train.initial_lr);
  take(j, "weight_decay", o.train.weight_decay);
  take(j, "crop", o.train.crop);
  take(j, "flip", o.train.flip);
  take(j, "poly_power", o.train.poly_power);
  take(j, "inverse_frequency", o.train.inverse_frequency);
  take(j, "head_weights", o.train.head_weights);
  o.train.seed = o.seed;
  if (o.workers < 1) throw UsageError("workers must be at least 1");
  if (o.folds < 2) throw UsageError("folds must be at least 2");
  o.train.validate();
  return o;
}

json run_train(const RunOptions& opt, const LogFn& log) {
  if (opt.data.empty()) throw UsageError("train needs a dataset directory (--data)");
  const DatasetIndex index = load_dataset(opt.data);
  const std::vector<Fold> folds = make_folds(index, opt);
  const std::vector<int> chosen = selected_folds(opt, folds.size());
  std::filesystem::create_directories(opt.out);

  const MiniSegConfig config = config_for(opt);
  const std::size_t params = MiniSeg::build(config, opt.seed).count_parameters().total;
  say(log, "MiniSeg [" + format_ablations(config.ablations) + "]: " + std::to_string(params) +
               " parameters; " + std::to_string(index.ids.size()) + " slices, " + std::to_string(folds.size()) +
               " folds");

  json report = {{"params_total", params}, {"ablations", format_ablations(config.ablations)}, {"folds", json::array()}};
  std::vector<MetricsRow> rows;
  for (int f : chosen) {
    const Fold& fold = folds[f];
    const auto train = load_samples(index, fold.train, opt.workers);
    const auto val = load_samples(index, fold.val, opt.workers);
    MiniSeg model = MiniSeg::build(config, opt.seed);
    const auto log_path = opt.out / ("fold" + std::to_string(f) + "_log.csv");
    std::filesystem::remove(log_path);
    FitOptions fo;
    fo.log_path = log_path;
    fo.on_epoch = [&](const EpochLog& e) {
      say(log, "fold " + std::to_string(f) + " epoch " + std::to_string(e.epoch) + "/" +
                   std::to_string(opt.train.epochs) + "  loss " + fmt("%.4f", e.mean_train_loss) + "  lr " +
                   fmt("%.3g", e.lr) + "  val DSC " + fmt("%.4f", e.val_dsc));
    };
    say(log, "fold " + std::to_string(f) + ": " + std::to_string(train.size()) + " train / " +
                 std::to_string(val.size()) + " val");
    const auto history = fit(model, train, val, opt.train, fo);
    const auto ckpt = opt.out / ("fold" + std::to_string(f) + ".msg");
    save_checkpoint(model, ckpt);
    std::vector<SliceReport> reports;
    for (const Sample& s : val) {
      reports.push_back(slice_analysis(predict_mask(model, s.image), s.mask));
      rows.push_back({s.id, f, reports.back()});
    }
    json fj = {{"fold", f},
               {"checkpoint", ckpt.string()},
               {"log", log_path.string()},
               {"train_slices", train.size()},
               {"val_slices", val.size()},
               {"epochs", history.size()},
               {"val", average_json(average(reports))}};
    if (!history.empty()) fj["final_train_loss"] = history.back().mean_train_loss;
    report["folds"].push_back(fj);
  }
  const auto csv = opt.out / "metrics.csv";
  write_metrics_csv(csv, rows);
  report["metrics_csv"] = csv.string();
  return report;
}

json run_eval(const RunOptions& opt, const LogFn& log) {
  if (opt.ckpt.empty()) throw UsageError("eval needs a checkpoint (--ckpt)");
  if (opt.data.empty()) throw UsageError("eval needs a dataset directory (--data)");
  const DatasetIndex index = load_dataset(opt.data);
  MiniSeg model = load_checkpoint(opt.ckpt);
  if (opt.ablations != 0 && opt.ablations != model.config().ablations) {
    // Surface the structural diagnostic for a config/checkpoint mismatch.
    MiniSeg expected = MiniSeg::build(config_for(opt), opt.seed);
    expected.load_weights(Checkpoint::read(opt.ckpt));
  }
  std::vector<std::string> ids = index.ids;
  int fold_id = 0;
  if (opt.fold >= 0) {
    const auto folds = make_folds(index, opt);
    selected_folds(opt, folds.size());
    ids = folds[opt.fold].val;
    fold_id = opt.fold;
  }
  std::filesystem::create_directories(opt.out);
  const auto samples = load_samples(index, ids, opt.workers);
  std::vector<MetricsRow> rows;
  std::vector<SliceReport> reports;
  for (const Sample& s : samples) {
    const Mask pred = predict_mask(model, s.image);
    reports.push_back(slice_analysis(pred, s.mask));
    rows.push_back({s.id, fold_id, reports.back()});
    if (opt.overlays) write_overlay(s.image, pred, s.mask, opt.out / (s.id + "_overlay.png"));
    say(log, s.id + "  DSC " + fmt("%.4f", reports.back().scores.dsc) + "  HD " + fmt("%.2f", reports.back().hd));
  }
  const auto csv = opt.out / "metrics.csv";
  write_metrics_csv(csv, rows);
  return {{"slices", samples.size()}, {"mean", average_json(average(reports))}, {"metrics_csv", csv.string()},
          {"overlays", opt.overlays}};
}

json run_infer(const RunOptions& opt, const LogFn& log) {
  if (opt.ckpt.empty()) throw UsageError("infer needs a checkpoint (--ckpt)");
  if (opt.data.empty()) throw UsageError("infer needs an image or directory (--data)");
  const MiniSeg model = load_checkpoint(opt.ckpt);
  std::vector<std::pair<std::string, std::filesystem::path>> inputs;
  std::filesystem::path mask_dir;
  if (std::filesystem::is_directory(opt.data)) {
    std::filesystem::path dir = opt.data;
    if (std::filesystem::is_directory(dir / "images")) {
      mask_dir = dir / "masks";
      dir /= "images";
    }
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") inputs.emplace_back(e.path().stem().string(), e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (std::filesystem::is_regular_file(opt.data)) {
    inputs.emplace_back(opt.data.stem().string(), opt.data);
  }
  if (inputs.empty()) throw DataError("no PNG images found at " + opt.data.string());
  std::filesystem::create_directories(opt.out);
  json images = json::array();
  for (const auto& [id, path] : inputs) {
    const GrayImage image = load_image(path);
    const Mask pred = predict_mask(model, image);
    save_mask(pred, opt.out / (id + "_mask.png"));
    std::size_t fg = 0;
    for (auto b : pred.bits) fg += b;
    json entry = {{"id", id}, {"height", image.height}, {"width", image.width},
                  {"foreground_fraction", static_cast<double>(fg) / static_cast<double>(pred.size())}};
    const auto gt_path = mask_dir / (id + ".png");
    if (!mask_dir.empty() && std::filesystem::exists(gt_path)) {
      const Mask gt = load_mask(gt_path);
      entry["DSC"] = compute_metrics(confusion(pred, gt)).dsc;
      write_overlay(image, pred, gt, opt.out / (id + "_overlay.png"));
    } else {
      write_overlay(image, pred, pred, opt.out / (id + "_overlay.png"));
    }
    say(log, id + "  foreground " + fmt("%.4f", entry["foreground_fraction"].get<double>()));
    images.push_back(entry);
  }
  return {{"images", images}, {"out", opt.out.string()}};
}

json run_summary(const RunOptions& opt, const LogFn& log) {
  if (opt.size <= 0 || opt.size % 16 != 0)
    throw UsageError("--size " + std::to_string(opt.size) + " is not a positive multiple of 16");
  const MiniSeg model = opt.ckpt.empty() ? MiniSeg::build(config_for(opt), opt.seed) : load_checkpoint(opt.ckpt);
  const ParameterReport params = model.count_parameters();
  const FlopReport flops = model.count_flops(opt.size, opt.size);
  const FlopReport flops512 = opt.size == 512 ? flops : model.count_flops(512, 512);

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Tensor input({1, 3, opt.size, opt.size});
  for (float& v : input.data()) v = unit(rng);
  std::vector<double> times;
  model.infer(input);  // warm-up
  for (int i = 0; i < std::max(1, opt.latency_runs); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.infer(input);
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  const double latency = times[times.size() / 2];

  json by_module = json::object();
  for (const auto& [name, n] : params.by_module) by_module[name] = n;
  const bool params_ok = params.total >= kParamLow && params.total <= kParamHigh;
  const bool flops_ok = flops512.flops >= kFlopLow && flops512.flops <= kFlopHigh;
  say(log, "ablations " + format_ablations(model.config().ablations));
  return {{"params_total", params.total},
          {"params_by_module", by_module},
          {"flops", flops.flops},
          {"latency_ms", latency},
          {"size", opt.size},
          {"conv_macs", flops.conv_macs},
          {"elementwise_ops", flops.elementwise_ops},
          {"flop_convention", FlopReport::kConvention},
          {"params_target", kParamTarget},
          {"params_band", {kParamLow, kParamHigh}},
          {"params_in_band", params_ok},
          {"flops_512", flops512.flops},
          {"flops_target", kFlopTarget},
          {"flops_band", {kFlopLow, kFlopHigh}},
          {"flops_in_band", flops_ok}};
}

json run_gradcheck(const RunOptions& opt, const LogFn& log) {
  GradCheckOptions g;
  g.seed = opt.seed;
  const auto results = run_gradcheck(g);
  json ops = json::array();
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    ops.push_back({{"op", r.op}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked}, {"passed", r.passed}});
    say(log, r.op + "  max rel error " + fmt("%.3e", r.max_rel_error) + (r.passed ? "  ok" : "  FAIL"));
  }
  return {{"ops", ops}, {"passed", all}, {"tolerance", g.tolerance}, {"perturbation", g.perturbation}};
}

}  // namespace miniseg
