// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Talks to the library only through miniseg.h.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include "miniseg/miniseg.h"

using nlohmann::json;

namespace {

struct Args {
  std::string data, out, ckpt, ablate;
  std::uint64_t seed = 1;
  int size = 512, fold = -1, folds = 5, workers = 1, epochs = 80, batch_size = 5, crop = 256, latency_runs = 3;
  double lr = 1e-3, weight_decay = 1e-4;
  bool overlays = false, no_flip = false, inverse_frequency = false, as_json = false, quiet = false;
};

using Entry = ms_status (*)(const char*, char**);

void log_line(const char* line, void* user) {
  if (*static_cast<bool*>(user)) return;
  std::cerr << line << '\n';
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string scores_line(const json& mean) {
  const json& s = mean;
  return "mIoU " + fmt(s["mIoU"].get<double>()) + "  SEN " + fmt(s["SEN"].get<double>()) + "  SPC " +
         fmt(s["SPC"].get<double>()) + "  DSC " + fmt(s["DSC"].get<double>()) + "  HD " +
         fmt(mean["HD"].get<double>(), 2);
}

void print_human(const std::string& command, const json& r) {
  if (command == "train") {
    std::cout << "parameters: " << r["params_total"] << "  ablations: " << r["ablations"].get<std::string>() << '\n';
    for (const json& f : r["folds"])
      std::cout << "fold " << f["fold"] << ": " << scores_line(f["val"]) << "  -> "
                << f["checkpoint"].get<std::string>() << '\n';
    std::cout << "metrics: " << r["metrics_csv"].get<std::string>() << '\n';
  } else if (command == "eval") {
    std::cout << r["slices"] << " slices: " << scores_line(r["mean"]) << '\n';
    std::cout << "metrics: " << r["metrics_csv"].get<std::string>() << '\n';
  } else if (command == "infer") {
    for (const json& e : r["images"])
      std::cout << e["id"].get<std::string>() << " " << e["height"] << "x" << e["width"]
                << "  foreground " << fmt(100.0 * e["foreground_fraction"].get<double>(), 2) << "%\n";
    std::cout << "written to " << r["out"].get<std::string>() << '\n';
  } else if (command == "summary") {
    std::cout << "parameters: " << r["params_total"] << (r["params_in_band"].get<bool>() ? "" : "  (outside band)")
              << '\n';
    for (const auto& [name, count] : r["params_by_module"].items())
      std::cout << "  " << std::left << std::setw(10) << name << count << '\n';
    const int size = r["size"].get<int>();
    std::cout << "FLOPs at " << size << "x" << size << ": " << fmt(r["flops"].get<double>() / 1e9) << " G ("
              << r["flop_convention"].get<std::string>() << ")\n";
    std::cout << "conv MACs: " << fmt(r["conv_macs"].get<double>() / 1e9) << " G\n";
    std::cout << "FLOPs at 512x512: " << fmt(r["flops_512"].get<double>() / 1e9) << " G"
              << (r["flops_in_band"].get<bool>() ? "" : "  (outside band)") << '\n';
    std::cout << "latency: " << fmt(r["latency_ms"].get<double>(), 1) << " ms (median, single thread)\n";
  } else if (command == "gradcheck") {
    for (const json& op : r["ops"])
      std::cout << (op["passed"].get<bool>() ? "ok   " : "FAIL ") << std::left << std::setw(22)
                << op["op"].get<std::string>() << " max rel err " << std::scientific << std::setprecision(2)
                << op["max_rel_error"].get<double>() << std::defaultfloat << '\n';
    std::cout << (r["passed"].get<bool>() ? "all gradients within tolerance" : "gradient check failed") << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  Args a;
  CLI::App app{"MiniSeg: lightweight lesion segmentation for CT slices", "miniseg"};
  app.set_config("--config", "", "read options from a key=value file");
  app.allow_config_extras(false);
  app.require_subcommand(1);

  auto* o_data = app.add_option("--data", a.data, "dataset root with images/ and masks/ (or a PNG for infer)");
  auto* o_out = app.add_option("--out", a.out, "output directory");
  auto* o_ckpt = app.add_option("--ckpt", a.ckpt, "checkpoint file");
  auto* o_seed = app.add_option("--seed", a.seed, "random seed");
  auto* o_size = app.add_option("--size", a.size, "summary input extent (multiple of 16)");
  auto* o_fold = app.add_option("--fold", a.fold, "run or evaluate a single fold");
  auto* o_folds = app.add_option("--folds", a.folds, "number of folds");
  auto* o_ablate = app.add_option("--ablate", a.ablate, "comma separated ablations");
  auto* o_overlays = app.add_flag("--overlays", a.overlays, "write overlay PNGs during eval");
  auto* o_workers = app.add_option("--workers", a.workers, "data loading threads");
  auto* o_epochs = app.add_option("--epochs", a.epochs, "training epochs");
  auto* o_batch = app.add_option("--batch-size", a.batch_size, "mini-batch size");
  auto* o_lr = app.add_option("--lr", a.lr, "initial learning rate");
  auto* o_wd = app.add_option("--weight-decay", a.weight_decay, "weight decay");
  auto* o_crop = app.add_option("--crop", a.crop, "training crop size (0 disables cropping)");
  auto* o_noflip = app.add_flag("--no-flip", a.no_flip, "disable horizontal flips");
  auto* o_invfreq = app.add_flag("--inverse-frequency", a.inverse_frequency, "inverse-frequency class weights");
  auto* o_latency = app.add_option("--latency-runs", a.latency_runs, "timed forward passes for summary");
  app.add_flag("--json", a.as_json, "print the report as JSON");
  app.add_flag("-q,--quiet", a.quiet, "suppress progress lines");

  struct Command {
    const char* name;
    const char* help;
    Entry entry;
  };
  const Command commands[] = {
      {"train", "train with k-fold cross validation", ms_train},
      {"eval", "evaluate a checkpoint on a dataset", ms_eval},
      {"infer", "predict masks for PNG images", ms_infer},
      {"summary", "parameters, FLOPs and latency", ms_summary},
      {"gradcheck", "finite-difference gradient checks", ms_gradcheck},
  };
  for (const Command& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : MS_ERR_USAGE;
  }

  json opts = json::object();
  auto put = [&opts](CLI::Option* o, const char* key, auto value) {
    if (o->count() > 0) opts[key] = value;
  };
  put(o_data, "data", a.data);
  put(o_out, "out", a.out);
  put(o_ckpt, "ckpt", a.ckpt);
  put(o_seed, "seed", a.seed);
  put(o_size, "size", a.size);
  put(o_fold, "fold", a.fold);
  put(o_folds, "folds", a.folds);
  put(o_ablate, "ablate", a.ablate);
  put(o_overlays, "overlays", a.overlays);
  put(o_workers, "workers", a.workers);
  put(o_epochs, "epochs", a.epochs);
  put(o_batch, "batch_size", a.batch_size);
  put(o_lr, "lr", a.lr);
  put(o_wd, "weight_decay", a.weight_decay);
  put(o_crop, "crop", a.crop);
  put(o_noflip, "flip", !a.no_flip);
  put(o_invfreq, "inverse_frequency", a.inverse_frequency);
  put(o_latency, "latency_runs", a.latency_runs);

  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  Entry entry = nullptr;
  for (const Command& c : commands)
    if (command == c.name) entry = c.entry;

  ms_set_log_callback(log_line, &a.quiet);
  char* raw = nullptr;
  const ms_status status = entry(opts.dump().c_str(), &raw);
  std::unique_ptr<char, void (*)(char*)> owned(raw, ms_string_free);
  if (status != MS_OK) std::cerr << "miniseg " << command << ": " << ms_last_error() << '\n';
  if (raw == nullptr) return status;

  json report;
  try {
    report = json::parse(raw);
  } catch (const json::exception& e) {
    std::cerr << "miniseg: malformed report: " << e.what() << '\n';
    return MS_ERR_DATA;
  }
  if (a.as_json) {
    if (command == "summary") {
      report = {{"params_total", report["params_total"]},
                {"params_by_module", report["params_by_module"]},
                {"flops", report["flops"]},
                {"latency_ms", report["latency_ms"]}};
    }
    std::cout << report.dump(2) << '\n';
  } else {
    print_human(command, report);
  }
  return status;
}
