// SPDX-License-Identifier: Apache-2.0
#include "miniseg/miniseg.h"

#include <cstring>
#include <mutex>
#include <new>
#include <string>

#include "miniseg/checkpoint.hpp"
#include "miniseg/data.hpp"
#include "miniseg/error.hpp"
#include "miniseg/workflow.hpp"

struct ms_model {
  miniseg::MiniSeg net;
};

namespace {

thread_local std::string last_error;

std::mutex log_mutex;
ms_log_fn log_fn = nullptr;
void* log_user = nullptr;

ms_status status_of(miniseg::ErrorKind kind) {
  switch (kind) {
    case miniseg::ErrorKind::Usage: return MS_ERR_USAGE;
    case miniseg::ErrorKind::Numeric: return MS_ERR_NUMERIC;
    case miniseg::ErrorKind::Shape:
    case miniseg::ErrorKind::Data:
    case miniseg::ErrorKind::Checkpoint: return MS_ERR_DATA;
  }
  return MS_ERR_DATA;
}

template <typename F>
ms_status guarded(F&& body) {
  try {
    last_error.clear();
    return body();
  } catch (const miniseg::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const nlohmann::json::exception& e) {
    last_error = std::string("invalid options: ") + e.what();
    return MS_ERR_USAGE;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return MS_ERR_DATA;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return MS_ERR_DATA;
  } catch (const std::exception& e) {
    last_error = e.what();
    return MS_ERR_DATA;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void forward_log(const std::string& line) {
  std::lock_guard<std::mutex> lock(log_mutex);
  if (log_fn != nullptr) log_fn(line.c_str(), log_user);
}

ms_status need(const void* p, const char* what) {
  if (p != nullptr) return MS_OK;
  last_error = std::string(what) + " must not be NULL";
  return MS_ERR_USAGE;
}

using Workflow = nlohmann::json (*)(const miniseg::RunOptions&, const miniseg::LogFn&);

ms_status run(Workflow wf, const char* options_json, char** report_json) {
  if (ms_status s = need(report_json, "report_json"); s != MS_OK) return s;
  *report_json = nullptr;
  return guarded([&] {
    const auto options = nlohmann::json::parse(options_json != nullptr ? options_json : "{}");
    const nlohmann::json report = wf(miniseg::RunOptions::from_json(options), forward_log);
    *report_json = dup_string(report.dump(2));
    if (report.contains("passed") && !report["passed"].get<bool>()) {
      last_error = "gradient check failed";
      return MS_ERR_NUMERIC;
    }
    return MS_OK;
  });
}

}  // namespace

extern "C" {

const char* ms_version(void) { return "1.0.0"; }

const char* ms_last_error(void) { return last_error.c_str(); }

void ms_set_log_callback(ms_log_fn fn, void* user) {
  std::lock_guard<std::mutex> lock(log_mutex);
  log_fn = fn;
  log_user = user;
}

ms_status ms_model_create(const char* ablations, uint64_t seed, ms_model** out) {
  if (ms_status s = need(out, "out"); s != MS_OK) return s;
  return guarded([&] {
    miniseg::MiniSegConfig c;
    c.ablations = miniseg::parse_ablations(ablations != nullptr ? ablations : "");
    *out = new ms_model{miniseg::MiniSeg::build(c, seed)};
    return MS_OK;
  });
}

ms_status ms_model_load(const char* path, ms_model** out) {
  if (ms_status s = need(out, "out"); s != MS_OK) return s;
  if (ms_status s = need(path, "path"); s != MS_OK) return s;
  return guarded([&] {
    *out = new ms_model{miniseg::load_checkpoint(path)};
    return MS_OK;
  });
}

ms_status ms_model_save(const ms_model* model, const char* path) {
  if (ms_status s = need(model, "model"); s != MS_OK) return s;
  if (ms_status s = need(path, "path"); s != MS_OK) return s;
  return guarded([&] {
    miniseg::save_checkpoint(model->net, path);
    return MS_OK;
  });
}

void ms_model_destroy(ms_model* model) { delete model; }

ms_status ms_model_param_count(const ms_model* model, uint64_t* out) {
  if (ms_status s = need(model, "model"); s != MS_OK) return s;
  if (ms_status s = need(out, "out"); s != MS_OK) return s;
  return guarded([&] {
    *out = model->net.count_parameters().total;
    return MS_OK;
  });
}

ms_status ms_model_flops(const ms_model* model, int height, int width, uint64_t* flops, uint64_t* conv_macs) {
  if (ms_status s = need(model, "model"); s != MS_OK) return s;
  return guarded([&] {
    const miniseg::FlopReport r = model->net.count_flops(height, width);
    if (flops != nullptr) *flops = r.flops;
    if (conv_macs != nullptr) *conv_macs = r.conv_macs;
    return MS_OK;
  });
}

ms_status ms_model_predict(const ms_model* model, const float* gray, int height, int width, float* probs) {
  if (ms_status s = need(model, "model"); s != MS_OK) return s;
  if (ms_status s = need(gray, "gray"); s != MS_OK) return s;
  if (ms_status s = need(probs, "probs"); s != MS_OK) return s;
  return guarded([&] {
    miniseg::GrayImage image(height, width);
    std::memcpy(image.pixels.data(), gray, image.pixels.size() * sizeof(float));
    const miniseg::Prepared p = miniseg::preprocess(image);
    const miniseg::Tensor out = model->net.infer(p.input);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) probs[static_cast<std::size_t>(y) * width + x] = out.at(0, 1, y, x);
    return MS_OK;
  });
}

ms_status ms_train(const char* o, char** r) { return run(miniseg::run_train, o, r); }
ms_status ms_eval(const char* o, char** r) { return run(miniseg::run_eval, o, r); }
ms_status ms_infer(const char* o, char** r) { return run(miniseg::run_infer, o, r); }
ms_status ms_summary(const char* o, char** r) { return run(miniseg::run_summary, o, r); }
ms_status ms_gradcheck(const char* o, char** r) { return run(miniseg::run_gradcheck, o, r); }

void ms_string_free(char* s) { delete[] s; }

}  // extern "C"
