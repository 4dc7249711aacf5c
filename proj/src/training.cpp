// SPDX-License-Identifier: Apache-2.0
#include "miniseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "miniseg/error.hpp"
#include "miniseg/metrics.hpp"

namespace miniseg {

void TrainConfig::validate() const {
  if (!(initial_lr > 0)) throw UsageError("learning rate must be positive");
  if (weight_decay < 0) throw UsageError("weight decay must be non-negative");
  if (epochs < 0) throw UsageError("epochs must be non-negative");
  if (batch_size <= 0) throw UsageError("batch size must be positive");
  if (!(poly_power > 0)) throw UsageError("poly power must be positive");
  if (crop < 0 || crop % 16 != 0) throw UsageError("crop size must be a non-negative multiple of 16");
  for (float w : head_weights)
    if (w < 0) throw UsageError("head weights must be non-negative");
}

Tensor deep_supervision_loss(std::span<const Tensor> logits, std::span<const std::uint8_t> labels,
                             std::span<const float> head_weights, std::span<const float> class_weights) {
  if (logits.empty()) throw UsageError("no prediction heads");
  if (head_weights.size() < logits.size())
    throw UsageError("need a weight for each of the " + std::to_string(logits.size()) + " heads");
  for (std::uint8_t l : labels)
    if (l > 1) throw DataError("mask label " + std::to_string(l) + " is outside {0,1}");
  Tensor total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor term = scale(softmax_cross_entropy(logits[i], labels, class_weights), head_weights[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

double poly_lr(long iter, long max_iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > max_iter) throw UsageError("iteration outside [0, max_iter]");
  if (max_iter == 0) return cfg.initial_lr;
  return cfg.initial_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), cfg.poly_power);
}

void adam_step(ModelWeights& weights, AdamState& state, double lr, double weight_decay) {
  const auto params = weights.learnable();
  if (state.m.empty()) {
    for (const WeightEntry* e : params) {
      state.m.emplace_back(e->tensor.numel(), 0.0f);
      state.v.emplace_back(e->tensor.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("optimizer state does not match the model");
  for (const WeightEntry* e : params) {
    if (!e->tensor.has_grad()) continue;
    for (float g : e->tensor.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + e->name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p]->tensor;
    auto w = t.data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    const bool decay = is_decayed(params[p]->role) && weight_decay > 0;
    const bool has_grad = t.has_grad();
    const std::span<float> g = has_grad ? t.grad() : std::span<float>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = static_cast<float>(state.beta1 * m[i] + (1.0 - state.beta1) * gi);
      v[i] = static_cast<float>(state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi);
      double wi = w[i];
      if (decay) wi -= lr * weight_decay * wi;
      wi -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
      w[i] = static_cast<float>(wi);
    }
  }
}

// ---------------------------------------------------------------------------

Sample hflip(const Sample& s) {
  Sample out = s;
  for (int y = 0; y < s.image.height; ++y)
    for (int x = 0; x < s.image.width; ++x) {
      out.image.at(y, x) = s.image.at(y, s.image.width - 1 - x);
      out.mask.at(y, x) = s.mask.at(y, s.mask.width - 1 - x);
    }
  return out;
}

Sample augment(const Sample& s, std::mt19937_64& rng, const TrainConfig& cfg) {
  if (s.image.height != s.mask.height || s.image.width != s.mask.width)
    throw ShapeError("sample " + s.id + ": image and mask extents differ");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double oy = unit(rng), ox = unit(rng), coin = unit(rng);
  Sample out;
  if (cfg.crop > 0) {
    if (cfg.crop > s.image.height || cfg.crop > s.image.width)
      throw UsageError("crop " + std::to_string(cfg.crop) + " exceeds sample " + s.id + " (" +
                       std::to_string(s.image.height) + "x" + std::to_string(s.image.width) + ")");
    const int top = static_cast<int>(oy * (s.image.height - cfg.crop + 1));
    const int left = static_cast<int>(ox * (s.image.width - cfg.crop + 1));
    out.id = s.id;
    out.image = GrayImage(cfg.crop, cfg.crop);
    out.mask = Mask(cfg.crop, cfg.crop);
    for (int y = 0; y < cfg.crop; ++y)
      for (int x = 0; x < cfg.crop; ++x) {
        out.image.at(y, x) = s.image.at(top + y, left + x);
        out.mask.at(y, x) = s.mask.at(top + y, left + x);
      }
  } else {
    out = s;
  }
  if (cfg.flip && coin < 0.5) out = hflip(out);
  return out;
}

std::vector<Fold> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  if (k < 2) throw UsageError("k-fold split needs k >= 2");
  if (ids.size() < static_cast<std::size_t>(k))
    throw UsageError(std::to_string(ids.size()) + " samples cannot be split into " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t base = ids.size() / k, extra = ids.size() % k;
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    std::vector<bool> in_val(ids.size(), false);
    for (std::size_t i = pos; i < pos + len; ++i) in_val[order[i]] = true;
    for (std::size_t i = pos; i < pos + len; ++i) folds[f].val.push_back(ids[order[i]]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!in_val[i]) folds[f].train.push_back(ids[i]);
    pos += len;
  }
  return folds;
}

std::vector<Fold> folds_from_assignment(const std::vector<std::string>& ids,
                                        const std::map<std::string, int>& assignment) {
  int k = 0;
  for (const auto& id : ids) {
    auto it = assignment.find(id);
    if (it == assignment.end()) throw DataError("no fold assigned to " + id);
    if (it->second < 0) throw DataError("negative fold for " + id);
    k = std::max(k, it->second + 1);
  }
  std::vector<Fold> folds(k);
  for (const auto& id : ids) {
    const int f = assignment.at(id);
    for (int j = 0; j < k; ++j) (j == f ? folds[j].val : folds[j].train).push_back(id);
  }
  return folds;
}

// ---------------------------------------------------------------------------

Mask predict_mask(const MiniSeg& model, const GrayImage& image) {
  const Prepared p = preprocess(image);
  return unpad(binarize_prediction(model.infer(p.input)), p.padding);
}

std::pair<double, double> evaluate_scores(const MiniSeg& model, const std::vector<Sample>& samples) {
  if (samples.empty()) return {std::nan(""), std::nan("")};
  double dsc = 0, miou = 0;
  for (const Sample& s : samples) {
    const Scores sc = compute_metrics(confusion(predict_mask(model, s.image), s.mask));
    dsc += sc.dsc;
    miou += sc.miou;
  }
  return {dsc / samples.size(), miou / samples.size()};
}

namespace {

std::vector<std::vector<float>> snapshot(const ModelWeights& w) {
  std::vector<std::vector<float>> out;
  for (const WeightEntry& e : w.entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void restore(ModelWeights& w, const std::vector<std::vector<float>>& saved) {
  for (std::size_t i = 0; i < saved.size(); ++i) {
    Tensor t = w.entries()[i].tensor;
    std::copy(saved[i].begin(), saved[i].end(), t.data().begin());
  }
}

std::vector<float> inverse_frequency(std::span<const std::uint8_t> labels) {
  double fg = 0;
  for (std::uint8_t l : labels) fg += l;
  const double n = static_cast<double>(labels.size());
  const double bg = n - fg;
  return {bg > 0 ? static_cast<float>(n / (2 * bg)) : 1.0f, fg > 0 ? static_cast<float>(n / (2 * fg)) : 1.0f};
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

}  // namespace

std::vector<EpochLog> fit(MiniSeg& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                          const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  std::vector<EpochLog> log;
  if (cfg.epochs == 0) return log;
  if (train.empty()) throw DataError("training fold is empty");

  std::ofstream csv;
  if (!options.log_path.empty()) {
    const bool fresh = !std::filesystem::exists(options.log_path) || std::filesystem::file_size(options.log_path) == 0;
    csv.open(options.log_path, std::ios::app);
    if (!csv) throw DataError("cannot write training log " + options.log_path.string());
    if (fresh) csv << "epoch,mean_train_loss,lr,val_DSC,val_mIoU\n";
  }

  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  ModelWeights& weights = model.weights();
  const long steps_per_epoch = static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long max_iter = steps_per_epoch * cfg.epochs;
  long iter = 0;
  std::vector<std::size_t> order(train.size());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    double lr = cfg.initial_lr;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<GrayImage> images;
      std::vector<std::uint8_t> labels;
      for (std::size_t b = start; b < end; ++b) {
        const Sample s = augment(train[order[b]], rng, cfg);
        const Padding p = padding_for(s.image.height, s.image.width);
        images.push_back(pad_image(s.image, p));
        const Mask m = pad_mask(s.mask, p);
        labels.insert(labels.end(), m.bits.begin(), m.bits.end());
      }
      const Tensor batch = make_batch(images);
      const std::vector<float> class_weights =
          cfg.inverse_frequency ? inverse_frequency(labels) : std::vector<float>{};

      lr = poly_lr(iter, max_iter, cfg);
      const auto saved = snapshot(weights);
      weights.zero_grad();
      double loss_value = 0;
      {
        Tape tape;
        Tape::Scope scope(tape);
        const std::vector<Tensor> heads = model.forward(batch, Mode::Train);
        const Tensor loss = deep_supervision_loss(heads, labels, cfg.head_weights, class_weights);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          restore(weights, saved);
          throw NumericError("training loss became " + std::to_string(loss_value) + " at epoch " +
                             std::to_string(epoch) + ", iteration " + std::to_string(iter) +
                             "; weights restored to the last finite step");
        }
        tape.backward(loss);
      }
      try {
        adam_step(weights, adam, lr, cfg.weight_decay);
      } catch (const NumericError&) {
        restore(weights, saved);
        throw;
      }
      loss_sum += loss_value * static_cast<double>(end - start);
      ++iter;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_train_loss = loss_sum / static_cast<double>(train.size());
    entry.lr = lr;
    std::tie(entry.val_dsc, entry.val_miou) = evaluate_scores(model, val);
    log.push_back(entry);
    if (csv.is_open()) {
      csv << entry.epoch << ',' << csv_number(entry.mean_train_loss) << ',' << csv_number(entry.lr) << ','
          << csv_number(entry.val_dsc) << ',' << csv_number(entry.val_miou) << '\n';
      csv.flush();
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  return log;
}

}  // namespace miniseg
