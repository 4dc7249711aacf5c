// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "miniseg/data.hpp"
#include "miniseg/model.hpp"

namespace miniseg {

struct TrainConfig {
  double initial_lr = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 80;
  int batch_size = 5;
  double poly_power = 0.9;
  std::uint64_t seed = 1;
  int crop = 256;     // square crop side, multiple of 16; 0 trains on whole (padded) slices
  bool flip = true;   // horizontal flip with probability 0.5
  std::array<float, 4> head_weights{1.0f, 1.0f, 1.0f, 1.0f};
  bool inverse_frequency = false;  // class-weighted cross-entropy per batch

  void validate() const;
};

/// sum_i w_i * CE(P_i, labels). Labels are N*H*W values in {0,1}; each head
/// must already be at label resolution.
Tensor deep_supervision_loss(std::span<const Tensor> logits, std::span<const std::uint8_t> labels,
                             std::span<const float> head_weights,
                             std::span<const float> class_weights = {});

/// initial_lr * (1 - iter/max_iter)^power.
double poly_lr(long iter, long max_iter, const TrainConfig& cfg);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// One Adam step with bias correction over the learnable arrays, using the
/// gradients stored on them. Decay is decoupled, w -= lr * weight_decay * w,
/// and applies to kernels and biases only. A non-finite gradient throws
/// NumericError before anything is modified.
void adam_step(ModelWeights& weights, AdamState& state, double lr, double weight_decay);

/// Random crop (cfg.crop) and horizontal flip applied identically to image
/// and mask. Draws the same number of variates whatever the outcome.
Sample augment(const Sample& sample, std::mt19937_64& rng, const TrainConfig& cfg);
Sample hflip(const Sample& sample);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Seeded shuffle, then k contiguous validation blocks whose sizes differ by
/// at most one (the first n % k blocks are larger).
std::vector<Fold> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed);
/// Folds taken from an explicit id -> fold assignment.
std::vector<Fold> folds_from_assignment(const std::vector<std::string>& ids,
                                        const std::map<std::string, int>& assignment);

struct EpochLog {
  int epoch = 0;
  double mean_train_loss = 0;
  double lr = 0;
  double val_dsc = 0;   // NaN without a validation set
  double val_miou = 0;
};

/// Mean DSC and mIoU of the model's predictions over the samples.
std::pair<double, double> evaluate_scores(const MiniSeg& model, const std::vector<Sample>& samples);

Mask predict_mask(const MiniSeg& model, const GrayImage& image);

struct FitOptions {
  std::filesystem::path log_path;  // appended per epoch when set
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains in place. A non-finite loss restores the weights from before the
/// failing step and throws NumericError.
std::vector<EpochLog> fit(MiniSeg& model, const std::vector<Sample>& train,
                          const std::vector<Sample>& val, const TrainConfig& cfg,
                          const FitOptions& options = {});

}  // namespace miniseg
