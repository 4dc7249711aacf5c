// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "miniseg/tensor.hpp"

namespace miniseg {

/// Geometry of a 2-D convolution. groups == in == out is the depthwise case.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
  bool has_bias = false;

  static ConvSpec pointwise(int in, int out, bool bias = false, int groups = 1);
  static ConvSpec square(int in, int out, int k, int stride, bool bias = false);
  /// Depthwise k×k with "same" padding for the given dilation.
  static ConvSpec depthwise(int channels, int k, int dilation, int stride);

  void validate() const;
  /// floor((extent + 2p - r(k-1) - 1) / s) + 1
  int out_extent(int extent, int k) const;
  Shape weight_shape() const;
};

enum class Mode { Train, Infer };

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec);

/// 3×3 average pooling, padding 1; boundary windows divide by the number of
/// in-bounds taps.
Tensor avg_pool2d(const Tensor& x, int stride);

struct BatchNormOptions {
  float eps = 1e-3f;
  float momentum = 0.1f;
};

/// gamma/beta/running stats are 1×C×1×1. In training mode running stats are
/// updated in place (unbiased variance).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const Tensor& running_mean, const Tensor& running_var, bool training,
                  BatchNormOptions opts = {});

Tensor prelu(const Tensor& x, const Tensor& alpha);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_channels(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
/// x * a where a is either x-shaped or has a single channel that is
/// replicated across x's channels.
Tensor mul_broadcast(const Tensor& x, const Tensor& a);
Tensor scale(const Tensor& x, float factor);

Tensor concat_channels(std::span<const Tensor> parts);
std::vector<Tensor> split_channels(const Tensor& x, int chunks = 2);

/// Bilinear upsampling by an integer factor, half-pixel centres.
Tensor upsample_bilinear(const Tensor& x, int factor);

/// Sum of all elements as a 1×1×1×1 tensor.
Tensor sum(const Tensor& x);

/// Mean over pixels of -log softmax(logits)[label]. labels has N·H·W entries
/// in [0, C). Optional class_weights (length C) give a weighted mean.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                             std::span<const float> class_weights = {});

}  // namespace miniseg
