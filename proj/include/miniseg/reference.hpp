// SPDX-License-Identifier: Apache-2.0
#pragma once

// Naive float64 implementations of every differentiable op. They share no
// code with ops.cpp and serve as the oracle for convolution checks and the
// finite-difference gradient suite.

#include <cstdint>
#include <span>
#include <vector>

#include "miniseg/ops.hpp"

namespace miniseg::reference {

struct RefTensor {
  Shape shape;
  std::vector<double> v;

  RefTensor() = default;
  explicit RefTensor(Shape s, double fill = 0.0) : shape(s), v(s.numel(), fill) {}
  double& at(int n, int c, int h, int w) {
    return v[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }
  double at(int n, int c, int h, int w) const {
    return v[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) * shape.w + w];
  }
};

RefTensor from_tensor(const Tensor& t);
Tensor to_tensor(const RefTensor& r);

RefTensor conv2d(const RefTensor& x, const RefTensor& w, const RefTensor* bias,
                 const ConvSpec& spec);
RefTensor avg_pool2d(const RefTensor& x, int stride);
RefTensor batch_norm_train(const RefTensor& x, const RefTensor& gamma, const RefTensor& beta,
                           double eps);
RefTensor batch_norm_infer(const RefTensor& x, const RefTensor& gamma, const RefTensor& beta,
                           const RefTensor& mean, const RefTensor& var, double eps);
RefTensor prelu(const RefTensor& x, const RefTensor& alpha);
RefTensor sigmoid(const RefTensor& x);
RefTensor softmax_channels(const RefTensor& x);
RefTensor add(const RefTensor& a, const RefTensor& b);
RefTensor mul_broadcast(const RefTensor& x, const RefTensor& a);
RefTensor concat_channels(std::span<const RefTensor> parts);
std::vector<RefTensor> split_channels(const RefTensor& x, int chunks);
RefTensor upsample_bilinear(const RefTensor& x, int factor);
double softmax_cross_entropy(const RefTensor& logits, std::span<const std::uint8_t> labels);

}  // namespace miniseg::reference
