// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "miniseg/ops.hpp"
#include "miniseg/weights.hpp"

namespace miniseg {

struct Conv {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;  // undefined unless spec.has_bias
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, spec); }
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  Tensor operator()(const Tensor& x, Mode mode) const {
    return batch_norm(x, gamma, beta, running_mean, running_var, mode == Mode::Train);
  }
};

/// PReLU, or plain ReLU when alpha is undefined.
struct Activation {
  Tensor alpha;
  Tensor operator()(const Tensor& x) const { return alpha.defined() ? prelu(x, alpha) : relu(x); }
};

/// Creates layers, registering their arrays in a ModelWeights under a
/// hierarchical name prefix. Conv kernels get fan-in scaled normal init,
/// biases 0, BN gamma 1 / beta 0 / mean 0 / var 1, PReLU slope 0.25.
class LayerFactory {
 public:
  LayerFactory(ModelWeights& weights, std::mt19937_64& rng, std::string prefix = {});

  LayerFactory sub(const std::string& name) const;
  const std::string& prefix() const { return prefix_; }

  Conv conv(const std::string& name, const ConvSpec& spec) const;
  BatchNorm bn(const std::string& name, int channels) const;
  Activation act(const std::string& name, int channels, bool relu) const;

 private:
  std::string path(const std::string& name) const;

  ModelWeights* weights_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

struct BlockOptions {
  int branches = 4;          // pyramid width K
  bool attention = true;     // attentive fusion inside AHSP
  bool relu = false;         // ReLU instead of PReLU
  int db_kernel = 5;         // depthwise kernel of the downsampler block
};

class Block {
 public:
  virtual ~Block() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) const = 0;
  virtual int in_channels() const = 0;
  virtual int out_channels() const = 0;
};

/// conv3x3 -> BN -> PReLU.
class ConvBlock final : public Block {
 public:
  ConvBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts);
  Tensor forward(const Tensor& x, Mode mode) const override;
  int in_channels() const override { return conv_.spec.in_channels; }
  int out_channels() const override { return conv_.spec.out_channels; }

  const Conv& conv() const { return conv_; }
  const BatchNorm& bn() const { return bn_; }
  const Activation& act() const { return act_; }

 private:
  Conv conv_;
  BatchNorm bn_;
  Activation act_;
};

/// pointwise -> depthwise 5x5 (strided) -> BN -> PReLU.
class DownsamplerBlock final : public Block {
 public:
  DownsamplerBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts);
  Tensor forward(const Tensor& x, Mode mode) const override;
  int in_channels() const override { return pointwise_.spec.in_channels; }
  int out_channels() const override { return pointwise_.spec.out_channels; }

  const Conv& pointwise() const { return pointwise_; }
  const Conv& depthwise() const { return depthwise_; }
  const BatchNorm& bn() const { return bn_; }

 private:
  Conv pointwise_;
  Conv depthwise_;
  BatchNorm bn_;
  Activation act_;
};

/// Attentive hierarchical spatial pyramid.
///
///   S      = pointwise(x)                      C -> C'/K channels
///   F_0    = avgpool3x3(S),  F_k = dwconv3x3 with dilation 2^(k-1) (S)
///   Fh_1   = F_0 + F_1,      Fh_k = Fh_(k-1) + F_k
///   A      = sigmoid(grouped pointwise(concat(Fh_1..Fh_K)))   K channels
///   Fa_k   = Fh_k + Fh_k * A[k]
///   out    = PReLU(BN(grouped pointwise(concat(Fa_1..Fa_K))))
///
/// With stride 2 the depthwise convs and the pooling downsample; the shrinking
/// pointwise conv always runs at stride 1.
class AhspBlock final : public Block {
 public:
  struct Trace {
    Tensor shrunk;
    Tensor pooled;
    std::vector<Tensor> branches;      // F_1..F_K
    std::vector<Tensor> hierarchical;  // Fh_1..Fh_K
    Tensor attention;                  // undefined when attention is disabled
    std::vector<Tensor> attended;      // Fa_1..Fa_K
  };

  AhspBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts);
  Tensor forward(const Tensor& x, Mode mode) const override;
  Tensor forward(const Tensor& x, Mode mode, Trace* trace) const;
  int in_channels() const override { return shrink_.spec.in_channels; }
  int out_channels() const override { return fuse_.spec.out_channels; }

  int branches() const { return static_cast<int>(depthwise_.size()); }
  int stride() const { return stride_; }
  const Conv& shrink() const { return shrink_; }
  const Conv& depthwise(int k) const { return depthwise_.at(k); }
  const Conv* attention() const { return has_attention_ ? &attention_ : nullptr; }
  const Conv& fuse() const { return fuse_; }
  const BatchNorm& bn() const { return bn_; }

 private:
  int stride_;
  bool has_attention_;
  Conv shrink_;
  std::vector<Conv> depthwise_;
  Conv attention_;
  Conv fuse_;
  BatchNorm bn_;
  Activation act_;
};

/// Single-branch ablation of AHSP: shrink -> one 3x3 depthwise (dilation 1)
/// -> pointwise expand -> BN -> PReLU.
class SingleBranchBlock final : public Block {
 public:
  SingleBranchBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts);
  Tensor forward(const Tensor& x, Mode mode) const override;
  int in_channels() const override { return shrink_.spec.in_channels; }
  int out_channels() const override { return expand_.spec.out_channels; }

 private:
  Conv shrink_;
  Conv depthwise_;
  Conv expand_;
  BatchNorm bn_;
  Activation act_;
};

/// Decoder fusion: S' = pointwise(x); out = BN(dw3x3(S') + dw3x3,r=2(S')).
class FeatureFusionModule final : public Block {
 public:
  FeatureFusionModule(const LayerFactory& f, int in, int out);
  Tensor forward(const Tensor& x, Mode mode) const override;
  int in_channels() const override { return pointwise_.spec.in_channels; }
  int out_channels() const override { return pointwise_.spec.out_channels; }

  const Conv& pointwise() const { return pointwise_; }
  const Conv& local() const { return local_; }
  const Conv& dilated() const { return dilated_; }
  const BatchNorm& bn() const { return bn_; }

 private:
  Conv pointwise_;
  Conv local_;
  Conv dilated_;
  BatchNorm bn_;
};

}  // namespace miniseg
