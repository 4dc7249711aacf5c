// SPDX-License-Identifier: Apache-2.0
#include "miniseg/blocks.hpp"

#include <cmath>

#include "miniseg/error.hpp"

namespace miniseg {

LayerFactory::LayerFactory(ModelWeights& weights, std::mt19937_64& rng, std::string prefix)
    : weights_(&weights), rng_(&rng), prefix_(std::move(prefix)) {}

LayerFactory LayerFactory::sub(const std::string& name) const {
  return LayerFactory(*weights_, *rng_, path(name));
}

std::string LayerFactory::path(const std::string& name) const {
  return prefix_.empty() ? name : prefix_ + "." + name;
}

Conv LayerFactory::conv(const std::string& name, const ConvSpec& spec) const {
  spec.validate();
  Conv c;
  c.spec = spec;
  const Shape ws = spec.weight_shape();
  c.weight = weights_->add(path(name) + ".weight", Role::Kernel, ws);
  const double fan_in = static_cast<double>(ws.c) * ws.h * ws.w;
  std::normal_distribution<double> init(0.0, std::sqrt(2.0 / fan_in));
  for (float& v : c.weight.data()) v = static_cast<float>(init(*rng_));
  if (spec.has_bias)
    c.bias = weights_->add(path(name) + ".bias", Role::Bias, {1, spec.out_channels, 1, 1});
  return c;
}

BatchNorm LayerFactory::bn(const std::string& name, int channels) const {
  const Shape s{1, channels, 1, 1};
  const std::string p = path(name);
  return {weights_->add(p + ".gamma", Role::BnGamma, s, 1.0f),
          weights_->add(p + ".beta", Role::BnBeta, s, 0.0f),
          weights_->add(p + ".mean", Role::BnMean, s, 0.0f),
          weights_->add(p + ".var", Role::BnVar, s, 1.0f)};
}

Activation LayerFactory::act(const std::string& name, int channels, bool relu) const {
  if (relu) return {};
  return {weights_->add(path(name) + ".alpha", Role::PreluAlpha, {1, channels, 1, 1}, 0.25f)};
}

// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts)
    : conv_(f.conv("conv", ConvSpec::square(in, out, 3, stride))),
      bn_(f.bn("bn", out)),
      act_(f.act("act", out, opts.relu)) {}

Tensor ConvBlock::forward(const Tensor& x, Mode mode) const { return act_(bn_(conv_(x), mode)); }

DownsamplerBlock::DownsamplerBlock(const LayerFactory& f, int in, int out, int stride,
                                   const BlockOptions& opts)
    : pointwise_(f.conv("pw", ConvSpec::pointwise(in, out))),
      depthwise_(f.conv("dw", ConvSpec::depthwise(out, opts.db_kernel, 1, stride))),
      bn_(f.bn("bn", out)),
      act_(f.act("act", out, opts.relu)) {}

Tensor DownsamplerBlock::forward(const Tensor& x, Mode mode) const {
  return act_(bn_(depthwise_(pointwise_(x)), mode));
}

// ---------------------------------------------------------------------------

namespace {
int checked_width(int out, int k) {
  if (k <= 0 || out % k != 0)
    throw UsageError("AHSP output channels " + std::to_string(out) +
                     " not divisible by branch count " + std::to_string(k));
  return out / k;
}
}  // namespace

AhspBlock::AhspBlock(const LayerFactory& f, int in, int out, int stride, const BlockOptions& opts)
    : stride_(stride), has_attention_(opts.attention) {
  const int k = opts.branches;
  const int width = checked_width(out, k);
  shrink_ = f.conv("shrink", ConvSpec::pointwise(in, width));
  for (int b = 0; b < k; ++b)
    depthwise_.push_back(
        f.conv("dw" + std::to_string(b + 1), ConvSpec::depthwise(width, 3, 1 << b, stride)));
  if (has_attention_) attention_ = f.conv("attn", ConvSpec::pointwise(out, k, true, k));
  fuse_ = f.conv("fuse", ConvSpec::pointwise(out, out, false, k));
  bn_ = f.bn("bn", out);
  act_ = f.act("act", out, opts.relu);
}

Tensor AhspBlock::forward(const Tensor& x, Mode mode) const { return forward(x, mode, nullptr); }

Tensor AhspBlock::forward(const Tensor& x, Mode mode, Trace* trace) const {
  const Tensor s = shrink_(x);
  const Tensor pooled = avg_pool2d(s, stride_);
  std::vector<Tensor> branches, hier;
  for (const Conv& dw : depthwise_) {
    branches.push_back(dw(s));
    hier.push_back(add(hier.empty() ? pooled : hier.back(), branches.back()));
  }
  std::vector<Tensor> attended;
  Tensor att;
  if (has_attention_) {
    att = sigmoid(attention_(concat_channels(hier)));
    const std::vector<Tensor> maps = split_channels(att, static_cast<int>(depthwise_.size()));
    for (std::size_t b = 0; b < hier.size(); ++b)
      attended.push_back(add(hier[b], mul_broadcast(hier[b], maps[b])));
  } else {
    attended = hier;
  }
  Tensor out = act_(bn_(fuse_(concat_channels(attended)), mode));
  if (trace != nullptr) {
    trace->shrunk = s;
    trace->pooled = pooled;
    trace->branches = std::move(branches);
    trace->hierarchical = std::move(hier);
    trace->attention = att;
    trace->attended = std::move(attended);
  }
  return out;
}

// ---------------------------------------------------------------------------

SingleBranchBlock::SingleBranchBlock(const LayerFactory& f, int in, int out, int stride,
                                     const BlockOptions& opts) {
  const int width = checked_width(out, opts.branches);
  shrink_ = f.conv("shrink", ConvSpec::pointwise(in, width));
  depthwise_ = f.conv("dw1", ConvSpec::depthwise(width, 3, 1, stride));
  expand_ = f.conv("expand", ConvSpec::pointwise(width, out));
  bn_ = f.bn("bn", out);
  act_ = f.act("act", out, opts.relu);
}

Tensor SingleBranchBlock::forward(const Tensor& x, Mode mode) const {
  return act_(bn_(expand_(depthwise_(shrink_(x))), mode));
}

// ---------------------------------------------------------------------------

FeatureFusionModule::FeatureFusionModule(const LayerFactory& f, int in, int out)
    : pointwise_(f.conv("pw", ConvSpec::pointwise(in, out))),
      local_(f.conv("dw1", ConvSpec::depthwise(out, 3, 1, 1))),
      dilated_(f.conv("dw2", ConvSpec::depthwise(out, 3, 2, 1))),
      bn_(f.bn("bn", out)) {}

Tensor FeatureFusionModule::forward(const Tensor& x, Mode mode) const {
  const Tensor s = pointwise_(x);
  return bn_(add(local_(s), dilated_(s)), mode);
}

}  // namespace miniseg
