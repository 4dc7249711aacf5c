// SPDX-License-Identifier: Apache-2.0
#include "miniseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "miniseg/ops.hpp"
#include "miniseg/reference.hpp"

namespace miniseg {

namespace {

using reference::RefTensor;
using FloatFn = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;
using RefFn = std::function<std::vector<RefTensor>(const std::vector<RefTensor>&)>;

struct Case {
  std::string name;
  std::vector<RefTensor> inputs;
  std::vector<bool> differentiable;
  FloatFn run_float;
  RefFn run_ref;
};

class Generator {
 public:
  explicit Generator(std::uint64_t seed) : rng_(seed) {}

  RefTensor uniform(Shape s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    RefTensor t(s);
    for (double& v : t.v) v = dist(rng_);
    return t;
  }

  // Magnitudes in [0.1, 1] with random sign: keeps samples away from kinks.
  RefTensor away_from_zero(Shape s) {
    std::uniform_real_distribution<double> mag(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    RefTensor t(s);
    for (double& v : t.v) v = sign(rng_) ? mag(rng_) : -mag(rng_);
    return t;
  }

  std::vector<std::uint8_t> labels(std::size_t count, int classes) {
    std::uniform_int_distribution<int> dist(0, classes - 1);
    std::vector<std::uint8_t> out(count);
    for (auto& l : out) l = static_cast<std::uint8_t>(dist(rng_));
    return out;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

double objective(const std::vector<RefTensor>& outs, const std::vector<RefTensor>& weights) {
  double total = 0.0;
  for (std::size_t k = 0; k < outs.size(); ++k)
    for (std::size_t i = 0; i < outs[k].v.size(); ++i) total += outs[k].v[i] * weights[k].v[i];
  return total;
}

GradCheckResult check_case(const Case& c, Generator& gen, const GradCheckOptions& opts) {
  GradCheckResult result;
  result.op = c.name;

  // Fixed random weighting of each output.
  const std::vector<RefTensor> probe_outputs = c.run_ref(c.inputs);
  std::vector<RefTensor> weights;
  for (const auto& o : probe_outputs) weights.push_back(gen.uniform(o.shape));

  // Analytic float32 gradients.
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    Tensor t = reference::to_tensor(c.inputs[i]);
    if (c.differentiable[i]) t.set_requires_grad(true);
    inputs.push_back(t);
  }
  Tape tape;
  {
    Tape::Scope scope(tape);
    const std::vector<Tensor> outs = c.run_float(inputs);
    Tensor loss;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      Tensor term = sum(mul_broadcast(outs[k], reference::to_tensor(weights[k])));
      loss = loss.defined() ? add(loss, term) : term;
    }
    tape.backward(loss);
  }

  // Central differences on the float64 reference.
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    if (!c.differentiable[i]) continue;
    const auto analytic = inputs[i].grad();
    std::vector<RefTensor> probe = c.inputs;
    for (std::size_t j = 0; j < probe[i].v.size(); ++j) {
      const double original = probe[i].v[j];
      probe[i].v[j] = original + opts.perturbation;
      const double up = objective(c.run_ref(probe), weights);
      probe[i].v[j] = original - opts.perturbation;
      const double down = objective(c.run_ref(probe), weights);
      probe[i].v[j] = original;
      const double numeric = (up - down) / (2.0 * opts.perturbation);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-2});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  result.passed = result.max_rel_error < opts.tolerance;
  return result;
}

Case conv_case(const std::string& name, Generator& gen, Shape in, ConvSpec spec) {
  spec.validate();
  Case c;
  c.name = name;
  c.inputs = {gen.uniform(in), gen.uniform(spec.weight_shape())};
  c.differentiable = {true, true};
  if (spec.has_bias) {
    c.inputs.push_back(gen.uniform({1, spec.out_channels, 1, 1}));
    c.differentiable.push_back(true);
  }
  c.run_float = [spec](const std::vector<Tensor>& in) {
    return std::vector<Tensor>{conv2d(in[0], in[1], spec.has_bias ? in[2] : Tensor(), spec)};
  };
  c.run_ref = [spec](const std::vector<RefTensor>& in) {
    return std::vector<RefTensor>{
        reference::conv2d(in[0], in[1], spec.has_bias ? &in[2] : nullptr, spec)};
  };
  return c;
}

std::vector<Case> build_cases(Generator& gen) {
  std::vector<Case> cases;
  const Shape small{2, 4, 6, 6};

  {
    ConvSpec s = ConvSpec::square(3, 4, 3, 1, true);
    cases.push_back(conv_case("conv2d/vanilla3x3", gen, {2, 3, 6, 6}, s));
  }
  cases.push_back(conv_case("conv2d/vanilla3x3_stride2", gen, {2, 2, 6, 6},
                            ConvSpec::square(2, 4, 3, 2, false)));
  cases.push_back(conv_case("conv2d/pointwise", gen, small, ConvSpec::pointwise(4, 3, true)));
  cases.push_back(
      conv_case("conv2d/grouped_pointwise", gen, small, ConvSpec::pointwise(4, 2, true, 2)));
  cases.push_back(
      conv_case("conv2d/depthwise3x3_dil2", gen, small, ConvSpec::depthwise(4, 3, 2, 1)));
  cases.push_back(
      conv_case("conv2d/depthwise3x3_dil4_stride2", gen, small, ConvSpec::depthwise(4, 3, 4, 2)));
  cases.push_back(
      conv_case("conv2d/depthwise5x5_stride2", gen, small, ConvSpec::depthwise(4, 5, 1, 2)));

  for (int stride : {1, 2}) {
    Case c;
    c.name = "avg_pool2d/stride" + std::to_string(stride);
    c.inputs = {gen.uniform(small)};
    c.differentiable = {true};
    c.run_float = [stride](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{avg_pool2d(in[0], stride)};
    };
    c.run_ref = [stride](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::avg_pool2d(in[0], stride)};
    };
    cases.push_back(std::move(c));
  }

  {
    Case c;
    c.name = "batch_norm/train";
    c.inputs = {gen.uniform(small, -2.0, 2.0), gen.uniform({1, 4, 1, 1}, 0.5, 1.5),
                gen.uniform({1, 4, 1, 1})};
    c.differentiable = {true, true, true};
    c.run_float = [](const std::vector<Tensor>& in) {
      Tensor mean({1, in[0].shape().c, 1, 1}, 0.0f);
      Tensor var({1, in[0].shape().c, 1, 1}, 1.0f);
      return std::vector<Tensor>{batch_norm(in[0], in[1], in[2], mean, var, true)};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::batch_norm_train(in[0], in[1], in[2], 1e-3)};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "batch_norm/infer";
    c.inputs = {gen.uniform(small), gen.uniform({1, 4, 1, 1}, 0.5, 1.5),
                gen.uniform({1, 4, 1, 1}), gen.uniform({1, 4, 1, 1}),
                gen.uniform({1, 4, 1, 1}, 0.5, 2.0)};
    c.differentiable = {true, true, true, false, false};
    c.run_float = [](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{batch_norm(in[0], in[1], in[2], in[3], in[4], false)};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{
          reference::batch_norm_infer(in[0], in[1], in[2], in[3], in[4], 1e-3)};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "prelu";
    c.inputs = {gen.away_from_zero(small), gen.uniform({1, 4, 1, 1}, 0.0, 0.5)};
    c.differentiable = {true, true};
    c.run_float = [](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{prelu(in[0], in[1])};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::prelu(in[0], in[1])};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "relu";
    c.inputs = {gen.away_from_zero(small)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) { return std::vector<Tensor>{relu(in[0])}; };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::prelu(in[0], RefTensor({1, in[0].shape.c, 1, 1}))};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "sigmoid";
    c.inputs = {gen.uniform(small, -3.0, 3.0)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) { return std::vector<Tensor>{sigmoid(in[0])}; };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::sigmoid(in[0])};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "softmax_channels";
    c.inputs = {gen.uniform(small, -3.0, 3.0)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{softmax_channels(in[0])};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::softmax_channels(in[0])};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "add";
    c.inputs = {gen.uniform(small), gen.uniform(small)};
    c.differentiable = {true, true};
    c.run_float = [](const std::vector<Tensor>& in) { return std::vector<Tensor>{add(in[0], in[1])}; };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::add(in[0], in[1])};
    };
    cases.push_back(std::move(c));
  }
  for (bool broadcast : {true, false}) {
    Case c;
    c.name = broadcast ? "mul_broadcast/replicated" : "mul_broadcast/elementwise";
    c.inputs = {gen.uniform(small), gen.uniform(broadcast ? Shape{2, 1, 6, 6} : small)};
    c.differentiable = {true, true};
    c.run_float = [](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{mul_broadcast(in[0], in[1])};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::mul_broadcast(in[0], in[1])};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "scale";
    c.inputs = {gen.uniform(small)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) { return std::vector<Tensor>{scale(in[0], 1.5f)}; };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      RefTensor out = in[0];
      for (double& v : out.v) v *= 1.5;
      return std::vector<RefTensor>{out};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "concat_channels";
    c.inputs = {gen.uniform({2, 1, 6, 6}), gen.uniform({2, 3, 6, 6})};
    c.differentiable = {true, true};
    c.run_float = [](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{concat_channels(in)};
    };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::concat_channels(in)};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "split_channels";
    c.inputs = {gen.uniform(small)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) { return split_channels(in[0], 2); };
    c.run_ref = [](const std::vector<RefTensor>& in) { return reference::split_channels(in[0], 2); };
    cases.push_back(std::move(c));
  }
  for (auto [factor, shape] : {std::pair{2, Shape{2, 4, 3, 3}}, std::pair{4, Shape{1, 2, 2, 2}}}) {
    Case c;
    c.name = "upsample_bilinear/x" + std::to_string(factor);
    c.inputs = {gen.uniform(shape)};
    c.differentiable = {true};
    c.run_float = [factor](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{upsample_bilinear(in[0], factor)};
    };
    c.run_ref = [factor](const std::vector<RefTensor>& in) {
      return std::vector<RefTensor>{reference::upsample_bilinear(in[0], factor)};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "softmax_cross_entropy";
    const Shape logits{2, 2, 6, 6};
    const auto labels = gen.labels(2 * 36, 2);
    c.inputs = {gen.uniform(logits, -2.0, 2.0)};
    c.differentiable = {true};
    c.run_float = [labels](const std::vector<Tensor>& in) {
      return std::vector<Tensor>{softmax_cross_entropy(in[0], labels)};
    };
    c.run_ref = [labels](const std::vector<RefTensor>& in) {
      RefTensor out({1, 1, 1, 1});
      out.v[0] = reference::softmax_cross_entropy(in[0], labels);
      return std::vector<RefTensor>{out};
    };
    cases.push_back(std::move(c));
  }
  {
    Case c;
    c.name = "sum";
    c.inputs = {gen.uniform(small)};
    c.differentiable = {true};
    c.run_float = [](const std::vector<Tensor>& in) { return std::vector<Tensor>{sum(in[0])}; };
    c.run_ref = [](const std::vector<RefTensor>& in) {
      RefTensor out({1, 1, 1, 1});
      for (double v : in[0].v) out.v[0] += v;
      return std::vector<RefTensor>{out};
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opts) {
  Generator gen(opts.seed);
  std::vector<GradCheckResult> results;
  for (const Case& c : build_cases(gen)) results.push_back(check_case(c, gen, opts));
  return results;
}

}  // namespace miniseg
