// SPDX-License-Identifier: Apache-2.0
#include "miniseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

#include "miniseg/error.hpp"

namespace miniseg {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_output(const Shape& shape, bool track) {
  Tensor out(shape);
  if (track) out.set_requires_grad(true);
  return out;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_channel_vector(const Tensor& v, int channels, const char* what) {
  require(v.defined() && v.numel() == static_cast<std::size_t>(channels),
          std::string(what) + " must have " + std::to_string(channels) + " entries");
}

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int ceil_div(int a, int b) { return -floor_div(-a, b); }

// Output rows o with 0 <= o*stride + offset < extent, clamped to [0, out_extent).
void valid_range(int offset, int stride, int extent, int out_extent, int& lo, int& hi) {
  lo = std::max(0, ceil_div(-offset, stride));
  hi = std::min(out_extent - 1, floor_div(extent - 1 - offset, stride));
}

struct ConvGeometry {
  Shape in;
  Shape out;
  ConvSpec spec;
  int in_per_group;
  int out_per_group;
};

// Visits every (output plane, input plane, tap) triple together with the
// valid output window of that tap.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const ConvSpec& s = g.spec;
  for (int n = 0; n < g.in.n; ++n) {
    for (int oc = 0; oc < g.out.c; ++oc) {
      const int group = oc / g.out_per_group;
      for (int icg = 0; icg < g.in_per_group; ++icg) {
        const int ic = group * g.in_per_group + icg;
        for (int kh = 0; kh < s.kernel_h; ++kh) {
          const int off_h = kh * s.dilation - s.padding;
          int oh_lo, oh_hi;
          valid_range(off_h, s.stride, g.in.h, g.out.h, oh_lo, oh_hi);
          if (oh_lo > oh_hi) continue;
          for (int kw = 0; kw < s.kernel_w; ++kw) {
            const int off_w = kw * s.dilation - s.padding;
            int ow_lo, ow_hi;
            valid_range(off_w, s.stride, g.in.w, g.out.w, ow_lo, ow_hi);
            if (ow_lo > ow_hi) continue;
            const std::size_t w_index =
                ((static_cast<std::size_t>(oc) * g.in_per_group + icg) * s.kernel_h + kh) *
                    s.kernel_w + kw;
            fn(n, oc, ic, w_index, off_h, off_w, oh_lo, oh_hi, ow_lo, ow_hi);
          }
        }
      }
    }
  }
}

struct Interp {
  int i0;
  int i1;
  float frac;
};

std::vector<Interp> interp_table(int in_extent, int factor) {
  std::vector<Interp> table(static_cast<std::size_t>(in_extent) * factor);
  for (std::size_t o = 0; o < table.size(); ++o) {
    float src = (static_cast<float>(o) + 0.5f) / static_cast<float>(factor) - 0.5f;
    if (src < 0.0f) src = 0.0f;
    int i0 = static_cast<int>(src);
    if (i0 > in_extent - 1) i0 = in_extent - 1;
    const int i1 = std::min(i0 + 1, in_extent - 1);
    table[o] = {i0, i1, src - static_cast<float>(i0)};
  }
  return table;
}

}  // namespace

// ---------------------------------------------------------------------------
// ConvSpec

ConvSpec ConvSpec::pointwise(int in, int out, bool bias, int groups) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.groups = groups;
  s.has_bias = bias;
  return s;
}

ConvSpec ConvSpec::square(int in, int out, int k, int stride, bool bias) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = k;
  s.stride = stride;
  s.padding = k / 2;
  s.has_bias = bias;
  return s;
}

ConvSpec ConvSpec::depthwise(int channels, int k, int dilation, int stride) {
  ConvSpec s;
  s.in_channels = s.out_channels = s.groups = channels;
  s.kernel_h = s.kernel_w = k;
  s.dilation = dilation;
  s.stride = stride;
  s.padding = dilation * (k / 2);
  return s;
}

void ConvSpec::validate() const {
  if (in_channels <= 0 || out_channels <= 0 || groups <= 0)
    throw ShapeError("conv channels and groups must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw ShapeError("conv channels (" + std::to_string(in_channels) + " -> " +
                     std::to_string(out_channels) + ") not divisible by groups " +
                     std::to_string(groups));
  if (kernel_h <= 0 || kernel_w <= 0 || stride <= 0 || dilation <= 0 || padding < 0)
    throw ShapeError("conv kernel, stride and dilation must be positive, padding non-negative");
}

int ConvSpec::out_extent(int extent, int k) const {
  return floor_div(extent + 2 * padding - dilation * (k - 1) - 1, stride) + 1;
}

Shape ConvSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel_h, kernel_w};
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvSpec& spec) {
  spec.validate();
  const Shape in = x.shape();
  require(in.c == spec.in_channels, "conv2d: channel axis of input is " + std::to_string(in.c) +
                                        ", expected " + std::to_string(spec.in_channels));
  const Shape ws = spec.weight_shape();
  require(weight.defined() && weight.shape() == ws,
          "conv2d: weight shape " + (weight.defined() ? weight.shape().str() : "<none>") +
              " does not match expected " + ws.str());
  if (spec.has_bias)
    require(bias.defined() && bias.numel() == static_cast<std::size_t>(spec.out_channels),
            "conv2d: bias must have out_channels entries");
  const int oh = spec.out_extent(in.h, spec.kernel_h);
  const int ow = spec.out_extent(in.w, spec.kernel_w);
  require(oh > 0, "conv2d: non-positive output extent on height axis (input " +
                      std::to_string(in.h) + ")");
  require(ow > 0, "conv2d: non-positive output extent on width axis (input " +
                      std::to_string(in.w) + ")");
  const Shape out_shape{in.n, spec.out_channels, oh, ow};

  if (FlopCounter* fc = FlopCounter::active()) {
    fc->conv_macs += out_shape.numel() * static_cast<std::uint64_t>(ws.c) * ws.h * ws.w;
    if (spec.has_bias) fc->elementwise_ops += out_shape.numel();
    return Tensor::shape_only(out_shape);
  }

  const bool use_bias = spec.has_bias;
  const bool track = recording({&x, &weight, use_bias ? &bias : &x});
  Tensor out = make_output(out_shape, track);
  const ConvGeometry geo{in, out_shape, spec, spec.in_channels / spec.groups,
                         spec.out_channels / spec.groups};
  const std::size_t in_plane = in.plane();
  const std::size_t out_plane = out_shape.plane();

  {
    const float* xd = x.data().data();
    const float* wd = weight.data().data();
    float* od = out.data().data();
    if (use_bias) {
      const auto b = bias.data();
      for (int n = 0; n < in.n; ++n)
        for (int oc = 0; oc < out_shape.c; ++oc)
          std::fill_n(od + (static_cast<std::size_t>(n) * out_shape.c + oc) * out_plane,
                      out_plane, b[oc]);
    }
    const int stride = spec.stride;
    for_each_tap(geo, [&](int n, int oc, int ic, std::size_t wi, int off_h, int off_w, int oh_lo,
                          int oh_hi, int ow_lo, int ow_hi) {
      const float wv = wd[wi];
      const float* ip = xd + (static_cast<std::size_t>(n) * in.c + ic) * in_plane;
      float* op = od + (static_cast<std::size_t>(n) * out_shape.c + oc) * out_plane;
      for (int r = oh_lo; r <= oh_hi; ++r) {
        const float* irow = ip + static_cast<std::size_t>(r * stride + off_h) * in.w + off_w;
        float* orow = op + static_cast<std::size_t>(r) * out_shape.w;
        if (stride == 1) {
          for (int c = ow_lo; c <= ow_hi; ++c) orow[c] += wv * irow[c];
        } else {
          for (int c = ow_lo; c <= ow_hi; ++c) orow[c] += wv * irow[c * stride];
        }
      }
    });
  }

  if (track) {
    Tape::active()->record([x, weight, bias, out, geo, use_bias]() {
      if (!out.has_grad()) return;
      const Shape in = geo.in;
      const Shape os = geo.out;
      const std::size_t in_plane = in.plane();
      const std::size_t out_plane = os.plane();
      const float* god = out.grad().data();
      const int stride = geo.spec.stride;
      if (x.requires_grad()) {
        float* gx = x.grad().data();
        const float* wd = weight.data().data();
        for_each_tap(geo, [&](int n, int oc, int ic, std::size_t wi, int off_h, int off_w,
                              int oh_lo, int oh_hi, int ow_lo, int ow_hi) {
          const float wv = wd[wi];
          float* ip = gx + (static_cast<std::size_t>(n) * in.c + ic) * in_plane;
          const float* op = god + (static_cast<std::size_t>(n) * os.c + oc) * out_plane;
          for (int r = oh_lo; r <= oh_hi; ++r) {
            float* irow = ip + static_cast<std::size_t>(r * stride + off_h) * in.w + off_w;
            const float* orow = op + static_cast<std::size_t>(r) * os.w;
            if (stride == 1) {
              for (int c = ow_lo; c <= ow_hi; ++c) irow[c] += wv * orow[c];
            } else {
              for (int c = ow_lo; c <= ow_hi; ++c) irow[c * stride] += wv * orow[c];
            }
          }
        });
      }
      if (weight.requires_grad()) {
        std::vector<double> acc(weight.numel(), 0.0);
        const float* xd = x.data().data();
        for_each_tap(geo, [&](int n, int oc, int ic, std::size_t wi, int off_h, int off_w,
                              int oh_lo, int oh_hi, int ow_lo, int ow_hi) {
          const float* ip = xd + (static_cast<std::size_t>(n) * in.c + ic) * in_plane;
          const float* op = god + (static_cast<std::size_t>(n) * os.c + oc) * out_plane;
          double total = 0.0;
          for (int r = oh_lo; r <= oh_hi; ++r) {
            const float* irow = ip + static_cast<std::size_t>(r * stride + off_h) * in.w + off_w;
            const float* orow = op + static_cast<std::size_t>(r) * os.w;
            float row = 0.0f;
            if (stride == 1) {
              for (int c = ow_lo; c <= ow_hi; ++c) row += orow[c] * irow[c];
            } else {
              for (int c = ow_lo; c <= ow_hi; ++c) row += orow[c] * irow[c * stride];
            }
            total += row;
          }
          acc[wi] += total;
        });
        auto gw = weight.grad();
        for (std::size_t i = 0; i < acc.size(); ++i) gw[i] += static_cast<float>(acc[i]);
      }
      if (use_bias && bias.requires_grad()) {
        auto gb = bias.grad();
        for (int n = 0; n < os.n; ++n)
          for (int oc = 0; oc < os.c; ++oc) {
            const float* op = god + (static_cast<std::size_t>(n) * os.c + oc) * out_plane;
            double total = 0.0;
            for (std::size_t i = 0; i < out_plane; ++i) total += op[i];
            gb[oc] += static_cast<float>(total);
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// avg_pool2d

Tensor avg_pool2d(const Tensor& x, int stride) {
  if (stride != 1 && stride != 2) throw ShapeError("avg_pool2d: stride must be 1 or 2");
  const Shape in = x.shape();
  const int oh = floor_div(in.h - 1, stride) + 1;
  const int ow = floor_div(in.w - 1, stride) + 1;
  require(in.h > 0 && in.w > 0, "avg_pool2d: empty spatial extent");
  const Shape out_shape{in.n, in.c, oh, ow};
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * out_shape.numel();
    return Tensor::shape_only(out_shape);
  }
  const bool track = recording({&x});
  Tensor out = make_output(out_shape, track);

  // Per-output-site tap count (count excludes padding); identical for all planes.
  auto window = [stride](int o, int extent, int& lo, int& hi) {
    lo = std::max(0, o * stride - 1);
    hi = std::min(extent - 1, o * stride + 1);
  };
  const float* xd = x.data().data();
  float* od = out.data().data();
  for (std::size_t p = 0; p < static_cast<std::size_t>(in.n) * in.c; ++p) {
    const float* ip = xd + p * in.plane();
    float* op = od + p * out_shape.plane();
    for (int r = 0; r < oh; ++r) {
      int r0, r1;
      window(r, in.h, r0, r1);
      for (int c = 0; c < ow; ++c) {
        int c0, c1;
        window(c, in.w, c0, c1);
        float total = 0.0f;
        for (int i = r0; i <= r1; ++i)
          for (int j = c0; j <= c1; ++j) total += ip[static_cast<std::size_t>(i) * in.w + j];
        op[static_cast<std::size_t>(r) * ow + c] =
            total / static_cast<float>((r1 - r0 + 1) * (c1 - c0 + 1));
      }
    }
  }

  if (track) {
    Tape::active()->record([x, out, window]() {
      if (!out.has_grad()) return;
      const Shape in = x.shape();
      const Shape os = out.shape();
      const float* go = out.grad().data();
      float* gx = x.grad().data();
      for (std::size_t p = 0; p < static_cast<std::size_t>(in.n) * in.c; ++p) {
        float* ip = gx + p * in.plane();
        const float* op = go + p * os.plane();
        for (int r = 0; r < os.h; ++r) {
          int r0, r1;
          window(r, in.h, r0, r1);
          for (int c = 0; c < os.w; ++c) {
            int c0, c1;
            window(c, in.w, c0, c1);
            const float g = op[static_cast<std::size_t>(r) * os.w + c] /
                            static_cast<float>((r1 - r0 + 1) * (c1 - c0 + 1));
            for (int i = r0; i <= r1; ++i)
              for (int j = c0; j <= c1; ++j) ip[static_cast<std::size_t>(i) * in.w + j] += g;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const Tensor& running_mean, const Tensor& running_var, bool training,
                  BatchNormOptions opts) {
  const Shape s = x.shape();
  require_channel_vector(gamma, s.c, "batch_norm gamma");
  require_channel_vector(beta, s.c, "batch_norm beta");
  require_channel_vector(running_mean, s.c, "batch_norm running_mean");
  require_channel_vector(running_var, s.c, "batch_norm running_var");
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(s);
  }
  const std::size_t per_channel = static_cast<std::size_t>(s.n) * s.plane();
  if (training && per_channel < 2)
    throw ShapeError("batch_norm: training mode needs more than one value per channel");

  const bool track = recording({&x, &gamma, &beta});
  Tensor out = make_output(s, track);
  std::vector<float> mean(s.c), invstd(s.c);
  const float* xd = x.data().data();

  if (training) {
    // Handles share storage, so copies give write access to the running stats.
    Tensor rm = running_mean;
    Tensor rv = running_var;
    auto rm_span = rm.data();
    auto rv_span = rv.data();
    for (int c = 0; c < s.c; ++c) {
      double total = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = xd + (static_cast<std::size_t>(n) * s.c + c) * s.plane();
        for (std::size_t i = 0; i < s.plane(); ++i) total += p[i];
      }
      const double mu = total / static_cast<double>(per_channel);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = xd + (static_cast<std::size_t>(n) * s.c + c) * s.plane();
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(per_channel);
      mean[c] = static_cast<float>(mu);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + opts.eps));
      const double unbiased = sq / static_cast<double>(per_channel - 1);
      rm_span[c] = (1.0f - opts.momentum) * rm_span[c] + opts.momentum * static_cast<float>(mu);
      rv_span[c] =
          (1.0f - opts.momentum) * rv_span[c] + opts.momentum * static_cast<float>(unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (int c = 0; c < s.c; ++c) {
      mean[c] = rm[c];
      invstd[c] = 1.0f / std::sqrt(rv[c] + opts.eps);
    }
  }

  const auto g = gamma.data();
  const auto b = beta.data();
  float* od = out.data().data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.plane();
      const float k = g[c] * invstd[c];
      const float m = mean[c];
      for (std::size_t i = 0; i < s.plane(); ++i) od[base + i] = (xd[base + i] - m) * k + b[c];
    }

  if (track) {
    Tape::active()->record([x, gamma, beta, out, mean, invstd, training]() {
      if (!out.has_grad()) return;
      const Shape s = x.shape();
      const std::size_t plane = s.plane();
      const double count = static_cast<double>(s.n) * static_cast<double>(plane);
      const float* xd = x.data().data();
      const float* go = out.grad().data();
      const auto g = gamma.data();
      for (int c = 0; c < s.c; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xd[base + i] - mean[c]) * invstd[c];
            sum_dy += go[base + i];
            sum_dy_xhat += go[base + i] * xhat;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += static_cast<float>(sum_dy_xhat);
        if (beta.requires_grad()) beta.grad()[c] += static_cast<float>(sum_dy);
        if (!x.requires_grad()) continue;
        float* gx = x.grad().data();
        const double k = static_cast<double>(g[c]) * invstd[c];
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (training) {
              const double xhat = (xd[base + i] - mean[c]) * invstd[c];
              gx[base + i] += static_cast<float>(
                  k * (go[base + i] - sum_dy / count - xhat * sum_dy_xhat / count));
            } else {
              gx[base + i] += static_cast<float>(k * go[base + i]);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

Tensor prelu(const Tensor& x, const Tensor& alpha) {
  const Shape s = x.shape();
  require_channel_vector(alpha, s.c, "prelu alpha");
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(s);
  }
  const bool track = recording({&x, &alpha});
  Tensor out = make_output(s, track);
  const float* xd = x.data().data();
  const auto a = alpha.data();
  float* od = out.data().data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const float v = xd[base + i];
        od[base + i] = v >= 0.0f ? v : a[c] * v;
      }
    }
  if (track) {
    Tape::active()->record([x, alpha, out]() {
      if (!out.has_grad()) return;
      const Shape s = x.shape();
      const float* xd = x.data().data();
      const float* go = out.grad().data();
      const auto a = alpha.data();
      for (int c = 0; c < s.c; ++c) {
        double ga = 0.0;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * s.plane();
          for (std::size_t i = 0; i < s.plane(); ++i) {
            const float v = xd[base + i];
            if (v < 0.0f) ga += static_cast<double>(go[base + i]) * v;
          }
          if (x.requires_grad()) {
            float* gx = x.grad().data();
            for (std::size_t i = 0; i < s.plane(); ++i)
              gx[base + i] += xd[base + i] >= 0.0f ? go[base + i] : a[c] * go[base + i];
          }
        }
        if (alpha.requires_grad()) alpha.grad()[c] += static_cast<float>(ga);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  const Shape s = x.shape();
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(s);
  }
  const bool track = recording({&x});
  Tensor out = make_output(s, track);
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  if (track) {
    Tape::active()->record([x, out]() {
      if (!out.has_grad()) return;
      const auto xd = x.data();
      const auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xd[i] > 0.0f) gx[i] += go[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  const Shape s = x.shape();
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(s);
  }
  const bool track = recording({&x});
  Tensor out = make_output(s, track);
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    const float v = xd[i];
    if (v >= 0.0f) {
      od[i] = 1.0f / (1.0f + std::exp(-v));
    } else {
      const float e = std::exp(v);
      od[i] = e / (1.0f + e);
    }
  }
  if (track) {
    Tape::active()->record([x, out]() {
      if (!out.has_grad()) return;
      const auto y = out.data();
      const auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

Tensor softmax_channels(const Tensor& x) {
  const Shape s = x.shape();
  require(s.c >= 2, "softmax_channels: needs at least 2 channels, got " + std::to_string(s.c));
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(s);
  }
  const bool track = recording({&x});
  Tensor out = make_output(s, track);
  const float* xd = x.data().data();
  float* od = out.data().data();
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      float mx = xd[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, xd[base + c * plane + i]);
      float total = 0.0f;
      for (int c = 0; c < s.c; ++c) {
        const float e = std::exp(xd[base + c * plane + i] - mx);
        od[base + c * plane + i] = e;
        total += e;
      }
      for (int c = 0; c < s.c; ++c) od[base + c * plane + i] /= total;
    }
  }
  if (track) {
    Tape::active()->record([x, out]() {
      if (!out.has_grad()) return;
      const Shape s = x.shape();
      const std::size_t plane = s.plane();
      const float* y = out.data().data();
      const float* go = out.grad().data();
      float* gx = x.grad().data();
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          float dot = 0.0f;
          for (int c = 0; c < s.c; ++c) dot += go[base + c * plane + i] * y[base + c * plane + i];
          for (int c = 0; c < s.c; ++c) {
            const std::size_t k = base + c * plane + i;
            gx[k] += y[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += a.numel();
    return Tensor::shape_only(a.shape());
  }
  const bool track = recording({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const auto ad = a.data();
  const auto bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  if (track) {
    Tape::active()->record([a, b, out]() {
      if (!out.has_grad()) return;
      const auto go = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

Tensor mul_broadcast(const Tensor& x, const Tensor& a) {
  const Shape xs = x.shape();
  const Shape as = a.shape();
  const bool same = xs == as;
  require(same || (as.c == 1 && as.n == xs.n && as.h == xs.h && as.w == xs.w),
          "mul_broadcast: " + as.str() + " cannot broadcast onto " + xs.str());
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += x.numel();
    return Tensor::shape_only(xs);
  }
  const bool track = recording({&x, &a});
  Tensor out = make_output(xs, track);
  const float* xd = x.data().data();
  const float* ad = a.data().data();
  float* od = out.data().data();
  const std::size_t plane = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * plane;
      const std::size_t abase = same ? base : static_cast<std::size_t>(n) * plane;
      for (std::size_t i = 0; i < plane; ++i) od[base + i] = xd[base + i] * ad[abase + i];
    }
  if (track) {
    Tape::active()->record([x, a, out, same]() {
      if (!out.has_grad()) return;
      const Shape xs = x.shape();
      const std::size_t plane = xs.plane();
      const float* xd = x.data().data();
      const float* ad = a.data().data();
      const float* go = out.grad().data();
      float* gx = x.requires_grad() ? x.grad().data() : nullptr;
      float* ga = a.requires_grad() ? a.grad().data() : nullptr;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * plane;
          const std::size_t abase = same ? base : static_cast<std::size_t>(n) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (gx) gx[base + i] += go[base + i] * ad[abase + i];
            if (ga) ga[abase + i] += go[base + i] * xd[base + i];
          }
        }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, float factor) {
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += x.numel();
    return Tensor::shape_only(x.shape());
  }
  const bool track = recording({&x});
  Tensor out = make_output(x.shape(), track);
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * factor;
  if (track) {
    Tape::active()->record([x, out, factor]() {
      if (!out.has_grad()) return;
      const auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * factor;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel plumbing

Tensor concat_channels(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  Shape out_shape = parts.front().shape();
  out_shape.c = 0;
  for (const Tensor& p : parts) {
    const Shape s = p.shape();
    require(s.n == out_shape.n && s.h == out_shape.h && s.w == out_shape.w,
            "concat_channels: spatial/batch extents differ (" + s.str() + " vs " +
                parts.front().shape().str() + ")");
    out_shape.c += s.c;
  }
  if (FlopCounter::active() != nullptr) return Tensor::shape_only(out_shape);

  bool track = false;
  if (Tape::active() != nullptr)
    for (const Tensor& p : parts) track = track || p.requires_grad();
  Tensor out = make_output(out_shape, track);
  const std::size_t plane = out_shape.plane();
  float* od = out.data().data();
  for (int n = 0; n < out_shape.n; ++n) {
    int c0 = 0;
    for (const Tensor& p : parts) {
      const int pc = p.shape().c;
      const float* src = p.data().data() + static_cast<std::size_t>(n) * pc * plane;
      std::copy_n(src, pc * plane,
                  od + (static_cast<std::size_t>(n) * out_shape.c + c0) * plane);
      c0 += pc;
    }
  }
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    Tape::active()->record([inputs, out]() {
      if (!out.has_grad()) return;
      const Shape os = out.shape();
      const std::size_t plane = os.plane();
      const float* go = out.grad().data();
      for (int n = 0; n < os.n; ++n) {
        int c0 = 0;
        for (const Tensor& p : inputs) {
          const int pc = p.shape().c;
          if (p.requires_grad()) {
            float* dst = p.grad().data() + static_cast<std::size_t>(n) * pc * plane;
            const float* src = go + (static_cast<std::size_t>(n) * os.c + c0) * plane;
            for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
          }
          c0 += pc;
        }
      }
    });
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& x, int chunks) {
  const Shape s = x.shape();
  require(chunks > 0 && s.c % chunks == 0,
          "split_channels: " + std::to_string(s.c) + " channels cannot split into " +
              std::to_string(chunks) + " equal chunks");
  const int pc = s.c / chunks;
  const Shape part_shape{s.n, pc, s.h, s.w};
  std::vector<Tensor> outs;
  outs.reserve(chunks);
  if (FlopCounter::active() != nullptr) {
    for (int k = 0; k < chunks; ++k) outs.push_back(Tensor::shape_only(part_shape));
    return outs;
  }
  const bool track = recording({&x});
  const std::size_t plane = s.plane();
  const float* xd = x.data().data();
  for (int k = 0; k < chunks; ++k) {
    Tensor part = make_output(part_shape, track);
    float* pd = part.data().data();
    for (int n = 0; n < s.n; ++n)
      std::copy_n(xd + (static_cast<std::size_t>(n) * s.c + k * pc) * plane, pc * plane,
                  pd + static_cast<std::size_t>(n) * pc * plane);
    if (track) {
      Tape::active()->record([x, part, k, pc]() {
        if (!part.has_grad()) return;
        const Shape s = x.shape();
        const std::size_t plane = s.plane();
        const float* gp = part.grad().data();
        float* gx = x.grad().data();
        for (int n = 0; n < s.n; ++n) {
          float* dst = gx + (static_cast<std::size_t>(n) * s.c + k * pc) * plane;
          const float* src = gp + static_cast<std::size_t>(n) * pc * plane;
          for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
        }
      });
    }
    outs.push_back(std::move(part));
  }
  return outs;
}

// ---------------------------------------------------------------------------
// upsample_bilinear

Tensor upsample_bilinear(const Tensor& x, int factor) {
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  const Shape in = x.shape();
  const Shape out_shape{in.n, in.c, in.h * factor, in.w * factor};
  if (FlopCounter* fc = FlopCounter::active()) {
    if (factor > 1) fc->elementwise_ops += 2 * out_shape.numel();
    return Tensor::shape_only(out_shape);
  }
  const bool track = recording({&x});
  Tensor out = make_output(out_shape, track);
  if (factor == 1) {
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
  } else {
    const auto rows = interp_table(in.h, factor);
    const auto cols = interp_table(in.w, factor);
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (std::size_t p = 0; p < static_cast<std::size_t>(in.n) * in.c; ++p) {
      const float* ip = xd + p * in.plane();
      float* op = od + p * out_shape.plane();
      for (int r = 0; r < out_shape.h; ++r) {
        const Interp& ry = rows[r];
        const float* r0 = ip + static_cast<std::size_t>(ry.i0) * in.w;
        const float* r1 = ip + static_cast<std::size_t>(ry.i1) * in.w;
        for (int c = 0; c < out_shape.w; ++c) {
          const Interp& cx = cols[c];
          const float top = r0[cx.i0] + (r0[cx.i1] - r0[cx.i0]) * cx.frac;
          const float bot = r1[cx.i0] + (r1[cx.i1] - r1[cx.i0]) * cx.frac;
          op[static_cast<std::size_t>(r) * out_shape.w + c] = top + (bot - top) * ry.frac;
        }
      }
    }
  }
  if (track) {
    Tape::active()->record([x, out, factor]() {
      if (!out.has_grad()) return;
      const Shape in = x.shape();
      const Shape os = out.shape();
      const float* go = out.grad().data();
      float* gx = x.grad().data();
      if (factor == 1) {
        for (std::size_t i = 0; i < os.numel(); ++i) gx[i] += go[i];
        return;
      }
      const auto rows = interp_table(in.h, factor);
      const auto cols = interp_table(in.w, factor);
      for (std::size_t p = 0; p < static_cast<std::size_t>(in.n) * in.c; ++p) {
        float* ip = gx + p * in.plane();
        const float* op = go + p * os.plane();
        for (int r = 0; r < os.h; ++r) {
          const Interp& ry = rows[r];
          float* r0 = ip + static_cast<std::size_t>(ry.i0) * in.w;
          float* r1 = ip + static_cast<std::size_t>(ry.i1) * in.w;
          for (int c = 0; c < os.w; ++c) {
            const Interp& cx = cols[c];
            const float g = op[static_cast<std::size_t>(r) * os.w + c];
            const float gt = g * (1.0f - ry.frac);
            const float gb = g * ry.frac;
            r0[cx.i0] += gt * (1.0f - cx.frac);
            r0[cx.i1] += gt * cx.frac;
            r1[cx.i0] += gb * (1.0f - cx.frac);
            r1[cx.i1] += gb * cx.frac;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / loss

Tensor sum(const Tensor& x) {
  const Shape scalar{1, 1, 1, 1};
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += x.numel();
    return Tensor::shape_only(scalar);
  }
  const bool track = recording({&x});
  Tensor out = make_output(scalar, track);
  double total = 0.0;
  for (float v : x.data()) total += v;
  out.data()[0] = static_cast<float>(total);
  if (track) {
    Tape::active()->record([x, out]() {
      if (!out.has_grad()) return;
      const float g = out.grad()[0];
      for (float& v : x.grad()) v += g;
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                             std::span<const float> class_weights) {
  const Shape s = logits.shape();
  require(s.c >= 2, "softmax_cross_entropy: needs at least 2 classes");
  require(labels.size() == static_cast<std::size_t>(s.n) * s.plane(),
          "softmax_cross_entropy: label count " + std::to_string(labels.size()) +
              " does not match logits " + s.str());
  require(class_weights.empty() || class_weights.size() == static_cast<std::size_t>(s.c),
          "softmax_cross_entropy: class_weights must have one entry per class");
  const Shape scalar{1, 1, 1, 1};
  if (FlopCounter* fc = FlopCounter::active()) {
    fc->elementwise_ops += 2 * s.numel();
    return Tensor::shape_only(scalar);
  }
  for (std::uint8_t l : labels)
    if (l >= s.c) throw DataError("softmax_cross_entropy: label out of range");

  const bool track = recording({&logits});
  Tensor out = make_output(scalar, track);
  const std::size_t plane = s.plane();
  const float* zd = logits.data().data();
  std::vector<float> probs(track ? s.numel() : 0);
  double total = 0.0;
  double weight_total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      float mx = zd[base + i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, zd[base + c * plane + i]);
      double denom = 0.0;
      for (int c = 0; c < s.c; ++c) denom += std::exp(static_cast<double>(zd[base + c * plane + i] - mx));
      const int y = labels[static_cast<std::size_t>(n) * plane + i];
      const double w = class_weights.empty() ? 1.0 : class_weights[y];
      total += w * (std::log(denom) - (zd[base + y * plane + i] - mx));
      weight_total += w;
      if (track)
        for (int c = 0; c < s.c; ++c)
          probs[base + c * plane + i] =
              static_cast<float>(std::exp(static_cast<double>(zd[base + c * plane + i] - mx)) / denom);
    }
  }
  if (weight_total <= 0.0) throw NumericError("softmax_cross_entropy: zero total class weight");
  out.data()[0] = static_cast<float>(total / weight_total);

  if (track) {
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    std::vector<float> cw(class_weights.begin(), class_weights.end());
    Tape::active()->record([logits, out, probs = std::move(probs), lab = std::move(lab),
                            cw = std::move(cw), weight_total]() {
      if (!out.has_grad()) return;
      const Shape s = logits.shape();
      const std::size_t plane = s.plane();
      const float g = out.grad()[0] / static_cast<float>(weight_total);
      float* gz = logits.grad().data();
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const int y = lab[static_cast<std::size_t>(n) * plane + i];
          const float w = cw.empty() ? 1.0f : cw[y];
          for (int c = 0; c < s.c; ++c) {
            const std::size_t k = base + c * plane + i;
            gz[k] += g * w * (probs[k] - (c == y ? 1.0f : 0.0f));
          }
        }
      }
    });
  }
  return out;
}

}  // namespace miniseg
