// SPDX-License-Identifier: Apache-2.0
#include "miniseg/reference.hpp"

#include <algorithm>
#include <cmath>

#include "miniseg/error.hpp"

namespace miniseg::reference {

RefTensor from_tensor(const Tensor& t) {
  RefTensor r(t.shape());
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) r.v[i] = d[i];
  return r;
}

Tensor to_tensor(const RefTensor& r) {
  std::vector<float> values(r.v.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(r.v[i]);
  return Tensor(r.shape, std::move(values));
}

RefTensor conv2d(const RefTensor& x, const RefTensor& w, const RefTensor* bias,
                 const ConvSpec& spec) {
  const Shape in = x.shape;
  const int oh = (in.h + 2 * spec.padding - spec.dilation * (spec.kernel_h - 1) - 1) / spec.stride + 1;
  const int ow = (in.w + 2 * spec.padding - spec.dilation * (spec.kernel_w - 1) - 1) / spec.stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("reference conv2d: empty output");
  RefTensor out({in.n, spec.out_channels, oh, ow});
  const int ipg = spec.in_channels / spec.groups;
  const int opg = spec.out_channels / spec.groups;
  for (int n = 0; n < in.n; ++n)
    for (int o = 0; o < spec.out_channels; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo) {
          double acc = bias ? bias->v[o] : 0.0;
          const int g = o / opg;
          for (int i = 0; i < ipg; ++i)
            for (int kh = 0; kh < spec.kernel_h; ++kh)
              for (int kw = 0; kw < spec.kernel_w; ++kw) {
                const int iy = y * spec.stride - spec.padding + kh * spec.dilation;
                const int ix = xo * spec.stride - spec.padding + kw * spec.dilation;
                if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
                acc += w.at(o, i, kh, kw) * x.at(n, g * ipg + i, iy, ix);
              }
          out.at(n, o, y, xo) = acc;
        }
  return out;
}

RefTensor avg_pool2d(const RefTensor& x, int stride) {
  const Shape in = x.shape;
  const int oh = (in.h - 1) / stride + 1;
  const int ow = (in.w - 1) / stride + 1;
  RefTensor out({in.n, in.c, oh, ow});
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c)
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          int count = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int iy = y * stride + dy;
              const int ix = xo * stride + dx;
              if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
              acc += x.at(n, c, iy, ix);
              ++count;
            }
          out.at(n, c, y, xo) = acc / count;
        }
  return out;
}

RefTensor batch_norm_train(const RefTensor& x, const RefTensor& gamma, const RefTensor& beta,
                           double eps) {
  const Shape s = x.shape;
  RefTensor out(s);
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    int count = 0;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo) {
          mean += x.at(n, c, y, xo);
          ++count;
        }
    mean /= count;
    double var = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo) var += (x.at(n, c, y, xo) - mean) * (x.at(n, c, y, xo) - mean);
    var /= count;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo)
          out.at(n, c, y, xo) =
              gamma.v[c] * (x.at(n, c, y, xo) - mean) / std::sqrt(var + eps) + beta.v[c];
  }
  return out;
}

RefTensor batch_norm_infer(const RefTensor& x, const RefTensor& gamma, const RefTensor& beta,
                           const RefTensor& mean, const RefTensor& var, double eps) {
  const Shape s = x.shape;
  RefTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo)
          out.at(n, c, y, xo) =
              gamma.v[c] * (x.at(n, c, y, xo) - mean.v[c]) / std::sqrt(var.v[c] + eps) + beta.v[c];
  return out;
}

RefTensor prelu(const RefTensor& x, const RefTensor& alpha) {
  const Shape s = x.shape;
  RefTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo) {
          const double v = x.at(n, c, y, xo);
          out.at(n, c, y, xo) = v >= 0.0 ? v : alpha.v[c] * v;
        }
  return out;
}

RefTensor sigmoid(const RefTensor& x) {
  RefTensor out(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = 1.0 / (1.0 + std::exp(-x.v[i]));
  return out;
}

RefTensor softmax_channels(const RefTensor& x) {
  const Shape s = x.shape;
  RefTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int xo = 0; xo < s.w; ++xo) {
        double denom = 0.0;
        for (int c = 0; c < s.c; ++c) denom += std::exp(x.at(n, c, y, xo));
        for (int c = 0; c < s.c; ++c) out.at(n, c, y, xo) = std::exp(x.at(n, c, y, xo)) / denom;
      }
  return out;
}

RefTensor add(const RefTensor& a, const RefTensor& b) {
  RefTensor out(a.shape);
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] + b.v[i];
  return out;
}

RefTensor mul_broadcast(const RefTensor& x, const RefTensor& a) {
  const Shape s = x.shape;
  RefTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xo = 0; xo < s.w; ++xo)
          out.at(n, c, y, xo) = x.at(n, c, y, xo) * a.at(n, a.shape.c == 1 ? 0 : c, y, xo);
  return out;
}

RefTensor concat_channels(std::span<const RefTensor> parts) {
  Shape s = parts.front().shape;
  s.c = 0;
  for (const auto& p : parts) s.c += p.shape.c;
  RefTensor out(s);
  for (int n = 0; n < s.n; ++n) {
    int base = 0;
    for (const auto& p : parts) {
      for (int c = 0; c < p.shape.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xo = 0; xo < s.w; ++xo) out.at(n, base + c, y, xo) = p.at(n, c, y, xo);
      base += p.shape.c;
    }
  }
  return out;
}

std::vector<RefTensor> split_channels(const RefTensor& x, int chunks) {
  const Shape s = x.shape;
  const int pc = s.c / chunks;
  std::vector<RefTensor> outs;
  for (int k = 0; k < chunks; ++k) {
    RefTensor part({s.n, pc, s.h, s.w});
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < pc; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xo = 0; xo < s.w; ++xo) part.at(n, c, y, xo) = x.at(n, k * pc + c, y, xo);
    outs.push_back(std::move(part));
  }
  return outs;
}

namespace {
void source_coord(int o, int factor, int extent, int& i0, int& i1, double& frac) {
  double src = (o + 0.5) / factor - 0.5;
  src = std::max(src, 0.0);
  i0 = std::min(static_cast<int>(std::floor(src)), extent - 1);
  i1 = std::min(i0 + 1, extent - 1);
  frac = src - i0;
}
}  // namespace

RefTensor upsample_bilinear(const RefTensor& x, int factor) {
  const Shape s = x.shape;
  RefTensor out({s.n, s.c, s.h * factor, s.w * factor});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h * factor; ++y)
        for (int xo = 0; xo < s.w * factor; ++xo) {
          int y0, y1, x0, x1;
          double fy, fx;
          source_coord(y, factor, s.h, y0, y1, fy);
          source_coord(xo, factor, s.w, x0, x1, fx);
          out.at(n, c, y, xo) = (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
                                fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
        }
  return out;
}

double softmax_cross_entropy(const RefTensor& logits, std::span<const std::uint8_t> labels) {
  const Shape s = logits.shape;
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int xo = 0; xo < s.w; ++xo) {
        double denom = 0.0;
        for (int c = 0; c < s.c; ++c) denom += std::exp(logits.at(n, c, y, xo));
        const int label = labels[(static_cast<std::size_t>(n) * s.h + y) * s.w + xo];
        total += std::log(denom) - logits.at(n, label, y, xo);
      }
  return total / (static_cast<double>(s.n) * s.h * s.w);
}

}  // namespace miniseg::reference
