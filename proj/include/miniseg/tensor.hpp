// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace miniseg {

/// Extents of an NCHW tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool shape_only = false;
};
}  // namespace detail

/// Handle to a dense float32 NCHW array. Copies share storage; use clone()
/// for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  /// A tensor that carries extents but no storage. Produced by ops while a
  /// FlopCounter is active.
  static Tensor shape_only(Shape shape);

  bool defined() const { return node_ != nullptr; }
  bool is_shape_only() const { return node_ && node_->shape_only; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->shape.numel(); }

  /// Throws UsageError for shape-only tensors.
  std::span<float> data();
  std::span<const float> data() const;

  float& at(int n, int c, int h, int w);
  float at(int n, int c, int h, int w) const;
  float item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<float> grad() const;
  void zero_grad();
  void drop_grad();

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of differentiable ops. Ops append a backward closure when a
/// tape is active (see Tape::Scope) and any input requires grad.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> adjoint);

  /// Seeds d(loss)=1 and replays recorded adjoints in reverse order. The loss
  /// must be a single-element tensor produced on this tape. A tape can be
  /// replayed once; call reset() before reuse.
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Analytic operation counter. While a scope is active every op validates
/// shapes, tallies its cost and returns a shape-only tensor without computing.
struct FlopCounter {
  std::uint64_t conv_macs = 0;
  std::uint64_t elementwise_ops = 0;

  /// Convolutions cost 2 FLOPs per MAC; BN, activations, pooling and
  /// upsampling 2 per output element; add/mul 1 per output element.
  std::uint64_t flops() const { return 2 * conv_macs + elementwise_ops; }

  static FlopCounter* active();

  class Scope {
   public:
    explicit Scope(FlopCounter& counter);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    FlopCounter* previous_;
  };
};

}  // namespace miniseg
