// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "miniseg/blocks.hpp"

namespace miniseg {

/// Architecture ablations, one bit each.
enum Ablation : std::uint32_t {
  kSingleBranch = 1u << 0,       // AHSP -> single dilation-1 depthwise branch
  kNoAttention = 1u << 1,        // drop the attention map (Fa_k = Fh_k)
  kNoTwoPath = 1u << 2,          // no downsampler path (M_i = 0)
  kNoChannelSplit = 1u << 3,     // stage hand-off by plain sum instead of concat-fuse-split
  kReluActivation = 1u << 4,     // ReLU instead of PReLU everywhere
  kNoDecoder = 1u << 5,          // predict from 1/8 scale, last stage stride 1
  kNoDeepSupervision = 1u << 6,  // only the full-resolution head
  kCbAsAhsp = 1u << 7,           // AHSP blocks in stage 1
  kDbKernel3 = 1u << 8,          // 3x3 depthwise in downsampler blocks
  kFfmAsAhsp = 1u << 9,          // AHSP blocks in place of the decoder fusion modules
};

inline constexpr std::array<std::pair<std::string_view, Ablation>, 10> kAblationNames{{
    {"single_branch", kSingleBranch},
    {"no_attention", kNoAttention},
    {"no_two_path", kNoTwoPath},
    {"no_channel_split", kNoChannelSplit},
    {"relu_activation", kReluActivation},
    {"no_decoder", kNoDecoder},
    {"no_deep_supervision", kNoDeepSupervision},
    {"cb_as_ahsp", kCbAsAhsp},
    {"db_kernel_3", kDbKernel3},
    {"ffm_as_ahsp", kFfmAsAhsp},
}};

/// Parses a comma separated list of ablation names. Throws UsageError on
/// unknown names.
std::uint32_t parse_ablations(std::string_view csv);
std::string format_ablations(std::uint32_t flags);

struct MiniSegConfig {
  std::array<int, 4> channels{8, 24, 32, 64};
  std::array<int, 4> blocks{3, 4, 9, 9};
  std::array<int, 4> downsamplers{2, 2, 5, 4};
  int branches = 4;
  int classes = 2;
  std::uint32_t ablations = 0;

  bool has(Ablation a) const { return (ablations & a) != 0; }
  /// M_i after ablations (0 when the two-path design is disabled).
  int downsampler_count(int stage) const;
  int head_count() const;
  void validate() const;
  bool operator==(const MiniSegConfig&) const = default;
};

/// Feature shapes observed during a forward pass, in evaluation order.
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> features;
  const Shape* find(const std::string& name) const;
};

struct ParameterReport {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> by_module;  // stage1..4, decoder, heads
  std::vector<std::pair<std::string, std::size_t>> by_block;   // two-level names
};

struct FlopReport {
  std::uint64_t flops = 0;
  std::uint64_t conv_macs = 0;
  std::uint64_t elementwise_ops = 0;
  static constexpr const char* kConvention =
      "FLOPs = 2 x conv MACs + 2 per output element of BN/activation/pool/upsample/softmax"
      " + 1 per output element of add/mul; inference graph, batch 1";
};

class Checkpoint;

class MiniSeg {
 public:
  /// Builds the network with deterministic initialization from seed.
  static MiniSeg build(const MiniSegConfig& config, std::uint64_t seed);

  MiniSeg(MiniSeg&&) noexcept;
  MiniSeg& operator=(MiniSeg&&) noexcept;
  ~MiniSeg();

  /// Train mode returns the pre-softmax logits of every head, each upsampled
  /// to the input extent (P_1 first). Infer mode returns {softmax(P_1)}.
  /// Input is N x 3 x H x W with H and W divisible by 16.
  std::vector<Tensor> forward(const Tensor& image, Mode mode, ForwardTrace* trace = nullptr) const;

  /// softmax(P_1); never mutates batch-norm statistics.
  Tensor infer(const Tensor& image) const;

  const MiniSegConfig& config() const { return config_; }
  ModelWeights& weights() { return weights_; }
  const ModelWeights& weights() const { return weights_; }

  ParameterReport count_parameters() const;
  FlopReport count_flops(int height, int width) const;

  /// Copies arrays from a checkpoint. Names, order and shapes must match this
  /// model exactly; the first offending tensor is named in the error.
  void load_weights(const Checkpoint& ckpt);

  /// Encoder blocks for inspection (stage and index are 1-based).
  const Block& encoder_block(int stage, int index) const;
  const Block& downsampler_block(int stage, int index) const;

 private:
  struct Layers;
  explicit MiniSeg(const MiniSegConfig& config);

  MiniSegConfig config_;
  ModelWeights weights_;
  std::unique_ptr<Layers> layers_;
};

}  // namespace miniseg
