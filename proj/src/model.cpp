// SPDX-License-Identifier: Apache-2.0
#include "miniseg/model.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "miniseg/checkpoint.hpp"
#include "miniseg/error.hpp"

namespace miniseg {

std::uint32_t parse_ablations(std::string_view csv) {
  std::uint32_t flags = 0;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = std::min(csv.find(',', pos), csv.size());
    std::string_view token = csv.substr(pos, comma - pos);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) {
      auto it = std::find_if(kAblationNames.begin(), kAblationNames.end(),
                             [&](const auto& e) { return e.first == token; });
      if (it == kAblationNames.end())
        throw UsageError("unknown ablation '" + std::string(token) + "'");
      flags |= it->second;
    }
    pos = comma + 1;
  }
  return flags;
}

std::string format_ablations(std::uint32_t flags) {
  std::string out;
  for (const auto& [name, bit] : kAblationNames)
    if ((flags & bit) != 0) {
      if (!out.empty()) out += ",";
      out += name;
    }
  return out.empty() ? "none" : out;
}

int MiniSegConfig::downsampler_count(int stage) const {
  return has(kNoTwoPath) ? 0 : downsamplers.at(stage - 1);
}

int MiniSegConfig::head_count() const {
  if (has(kNoDecoder) || has(kNoDeepSupervision)) return 1;
  return 4;
}

void MiniSegConfig::validate() const {
  if (branches <= 0) throw UsageError("branch count K must be positive");
  if (classes < 2) throw UsageError("at least two classes are required");
  constexpr std::uint32_t known = (1u << kAblationNames.size()) - 1;
  if ((ablations & ~known) != 0) throw UsageError("unknown ablation bits set");
  for (int i = 0; i < 4; ++i) {
    const std::string stage = "stage " + std::to_string(i + 1);
    if (channels[i] <= 0 || blocks[i] <= 0 || downsamplers[i] <= 0)
      throw UsageError(stage + ": channel, block and downsampler counts must be positive");
    if (channels[i] % branches != 0)
      throw UsageError(stage + ": channels " + std::to_string(channels[i]) +
                       " not divisible by K=" + std::to_string(branches));
    if (downsamplers[i] >= blocks[i])
      throw UsageError(stage + ": downsampler count M must be smaller than block count N");
  }
}

const Shape* ForwardTrace::find(const std::string& name) const {
  for (const auto& [n, s] : features)
    if (n == name) return &s;
  return nullptr;
}

// ---------------------------------------------------------------------------

struct MiniSeg::Layers {
  struct Stage {
    std::optional<Conv> transition;
    std::vector<std::unique_ptr<Block>> blocks;
    std::vector<std::unique_ptr<Block>> downsamplers;
  };
  struct DecoderLevel {
    std::unique_ptr<Block> fusion;
    Conv lateral;
    BatchNorm lateral_bn;
    Activation act;
  };

  std::array<Stage, 4> stages;
  std::optional<Conv> top_conv;  // D_4 = BN(pointwise(E^4))
  std::optional<BatchNorm> top_bn;
  std::array<DecoderLevel, 3> levels;  // index 0 -> D_1
  std::vector<Conv> heads;             // index 0 -> P_1
};

MiniSeg::MiniSeg(const MiniSegConfig& config)
    : config_(config), layers_(std::make_unique<Layers>()) {}
MiniSeg::MiniSeg(MiniSeg&&) noexcept = default;
MiniSeg& MiniSeg::operator=(MiniSeg&&) noexcept = default;
MiniSeg::~MiniSeg() = default;

namespace {

std::unique_ptr<Block> make_encoder_block(const LayerFactory& f, const MiniSegConfig& cfg,
                                          int stage, int in, int out, int stride,
                                          const BlockOptions& opts) {
  if (stage == 1 && !cfg.has(kCbAsAhsp))
    return std::make_unique<ConvBlock>(f, in, out, stride, opts);
  if (cfg.has(kSingleBranch)) return std::make_unique<SingleBranchBlock>(f, in, out, stride, opts);
  return std::make_unique<AhspBlock>(f, in, out, stride, opts);
}

}  // namespace

MiniSeg MiniSeg::build(const MiniSegConfig& config, std::uint64_t seed) {
  config.validate();
  MiniSeg model(config);
  std::mt19937_64 rng(seed);
  LayerFactory root(model.weights_, rng);
  Layers& L = *model.layers_;

  BlockOptions opts;
  opts.branches = config.branches;
  opts.attention = !config.has(kNoAttention);
  opts.relu = config.has(kReluActivation);
  opts.db_kernel = config.has(kDbKernel3) ? 3 : 5;

  int prev_channels = 3;
  for (int i = 1; i <= 4; ++i) {
    Layers::Stage& st = L.stages[i - 1];
    const LayerFactory sf = root.sub("stage" + std::to_string(i));
    const int c = config.channels[i - 1];
    const int n = config.blocks[i - 1];
    const int m = config.downsampler_count(i);
    const int stride = (i == 4 && config.has(kNoDecoder)) ? 1 : 2;
    if (i > 1 && m > 0 && config.downsampler_count(i - 1) > 0 && !config.has(kNoChannelSplit))
      st.transition = sf.conv("transition",
                              ConvSpec::pointwise(2 * prev_channels, 2 * prev_channels, true));
    for (int j = 1; j <= n; ++j)
      st.blocks.push_back(make_encoder_block(sf.sub("e" + std::to_string(j)), config, i,
                                             j == 1 ? prev_channels : c, c, j == 1 ? stride : 1,
                                             opts));
    for (int k = 1; k <= m; ++k)
      st.downsamplers.push_back(std::make_unique<DownsamplerBlock>(
          sf.sub("q" + std::to_string(k)), k == 1 ? prev_channels : c, c, k == 1 ? stride : 1,
          opts));
    prev_channels = c;
  }

  const LayerFactory dec = root.sub("decoder");
  if (!config.has(kNoDecoder)) {
    const int c4 = config.channels[3];
    L.top_conv = dec.conv("d4.conv", ConvSpec::pointwise(c4, c4));
    L.top_bn = dec.bn("d4.bn", c4);
    for (int i = 3; i >= 1; --i) {
      Layers::DecoderLevel& lv = L.levels[i - 1];
      const int in = config.channels[i];
      const int out = config.channels[i - 1];
      const LayerFactory lf = dec.sub("d" + std::to_string(i));
      if (config.has(kFfmAsAhsp))
        lv.fusion = std::make_unique<AhspBlock>(lf.sub("fusion"), in, out, 1, opts);
      else
        lv.fusion = std::make_unique<FeatureFusionModule>(lf.sub("fusion"), in, out);
      lv.lateral = lf.conv("lateral.conv", ConvSpec::pointwise(out, out));
      lv.lateral_bn = lf.bn("lateral.bn", out);
      lv.act = lf.act("act", out, opts.relu);
    }
  }

  if (config.has(kNoDecoder)) {
    L.heads.push_back(
        root.conv("head1", ConvSpec::pointwise(config.channels[3], config.classes, true)));
  } else {
    for (int i = 1; i <= config.head_count(); ++i)
      L.heads.push_back(root.conv("head" + std::to_string(i),
                                  ConvSpec::pointwise(config.channels[i - 1], config.classes, true)));
  }
  return model;
}

const Block& MiniSeg::encoder_block(int stage, int index) const {
  return *layers_->stages.at(stage - 1).blocks.at(index - 1);
}

const Block& MiniSeg::downsampler_block(int stage, int index) const {
  return *layers_->stages.at(stage - 1).downsamplers.at(index - 1);
}

std::vector<Tensor> MiniSeg::forward(const Tensor& image, Mode mode, ForwardTrace* trace) const {
  const Shape in = image.shape();
  if (in.c != 3) throw ShapeError("network input must have 3 channels, got " + std::to_string(in.c));
  if (in.h <= 0 || in.w <= 0 || in.h % 16 != 0 || in.w % 16 != 0)
    throw ShapeError("input extent " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                     " is not divisible by 16; pad the image (see preprocess) first");
  const Layers& L = *layers_;
  auto note = [trace](const std::string& name, const Tensor& t) {
    if (trace != nullptr) trace->features.emplace_back(name, t.shape());
  };

  std::array<Tensor, 4> stage_out;
  Tensor e_prev = image;
  Tensor q_prev;  // undefined when the previous stage has no downsampler path
  for (int i = 1; i <= 4; ++i) {
    const Layers::Stage& st = L.stages[i - 1];
    const std::string tag = std::to_string(i);
    const int m = static_cast<int>(st.downsamplers.size());

    Tensor e_in = e_prev;
    Tensor q_in = e_prev;
    if (i > 1 && m > 0 && q_prev.defined()) {
      if (st.transition) {
        const Tensor pair[] = {e_prev, q_prev};
        const std::vector<Tensor> halves = split_channels((*st.transition)(concat_channels(pair)), 2);
        e_in = add(halves[0], e_prev);
        q_in = add(halves[1], q_prev);
      } else {
        e_in = q_in = add(e_prev, q_prev);
      }
    }

    std::vector<Tensor> e, q;
    e.push_back(st.blocks[0]->forward(e_in, mode));
    note("E" + tag + "_1", e.back());
    if (m > 0) {
      q.push_back(st.downsamplers[0]->forward(q_in, mode));
      note("Q" + tag + "_1", q.back());
    }
    const int n = static_cast<int>(st.blocks.size());
    for (int t = 2; t <= std::max(n, m); ++t) {
      if (t <= m) {
        const Tensor& q_last = q[t - 2];
        q.push_back(add(st.downsamplers[t - 1]->forward(add(q_last, e[t - 2]), mode), q_last));
        note("Q" + tag + "_" + std::to_string(t), q.back());
      }
      if (t <= n) {
        const Tensor& e_last = e[t - 2];
        Tensor block_in = e_last;
        if (m > 0) block_in = add(e_last, q[std::min(t - 1, m) - 1]);
        e.push_back(add(st.blocks[t - 1]->forward(block_in, mode), e_last));
        note("E" + tag + "_" + std::to_string(t), e.back());
      }
    }
    stage_out[i - 1] = e.back();
    e_prev = e.back();
    q_prev = m > 0 ? q.back() : Tensor();
  }

  std::vector<Tensor> logits;
  if (config_.has(kNoDecoder)) {
    const Tensor& top = stage_out[3];
    logits.push_back(upsample_bilinear(L.heads[0](top), in.h / top.shape().h));
    note("P1", logits.back());
  } else {
    std::array<Tensor, 4> d;
    d[3] = (*L.top_bn)((*L.top_conv)(stage_out[3]), mode);
    note("D4", d[3]);
    for (int i = 3; i >= 1; --i) {
      const Layers::DecoderLevel& lv = L.levels[i - 1];
      const Tensor fused = lv.fusion->forward(upsample_bilinear(d[i], 2), mode);
      d[i - 1] = lv.act(add(fused, lv.lateral_bn(lv.lateral(stage_out[i - 1]), mode)));
      note("D" + std::to_string(i), d[i - 1]);
    }
    const int heads = mode == Mode::Train ? static_cast<int>(L.heads.size()) : 1;
    for (int i = 1; i <= heads; ++i) {
      logits.push_back(upsample_bilinear(L.heads[i - 1](d[i - 1]), 1 << i));
      note("P" + std::to_string(i), logits.back());
    }
  }

  if (mode == Mode::Train) return logits;
  return {softmax_channels(logits.front())};
}

Tensor MiniSeg::infer(const Tensor& image) const { return forward(image, Mode::Infer).front(); }

ParameterReport MiniSeg::count_parameters() const {
  ParameterReport report;
  std::map<std::string, std::size_t> modules;
  std::vector<std::string> module_order;
  auto bump = [](std::vector<std::pair<std::string, std::size_t>>& list, const std::string& key,
                 std::size_t n) {
    for (auto& [k, v] : list)
      if (k == key) {
        v += n;
        return;
      }
    list.emplace_back(key, n);
  };
  for (const WeightEntry* e : weights_.learnable()) {
    const std::size_t n = e->tensor.numel();
    report.total += n;
    const std::size_t first = e->name.find('.');
    std::string module = e->name.substr(0, first);
    if (module.rfind("head", 0) == 0) module = "heads";
    bump(report.by_module, module, n);
    const std::size_t second = e->name.find('.', first + 1);
    bump(report.by_block, e->name.substr(0, second), n);
  }
  return report;
}

FlopReport MiniSeg::count_flops(int height, int width) const {
  FlopCounter counter;
  {
    FlopCounter::Scope scope(counter);
    forward(Tensor::shape_only({1, 3, height, width}), Mode::Infer);
  }
  return {counter.flops(), counter.conv_macs, counter.elementwise_ops};
}

void MiniSeg::load_weights(const Checkpoint& ckpt) {
  const auto& entries = weights_.entries();
  const auto& stored = ckpt.tensors();
  const std::size_t common = std::min(entries.size(), stored.size());
  for (std::size_t i = 0; i < common; ++i) {
    const WeightEntry& e = entries[i];
    const StoredTensor& s = stored[i];
    if (s.name != e.name || s.shape != e.tensor.shape() || s.role != e.role)
      throw CheckpointError(CheckpointFault::ShapeMismatch,
                            "checkpoint tensor #" + std::to_string(i) + " '" + s.name + "' (" +
                                s.shape.str() + ") does not match model tensor '" + e.name +
                                "' (" + e.tensor.shape().str() + ")");
  }
  if (entries.size() != stored.size()) {
    const std::string name = entries.size() > stored.size() ? entries[common].name : stored[common].name;
    throw CheckpointError(CheckpointFault::ShapeMismatch,
                          "checkpoint holds " + std::to_string(stored.size()) +
                              " tensors, model expects " + std::to_string(entries.size()) +
                              "; first unmatched tensor '" + name + "'");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    std::copy(stored[i].values.begin(), stored[i].values.end(), t.data().begin());
  }
}

}  // namespace miniseg
