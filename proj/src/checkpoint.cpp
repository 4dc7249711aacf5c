// SPDX-License-Identifier: Apache-2.0
#include "miniseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "miniseg/error.hpp"

namespace miniseg {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'G', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw CheckpointError(CheckpointFault::Truncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " +
                                std::to_string(pos_));
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  float f32(const char* what) {
    const auto bits = le<std::uint32_t>(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(in_.begin() + static_cast<long>(pos_), in_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint Checkpoint::capture(const MiniSeg& model) {
  Checkpoint ckpt;
  ckpt.config_ = model.config();
  for (const WeightEntry& e : model.weights().entries()) {
    const auto data = e.tensor.data();
    ckpt.tensors_.push_back({e.name, e.role, e.tensor.shape(), {data.begin(), data.end()}});
  }
  return ckpt;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kVersion);
  for (const auto* arr : {&config_.channels, &config_.blocks, &config_.downsamplers})
    for (int v : *arr) w.le<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(config_.branches));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(config_.classes));
  w.le<std::uint32_t>(config_.ablations);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors_.size()));
  for (const StoredTensor& t : tensors_) {
    if (t.name.size() > 0xffff) throw UsageError("tensor name too long: " + t.name);
    w.le<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.role));
    w.le<std::uint8_t>(4);
    for (int e : {t.shape.n, t.shape.c, t.shape.h, t.shape.w}) w.le<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (float v : t.values) w.f32(v);
  }
  return w.take();
}

Checkpoint Checkpoint::parse(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointFault::BadMagic, "not a MiniSeg checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion)
    throw CheckpointError(CheckpointFault::VersionMismatch,
                          "checkpoint format version " + std::to_string(version) +
                              " is not supported (expected " + std::to_string(kVersion) + ")");
  Checkpoint ckpt;
  for (auto* arr : {&ckpt.config_.channels, &ckpt.config_.blocks, &ckpt.config_.downsamplers})
    for (int& v : *arr) v = static_cast<int>(r.le<std::uint32_t>("config"));
  ckpt.config_.branches = static_cast<int>(r.le<std::uint32_t>("config"));
  ckpt.config_.classes = static_cast<int>(r.le<std::uint32_t>("config"));
  ckpt.config_.ablations = r.le<std::uint32_t>("config");
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto len = r.le<std::uint16_t>("tensor name length");
    t.name = r.str(len, "tensor name");
    const auto role = r.le<std::uint8_t>("tensor role");
    if (role > static_cast<std::uint8_t>(Role::PreluAlpha))
      throw CheckpointError(CheckpointFault::Truncated,
                            "corrupt checkpoint: tensor '" + t.name + "' has unknown role " +
                                std::to_string(role));
    t.role = static_cast<Role>(role);
    const auto rank = r.le<std::uint8_t>("tensor rank");
    if (rank != 4)
      throw CheckpointError(CheckpointFault::Truncated,
                            "corrupt checkpoint: tensor '" + t.name + "' has rank " + std::to_string(rank));
    int ext[4];
    for (int& e : ext) e = static_cast<int>(r.le<std::uint32_t>("tensor extents"));
    t.shape = {ext[0], ext[1], ext[2], ext[3]};
    const std::size_t n = t.shape.numel();
    r.need(n * 4, "tensor data");
    t.values.resize(n);
    for (float& v : t.values) v = r.f32("tensor data");
    ckpt.tensors_.push_back(std::move(t));
  }
  if (!r.done())
    throw CheckpointError(CheckpointFault::Truncated, "corrupt checkpoint: trailing bytes after last tensor");
  return ckpt;
}

void Checkpoint::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointFault::Io, "cannot write checkpoint " + path.string());
}

Checkpoint Checkpoint::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointFault::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

void save_checkpoint(const MiniSeg& model, const std::filesystem::path& path) {
  Checkpoint::capture(model).write(path);
}

MiniSeg load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::read(path);
  MiniSeg model = MiniSeg::build(ckpt.config(), 0);
  model.load_weights(ckpt);
  return model;
}

}  // namespace miniseg
