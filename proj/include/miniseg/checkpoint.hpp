// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miniseg/model.hpp"

namespace miniseg {

struct StoredTensor {
  std::string name;
  Role role = Role::Kernel;
  Shape shape;
  std::vector<float> values;
};

/// In-memory image of a checkpoint file.
///
/// Layout (little-endian): "MSG1", u32 version, 15 x u32 config
/// (C[4] N[4] M[4] K classes flags), u32 tensor count, then per tensor
/// u16 name length + name, u8 role, u8 rank, rank x u32 extents, f32 data.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  static Checkpoint capture(const MiniSeg& model);
  static Checkpoint read(const std::filesystem::path& path);
  static Checkpoint parse(const std::vector<std::uint8_t>& bytes);

  void write(const std::filesystem::path& path) const;
  std::vector<std::uint8_t> serialize() const;

  const MiniSegConfig& config() const { return config_; }
  const std::vector<StoredTensor>& tensors() const { return tensors_; }

 private:
  MiniSegConfig config_;
  std::vector<StoredTensor> tensors_;
};

void save_checkpoint(const MiniSeg& model, const std::filesystem::path& path);
/// Rebuilds the model recorded in the file and copies its arrays in.
MiniSeg load_checkpoint(const std::filesystem::path& path);

}  // namespace miniseg
