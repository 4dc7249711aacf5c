// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "miniseg/tensor.hpp"

namespace miniseg {

enum class Role : std::uint8_t {
  Kernel = 0,
  Bias = 1,
  BnGamma = 2,
  BnBeta = 3,
  BnMean = 4,
  BnVar = 5,
  PreluAlpha = 6,
};

const char* role_name(Role role);
bool is_learnable(Role role);
/// Weight decay applies to kernels and biases only.
bool is_decayed(Role role);

struct WeightEntry {
  std::string name;
  Role role;
  Tensor tensor;
};

/// Named, ordered collection of every array a model owns. Enumeration order
/// is construction order.
class ModelWeights {
 public:
  /// Registers a new array; names must be unique.
  Tensor add(const std::string& name, Role role, Shape shape, float fill = 0.0f);

  const std::vector<WeightEntry>& entries() const { return entries_; }
  const WeightEntry* find(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }

  /// Number of learnable scalars (running statistics excluded).
  std::size_t learnable_count() const;
  std::vector<const WeightEntry*> learnable() const;

  void zero_grad();

 private:
  std::vector<WeightEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace miniseg
