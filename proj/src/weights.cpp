// SPDX-License-Identifier: Apache-2.0
#include "miniseg/weights.hpp"

#include "miniseg/error.hpp"

namespace miniseg {

const char* role_name(Role role) {
  switch (role) {
    case Role::Kernel: return "kernel";
    case Role::Bias: return "bias";
    case Role::BnGamma: return "bn_gamma";
    case Role::BnBeta: return "bn_beta";
    case Role::BnMean: return "bn_mean";
    case Role::BnVar: return "bn_var";
    case Role::PreluAlpha: return "prelu_alpha";
  }
  return "unknown";
}

bool is_learnable(Role role) { return role != Role::BnMean && role != Role::BnVar; }

bool is_decayed(Role role) { return role == Role::Kernel || role == Role::Bias; }

Tensor ModelWeights::add(const std::string& name, Role role, Shape shape, float fill) {
  if (index_.count(name) != 0) throw UsageError("duplicate weight name " + name);
  Tensor t(shape, fill);
  if (is_learnable(role)) t.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, role, t});
  return t;
}

const WeightEntry* ModelWeights::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::size_t ModelWeights::learnable_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_)
    if (is_learnable(e.role)) total += e.tensor.numel();
  return total;
}

std::vector<const WeightEntry*> ModelWeights::learnable() const {
  std::vector<const WeightEntry*> out;
  for (const auto& e : entries_)
    if (is_learnable(e.role)) out.push_back(&e);
  return out;
}

void ModelWeights::zero_grad() {
  for (auto& e : entries_)
    if (is_learnable(e.role)) e.tensor.zero_grad();
}

}  // namespace miniseg
