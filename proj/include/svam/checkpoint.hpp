#pragma once

#include <string>
#include <vector>

#include "svam/tensor.hpp"

namespace svam::ckpt {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  uint64_t config_hash = 0;

  const NamedTensor* find(const std::string& name) const;
};

void save(const std::string& path, const Checkpoint& ck);
Checkpoint load(const std::string& path);

// Parameter helpers. Loading verifies names and shapes and fails loudly on a
// mismatch; the stored config hash is the caller's compatibility contract.
void dump_params(const ParamStore& params, Checkpoint& ck, const std::string& prefix = "");
void load_params(ParamStore& params, const Checkpoint& ck, const std::string& prefix = "");

// Optimizer state rides along as named tensors (adam.m.*, adam.v.*, adam.step).
void dump_adam(const Adam& opt, const ParamStore& params, Checkpoint& ck);
void load_adam(Adam& opt, const ParamStore& params, const Checkpoint& ck);

}  // namespace svam::ckpt
