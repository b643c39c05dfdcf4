// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hrpo/tensor.hpp"

namespace hrpo {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary layout (all integers little-endian):
//   magic "HRPO", version u32
//   repeated tensor records: [name_len u32, name bytes, rank u32,
//                             dims u32 x rank, payload f32 x numel]
//   a zero name_len terminates the records
//   trailer: rng state (4 x u64) and step (u64)
// Tensors are stored at 32-bit precision; save(load(x)) is bit-exact.
struct Checkpoint {
  std::uint32_t version = 1;
  long long step = 0;
  std::array<std::uint64_t, 4> rng_state{};
  // Insertion-ordered tensor records.
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
  bool has(const std::string& name) const { return find(name) != nullptr; }
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies stored values into a destination tensor, validating the shape.
void restore_tensor(const Checkpoint& ckpt, const std::string& name, Tensor dest);

}  // namespace hrpo
