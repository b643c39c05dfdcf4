// SPDX-License-Identifier: Apache-2.0
#include "hrpo/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace hrpo {

namespace {

constexpr char kMagic[4] = {'H', 'R', 'P', 'O'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CheckpointError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put_u32(os, ckpt.version);
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.empty()) throw CheckpointError("tensor records need a non-empty name");
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(tensor.shape().size()));
    for (int d : tensor.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < tensor.numel(); ++i)
      put_f32(os, static_cast<float>(tensor.at(i)));
  }
  put_u32(os, 0);  // record terminator
  for (std::uint64_t w : ckpt.rng_state) put_u64(os, w);
  put_u64(os, static_cast<std::uint64_t>(ckpt.step));
  os.flush();
  if (!os) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = get_u32(is);
  if (ckpt.version != 1)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version));
  for (;;) {
    const std::uint32_t name_len = get_u32(is);
    if (name_len == 0) break;
    if (name_len > 4096) throw CheckpointError("implausible tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError("checkpoint truncated");
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw CheckpointError("implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(is));
    const std::int64_t numel = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = static_cast<double>(get_f32(is));
    ckpt.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  for (auto& w : ckpt.rng_state) w = get_u64(is);
  ckpt.step = static_cast<long long>(get_u64(is));
  return ckpt;
}

void restore_tensor(const Checkpoint& ckpt, const std::string& name, Tensor dest) {
  const Tensor* src = ckpt.find(name);
  if (!src) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  if (src->shape() != dest.shape())
    throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src->shape()) +
                          ", expected " + shape_str(dest.shape()));
  std::copy_n(src->data(), src->numel(), dest.data());
}

}  // namespace hrpo
