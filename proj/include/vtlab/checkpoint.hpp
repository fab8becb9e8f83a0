#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtlab/nn.hpp"
#include "vtlab/tensor.hpp"

namespace vtlab {

// Versioned binary container of named parameter tensors. Values are stored
// as raw 64-bit doubles, so save/load round-trips bit-exactly.
namespace checkpoint {

constexpr char kMagic[4] = {'V', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

inline void save(const std::string& path, const ParamRegistry& reg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(kMagic, 4);
  auto write_u32 = [&f](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  write_u32(kVersion);
  write_u32(static_cast<uint32_t>(reg.items().size()));
  for (const auto& [name, t] : reg.items()) {
    write_u32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(static_cast<uint32_t>(t.ndim()));
    for (int d : t.shape()) {
      int32_t e = d;
      f.write(reinterpret_cast<const char*>(&e), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Loads into an existing registry; every stored tensor must match a
// registered name and shape, and every registered parameter must be present.
inline void load(const std::string& path, ParamRegistry& reg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  auto read_u32 = [&f, &path]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
    return v;
  };
  uint32_t version = read_u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = read_u32();
  if (count != reg.items().size())
    throw std::runtime_error("checkpoint: parameter count mismatch (file " +
                             std::to_string(count) + ", model " +
                             std::to_string(reg.items().size()) + ")");
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_u32();
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    uint32_t ndim = read_u32();
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      int32_t e = 0;
      f.read(reinterpret_cast<char*>(&e), 4);
      shape[d] = e;
    }
    Tensor* dst = reg.find(name);
    if (!dst) throw std::runtime_error("checkpoint: unknown parameter " + name);
    if (dst->shape() != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(dst->data()),
           static_cast<std::streamsize>(dst->numel() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint: truncated tensor data for " + name);
  }
}

}  // namespace checkpoint

}  // namespace vtlab
