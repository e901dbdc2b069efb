// Parameter checkpoint archive.
//
// Byte layout (all integers little-endian, payload little-endian float64):
//
//   offset  size  field
//   0       8     magic "MV3DPAR1"
//   8       4     u32 entry count
//   then per entry, in ascending name order:
//           4     u32 name length L
//           L     name bytes (UTF-8, dotted path, e.g. "decoder.layer0.self.wq")
//           4     u32 rank R
//           4*R   u32 dims
//           8*N   f64 values, N = product of dims, row-major
//
// The writer emits entries sorted by name, so identical parameter sets
// produce identical files.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/tensor.hpp"

namespace mv3d {

namespace detail {

static_assert(sizeof(double) == 8, "checkpoint format requires 64-bit doubles");

inline bool host_is_little_endian() {
  const uint32_t x = 1;
  return *reinterpret_cast<const uint8_t*>(&x) == 1;
}

inline void put_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                  static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  uint8_t b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[9] = "MV3DPAR1";

inline void save_checkpoint(const std::string& path, const ad::ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, static_cast<uint32_t>(store.count()));
  store.for_each([&](const ad::Param& p) {
    detail::put_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<uint32_t>(p.shape.size()));
    for (int d : p.shape) detail::put_u32(os, static_cast<uint32_t>(d));
    if (detail::host_is_little_endian()) {
      os.write(reinterpret_cast<const char*>(p.value.data()),
               static_cast<std::streamsize>(p.value.size() * 8));
    } else {
      for (double v : p.value) detail::put_f64(os, v);
    }
  });
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct CheckpointEntry {
  ad::Shape shape;
  std::vector<double> values;
};

inline std::map<std::string, CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("read_checkpoint: bad magic in " + path);
  uint32_t count = detail::get_u32(is);
  std::map<std::string, CheckpointEntry> out;
  for (uint32_t e = 0; e < count; ++e) {
    uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = detail::get_u32(is);
    CheckpointEntry entry;
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      entry.shape.push_back(static_cast<int>(detail::get_u32(is)));
      n *= entry.shape.back();
    }
    entry.values.resize(static_cast<size_t>(n));
    if (detail::host_is_little_endian()) {
      is.read(reinterpret_cast<char*>(entry.values.data()), static_cast<std::streamsize>(n * 8));
    } else {
      for (auto& v : entry.values) v = detail::get_f64(is);
    }
    if (!is) throw std::runtime_error("read_checkpoint: truncated file " + path);
    out.emplace(std::move(name), std::move(entry));
  }
  return out;
}

// Loads values into an existing store; every store parameter must be present
// with a matching shape.
inline void load_checkpoint(const std::string& path, ad::ParamStore& store) {
  auto entries = read_checkpoint(path);
  store.for_each([&](ad::Param& p) {
    auto it = entries.find(p.name);
    if (it == entries.end())
      throw std::runtime_error("load_checkpoint: missing parameter " + p.name);
    if (it->second.shape != p.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name);
    p.value = it->second.values;
  });
}

}  // namespace mv3d
