#pragma once

// SVF volume files: "SVF1" | u8 dtype (0 = f32, 1 = u8) | u8 ndim |
// ndim x u32 LE extents | row-major payload (f32 little-endian).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "hyseg/errors.hpp"
#include "hyseg/tensor.hpp"

namespace hyseg {

enum class VolumeDType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct VolumeFile {
  Shape shape;
  std::variant<std::vector<float>, std::vector<std::uint8_t>> payload;

  VolumeDType dtype() const { return payload.index() == 0 ? VolumeDType::kF32 : VolumeDType::kU8; }
};

inline void write_volume(const std::string& path, const VolumeFile& v) {
  if (v.shape.empty() || v.shape.size() > 255) throw ArgumentError("SVF needs 1..255 dimensions");
  const std::size_t n = numel(v.shape);
  const std::size_t have = std::visit([](const auto& p) { return p.size(); }, v.payload);
  if (have != n) throw DimensionError("SVF payload has " + std::to_string(have) + " values for shape " + to_string(v.shape));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  std::vector<char> bytes{'S', 'V', 'F', '1', static_cast<char>(v.dtype()), static_cast<char>(v.shape.size())};
  auto put32 = [&](std::uint32_t x) {
    for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<char>((x >> s) & 0xff));
  };
  for (std::size_t d : v.shape) {
    if (d > 0xffffffffu) throw ArgumentError("SVF extent exceeds u32");
    put32(static_cast<std::uint32_t>(d));
  }
  if (const auto* f = std::get_if<std::vector<float>>(&v.payload)) {
    for (float x : *f) put32(std::bit_cast<std::uint32_t>(x));
  } else {
    const auto& u = std::get<std::vector<std::uint8_t>>(v.payload);
    bytes.insert(bytes.end(), u.begin(), u.end());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline VolumeFile read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 6 || std::memcmp(b.data(), "SVF1", 4) != 0) throw DataError(path + ": not an SVF1 file");
  const std::uint8_t dtype = b[4], nd = b[5];
  if (dtype > 1) throw DataError(path + ": unknown dtype code " + std::to_string(dtype));
  std::size_t pos = 6;
  auto get32 = [&]() {
    if (pos + 4 > b.size()) throw DataError(path + ": truncated");
    const std::uint32_t x = b[pos] | (b[pos + 1] << 8) | (b[pos + 2] << 16) | (static_cast<std::uint32_t>(b[pos + 3]) << 24);
    pos += 4;
    return x;
  };
  VolumeFile v;
  for (std::uint8_t d = 0; d < nd; ++d) v.shape.push_back(get32());
  const std::size_t n = numel(v.shape);
  const std::size_t width = dtype == 0 ? 4 : 1;
  if (b.size() - pos != n * width) {
    throw DataError(path + ": payload is " + std::to_string(b.size() - pos) + " bytes, expected " +
                    std::to_string(n * width));
  }
  if (dtype == 0) {
    std::vector<float> f(n);
    for (auto& x : f) x = std::bit_cast<float>(get32());
    v.payload = std::move(f);
  } else {
    v.payload = std::vector<std::uint8_t>(b.begin() + static_cast<std::ptrdiff_t>(pos), b.end());
  }
  return v;
}

}  // namespace hyseg
