#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/tensor.hpp"

// Binary layout (all integers 32-bit little-endian):
//   "SNCN" | version | entry count | entries...
//   entry: name length | UTF-8 name | rank | dims[rank] | float32 LE payload

namespace sncn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

using Checkpoint = std::vector<NamedTensor>;

namespace detail {

inline void put_u32(std::ostream &os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream &is, const char *what) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char *>(b.data()), 4))
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

inline void write_checkpoint(std::ostream &os, const Checkpoint &ckpt) {
  os.write("SNCN", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto &entry : ckpt) {
    detail::put_u32(os, static_cast<std::uint32_t>(entry.name.size()));
    os.write(entry.name.data(), static_cast<std::streamsize>(entry.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(entry.tensor.rank()));
    for (std::size_t d : entry.tensor.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : entry.tensor.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw FormatError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream &is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "SNCN", 4) != 0)
    throw FormatError("checkpoint: missing SNCN magic");
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "entry count");
  Checkpoint out;
  for (std::uint32_t e = 0; e < count; ++e) {
    NamedTensor entry;
    const std::uint32_t len = detail::get_u32(is, "name length");
    entry.name.resize(len);
    if (!is.read(entry.name.data(), len)) throw FormatError("checkpoint: truncated name");
    const std::uint32_t rank = detail::get_u32(is, "rank");
    if (rank > 4) throw FormatError("checkpoint: entry '" + entry.name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_u32(is, "dims"));
    std::vector<float> data(shape_numel(shape));
    for (auto &v : data) v = std::bit_cast<float>(detail::get_u32(is, "payload"));
    entry.tensor = Tensor<float>(std::move(shape), std::move(data));
    out.push_back(std::move(entry));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

} // namespace sncn
