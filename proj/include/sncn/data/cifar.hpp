#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/data/image.hpp"

namespace sncn {

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

inline std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
}

/// Parses CIFAR-10 binary records: label byte then 1024 R, 1024 G, 1024 B.
inline std::vector<LabeledImage> parse_cifar10(const std::vector<unsigned char> &bytes, const std::string &source) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    throw FormatError(source + ": truncated record at offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " of " + std::to_string(kCifarRecordBytes) + " bytes)");
  }
  std::vector<LabeledImage> out;
  out.reserve(bytes.size() / kCifarRecordBytes);
  const std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
    if (bytes[off] > 9)
      throw FormatError(source + ": label byte " + std::to_string(bytes[off]) + " at offset " + std::to_string(off) +
                        " exceeds 9");
    LabeledImage img{Tensor<float>(Shape{3, kCifarSide, kCifarSide}), bytes[off]};
    for (std::size_t i = 0; i < 3 * plane; ++i) img.pixels[i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

inline std::vector<LabeledImage> read_cifar10_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("missing CIFAR-10 file '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_cifar10(bytes, path.string());
}

struct CifarSplits {
  Dataset train, test;
};

/// Loads data_batch_1..5.bin and test_batch.bin from `dir`.
inline CifarSplits load_cifar10(const std::filesystem::path &dir) {
  CifarSplits out;
  out.train.split = Split::train;
  out.test.split = Split::test;
  out.train.class_names = out.test.class_names = cifar10_class_names();
  for (int i = 1; i <= 5; ++i) {
    auto part = read_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    std::move(part.begin(), part.end(), std::back_inserter(out.train.images));
  }
  out.test.images = read_cifar10_file(dir / "test_batch.bin");
  return out;
}

} // namespace sncn
