#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/tensor.hpp"

namespace sncn {

/// 3×H×W pixels in [0, 1] plus a class index.
struct LabeledImage {
  Tensor<float> pixels;
  int label = 0;

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

enum class Split { train, test };

struct Dataset {
  std::vector<LabeledImage> images;
  Split split = Split::train;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
};

/// Stacks selected images into an N×3×H×W batch.
inline std::pair<Tensor<float>, std::vector<int>> make_batch(const Dataset &data,
                                                             std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("make_batch: no indices");
  const Shape &s = data.images.at(indices[0]).pixels.shape();
  const std::size_t plane = shape_numel(s);
  Tensor<float> batch(Shape{indices.size(), s[0], s[1], s[2]});
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const LabeledImage &img = data.images.at(indices[i]);
    if (img.pixels.shape() != s)
      throw ShapeError("make_batch: image " + std::to_string(indices[i]) + " has shape " +
                       shape_str(img.pixels.shape()) + ", expected " + shape_str(s));
    std::copy(img.pixels.storage().begin(), img.pixels.storage().end(), batch.storage().begin() + i * plane);
    labels.push_back(img.label);
  }
  return {std::move(batch), std::move(labels)};
}

/// Batch of a single image.
inline Tensor<float> as_batch(const Tensor<float> &pixels) {
  const Shape &s = pixels.shape();
  if (s.size() != 3) throw ShapeError("as_batch: expected 3×H×W image, got " + shape_str(s));
  return pixels.reshaped(Shape{1, s[0], s[1], s[2]});
}

inline Tensor<float> clamp01(Tensor<float> t) {
  for (auto &v : t.storage()) v = std::clamp(v, 0.0f, 1.0f);
  return t;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// ------------------------------------------------------------------ PPM (P6)

namespace detail {

inline std::size_t ppm_number(std::istream &in, const std::string &what) {
  int c = in.peek();
  for (;;) {
    while (c != EOF && std::isspace(c)) {
      in.get();
      c = in.peek();
    }
    if (c != '#') break;
    std::string comment;
    std::getline(in, comment);
    c = in.peek();
  }
  std::size_t v = 0;
  if (!(in >> v)) throw FormatError("ppm: could not read " + what);
  return v;
}

} // namespace detail

inline Tensor<float> read_ppm(std::istream &in, const std::string &source = "ppm") {
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw FormatError(source + ": not a binary PPM (P6)");
  const std::size_t w = detail::ppm_number(in, "width");
  const std::size_t h = detail::ppm_number(in, "height");
  const std::size_t maxval = detail::ppm_number(in, "maxval");
  if (w == 0 || h == 0) throw FormatError(source + ": zero-sized image");
  if (maxval != 255) throw FormatError(source + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  in.get(); // single whitespace before raster
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char *>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw FormatError(source + ": raster truncated after " + std::to_string(in.gcount()) + " of " +
                      std::to_string(raw.size()) + " bytes");
  Tensor<float> img(Shape{3, h, w});
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * h * w + p] = static_cast<float>(raw[p * 3 + c]) / 255.0f;
  return img;
}

inline Tensor<float> read_ppm(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path.string() + "'");
  return read_ppm(in, path.string());
}

/// Writes a 3×H×W image, clamped to [0, 1] and rounded to 8 bits.
inline void write_ppm(std::ostream &out, const Tensor<float> &img) {
  const Shape &s = img.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("write_ppm: expected 3×H×W image, got " + shape_str(s));
  const std::size_t h = s[1], w = s[2];
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(w * h * 3);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) raw[p * 3 + c] = to_byte(img[c * h * w + p]);
  out.write(reinterpret_cast<const char *>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline void write_ppm(const std::filesystem::path &path, const Tensor<float> &img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write image '" + path.string() + "'");
  write_ppm(out, img);
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

} // namespace sncn
