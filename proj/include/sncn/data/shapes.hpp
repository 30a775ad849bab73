#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sncn/core/rng.hpp"
#include "sncn/data/image.hpp"

namespace sncn {

using Rgb = std::array<float, 3>;

/// Foreground/background colors images are painted with. Each image draws
/// one of each (distinct) and perturbs every channel by ±jitter.
struct StylePalette {
  std::string name;
  std::vector<Rgb> foreground;
  std::vector<Rgb> background;
  float jitter = 0.05f;
};

/// Warm, saturated shapes on dark grounds.
inline StylePalette train_palette() {
  return {"train",
          {{0.90f, 0.20f, 0.20f}, {0.95f, 0.60f, 0.10f}, {0.90f, 0.85f, 0.20f}, {0.95f, 0.95f, 0.90f}},
          {{0.10f, 0.10f, 0.30f}, {0.05f, 0.05f, 0.05f}, {0.10f, 0.30f, 0.10f}, {0.25f, 0.10f, 0.25f}},
          0.05f};
}

/// Cool hues on muddier grounds with less contrast.
inline StylePalette shifted_palette() {
  return {"shifted",
          {{0.30f, 0.85f, 0.85f}, {0.65f, 0.50f, 0.95f}, {0.45f, 0.90f, 0.45f}},
          {{0.35f, 0.22f, 0.12f}, {0.30f, 0.30f, 0.42f}, {0.42f, 0.12f, 0.14f}},
          0.05f};
}

enum class ShapeClass { disk = 0, square = 1, triangle = 2, cross = 3 };

inline std::vector<std::string> shape_class_names() { return {"disk", "square", "triangle", "cross"}; }

inline constexpr std::size_t kShapeSide = 32;

namespace detail {

inline bool inside_shape(ShapeClass k, double dx, double dy, double r) {
  switch (k) {
  case ShapeClass::disk: return dx * dx + dy * dy <= r * r;
  case ShapeClass::square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
  case ShapeClass::triangle: {
    // Apex up, base at +0.8r.
    if (dy > 0.8 * r || dy < -r) return false;
    const double half = 0.95 * r * (dy + r) / (1.8 * r);
    return std::abs(dx) <= half;
  }
  case ShapeClass::cross: {
    const double arm = r / 3.0;
    return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
  }
  }
  return false;
}

inline Rgb jittered(const Rgb &c, float jitter, Rng &rng) {
  Rgb out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = std::clamp(c[i] + static_cast<float>(rng.uniform(-jitter, jitter)), 0.0f, 1.0f);
  return out;
}

} // namespace detail

/// Renders one anti-aliased shape (3×3 supersampling).
inline Tensor<float> render_shape(ShapeClass k, double cx, double cy, double r, const Rgb &fg, const Rgb &bg) {
  constexpr std::size_t S = kShapeSide;
  Tensor<float> img(Shape{3, S, S});
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / 3.0, py = static_cast<double>(y) + (sy + 0.5) / 3.0;
          hits += detail::inside_shape(k, px - cx, py - cy, r);
        }
      const float a = static_cast<float>(hits) / 9.0f;
      for (std::size_t c = 0; c < 3; ++c) img[(c * S + y) * S + x] = a * fg[c] + (1.0f - a) * bg[c];
    }
  return img;
}

/// Synthetic 4-class shapes dataset; class = shape, style = palette colors.
/// Images are interleaved by class (0, 1, 2, 3, 0, ...).
inline Dataset gen_shapes(std::size_t n_per_class, std::uint64_t seed, const StylePalette &palette,
                          Split split = Split::train) {
  if (n_per_class < 1) throw std::invalid_argument("gen_shapes: n_per_class must be at least 1");
  if (palette.foreground.empty() || palette.background.empty())
    throw std::invalid_argument("gen_shapes: palette '" + palette.name + "' is empty");
  Dataset out;
  out.split = split;
  out.class_names = shape_class_names();
  Rng root = Rng(seed).derive("shapes").derive(palette.name);
  for (std::size_t i = 0; i < n_per_class; ++i)
    for (int k = 0; k < 4; ++k) {
      Rng rng = root.derive(i * 4 + static_cast<std::size_t>(k));
      const std::size_t fi = rng.below(palette.foreground.size());
      const std::size_t bi = rng.below(palette.background.size());
      const Rgb fg = detail::jittered(palette.foreground[fi], palette.jitter, rng);
      const Rgb bg = detail::jittered(palette.background[bi], palette.jitter, rng);
      const double r = rng.uniform(7.0, 11.0);
      const double cx = 16.0 + rng.uniform(-4.0, 4.0), cy = 16.0 + rng.uniform(-4.0, 4.0);
      out.images.push_back({render_shape(static_cast<ShapeClass>(k), cx, cy, r, fg, bg), k});
    }
  return out;
}

} // namespace sncn
