#pragma once

#include <cstddef>
#include <utility>

#include "sncn/core/error.hpp"
#include "sncn/core/rng.hpp"
#include "sncn/data/image.hpp"
#include "sncn/norm/stats.hpp"

namespace sncn {

/// Per-RGB-channel statistics of one image (1×3 tensors).
inline ChannelStats<float> image_stats(const Tensor<float> &pixels) { return channel_stats(as_batch(pixels)); }

/// Re-renders `img` with `target` statistics, without clamping.
inline Tensor<float> restyle_image_unclamped(const Tensor<float> &img, const ChannelStats<float> &target) {
  const Tensor<float> batch = as_batch(img);
  return crossnorm_apply(batch, channel_stats(batch), target).reshaped(img.shape());
}

/// Both directions of the statistic swap, before clamping.
inline std::pair<Tensor<float>, Tensor<float>> rgb_stat_exchange_unclamped(const Tensor<float> &a,
                                                                           const Tensor<float> &b) {
  if (a.shape() != b.shape())
    throw ShapeError("rgb_stat_exchange: image shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  return {restyle_image_unclamped(a, image_stats(b)), restyle_image_unclamped(b, image_stats(a))};
}

/// Image-space exchange of RGB mean and std between two images.
inline std::pair<LabeledImage, LabeledImage> rgb_stat_exchange(const LabeledImage &a, const LabeledImage &b) {
  auto [x, y] = rgb_stat_exchange_unclamped(a.pixels, b.pixels);
  return {LabeledImage{clamp01(std::move(x)), a.label}, LabeledImage{clamp01(std::move(y)), b.label}};
}

/// Standardizes each channel and rescales it to `target` (1×3 stats).
inline LabeledImage rgb_stat_adjust(const LabeledImage &img, const ChannelStats<float> &target) {
  if (target.mean.shape() != Shape{1, 3} || target.std.shape() != Shape{1, 3})
    throw ShapeError("rgb_stat_adjust: target stats must be 1×3, got " + shape_str(target.mean.shape()));
  return {clamp01(restyle_image_unclamped(img.pixels, target)), img.label};
}

inline ChannelStats<float> rgb_target(float r_mean, float g_mean, float b_mean, float r_std, float g_std,
                                      float b_std) {
  return {Tensor<float>(Shape{1, 3}, {r_mean, g_mean, b_mean}), Tensor<float>(Shape{1, 3}, {r_std, g_std, b_std})};
}

inline constexpr std::size_t kAugmentPad = 4;

/// Optional horizontal flip, then an H×W crop at (top, left) of the
/// zero-padded canvas. Offset (pad, pad) is the centered crop.
inline LabeledImage weak_augment(const LabeledImage &img, bool flip, std::size_t top, std::size_t left) {
  const std::size_t H = img.height(), W = img.width();
  if (top > 2 * kAugmentPad || left > 2 * kAugmentPad)
    throw std::invalid_argument("weak_augment: crop offset outside the padded canvas");
  LabeledImage out{Tensor<float>(img.pixels.shape()), img.label};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto sy = static_cast<std::ptrdiff_t>(y + top) - static_cast<std::ptrdiff_t>(kAugmentPad);
        const auto sx = static_cast<std::ptrdiff_t>(x + left) - static_cast<std::ptrdiff_t>(kAugmentPad);
        if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(H) || sx >= static_cast<std::ptrdiff_t>(W)) continue;
        const std::size_t src_x = flip ? W - 1 - static_cast<std::size_t>(sx) : static_cast<std::size_t>(sx);
        out.pixels[(c * H + y) * W + x] = img.pixels[(c * H + static_cast<std::size_t>(sy)) * W + src_x];
      }
  return out;
}

/// Random flip (p = 0.5) and random crop from a 4-pixel zero-padded canvas.
inline LabeledImage weak_augment(const LabeledImage &img, Rng &rng) {
  if (img.pixels.rank() != 3 || img.pixels.dim(0) != 3)
    throw ShapeError("weak_augment: expected 3×H×W image, got " + shape_str(img.pixels.shape()));
  const bool flip = rng.bernoulli(0.5);
  const std::size_t top = rng.below(2 * kAugmentPad + 1);
  const std::size_t left = rng.below(2 * kAugmentPad + 1);
  return weak_augment(img, flip, top, left);
}

} // namespace sncn
