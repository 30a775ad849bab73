#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/rng.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"

namespace sncn {

/// Added to the population variance before every square root.
inline constexpr double kStatEps = 1e-5;

/// Square crop of an H×W map. `ratio` is side²/(H·W).
struct CropSpec {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t side = 1;
  double ratio = 1.0;
};

/// Axis-aligned window used for statistics and restyling.
struct Region {
  std::size_t top = 0, left = 0, height = 0, width = 0;

  static Region full(std::size_t h, std::size_t w) { return {0, 0, h, w}; }
  static Region of(const CropSpec &c) { return {c.top, c.left, c.side, c.side}; }

  std::size_t count() const { return height * width; }
  bool fits(std::size_t h, std::size_t w) const {
    return height >= 1 && width >= 1 && top + height <= h && left + width <= w;
  }
};

/// Per-(instance, channel) mean and ε-stabilized population std.
template <typename T> struct ChannelStats {
  Tensor<T> mean; // N×C
  Tensor<T> std;  // N×C

  std::size_t instances() const { return mean.dim(0); }
  std::size_t channels() const { return mean.dim(1); }

  /// Packed N×C×2 layout (mean, std) used by the tape ops.
  Tensor<T> packed() const {
    Tensor<T> out(Shape{instances(), channels(), 2});
    for (std::size_t i = 0; i < mean.size(); ++i) {
      out[2 * i] = mean[i];
      out[2 * i + 1] = std[i];
    }
    return out;
  }

  static ChannelStats unpack(const Tensor<T> &packed) {
    const Shape &s = packed.shape();
    if (s.size() != 3 || s[2] != 2) throw ShapeError("channel stats: packed shape " + shape_str(s));
    ChannelStats out{Tensor<T>(Shape{s[0], s[1]}), Tensor<T>(Shape{s[0], s[1]})};
    for (std::size_t i = 0; i < out.mean.size(); ++i) {
      out.mean[i] = packed[2 * i];
      out.std[i] = packed[2 * i + 1];
    }
    return out;
  }
};

namespace detail {

inline void expect_nchw(const std::string &kind, const Shape &s) {
  if (s.size() != 4) throw ShapeError(kind + ": expected N×C×H×W input, got " + shape_str(s));
}

/// Two-pass mean / ε-std of one window of one channel plane.
template <typename T>
void window_moments(const T *plane, std::size_t width, const Region &r, T &mean, T &stddev) {
  T acc{};
  for (std::size_t h = r.top; h < r.top + r.height; ++h)
    for (std::size_t w = r.left; w < r.left + r.width; ++w) acc += plane[h * width + w];
  const T count = static_cast<T>(r.count());
  mean = acc / count;
  T var{};
  for (std::size_t h = r.top; h < r.top + r.height; ++h)
    for (std::size_t w = r.left; w < r.left + r.width; ++w) {
      const T d = plane[h * width + w] - mean;
      var += d * d;
    }
  stddev = std::sqrt(var / count + static_cast<T>(kStatEps));
}

} // namespace detail

/// Statistics over the full spatial extent, or over `region` when given.
template <typename T>
ChannelStats<T> channel_stats(const Tensor<T> &x, const std::optional<CropSpec> &region = std::nullopt) {
  sncn::detail::expect_nchw("channel_stats", x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Region r = region ? Region::of(*region) : Region::full(H, W);
  if (!r.fits(H, W))
    throw ShapeError("channel_stats: crop at (" + std::to_string(r.top) + "," + std::to_string(r.left) +
                     ") side " + std::to_string(r.height) + " does not fit " + std::to_string(H) + "x" +
                     std::to_string(W));
  ChannelStats<T> out{Tensor<T>(Shape{N, C}), Tensor<T>(Shape{N, C})};
  for (std::size_t i = 0; i < N * C; ++i)
    sncn::detail::window_moments(x.data().data() + i * H * W, W, r, out.mean[i], out.std[i]);
  return out;
}

template <typename T> void check_stats_shape(const std::string &kind, const Tensor<T> &x, const ChannelStats<T> &s) {
  const Shape want{x.dim(0), x.dim(1)};
  if (s.mean.shape() != want || s.std.shape() != want)
    throw ShapeError(kind + ": stats " + shape_str(s.mean.shape()) + "/" + shape_str(s.std.shape()) +
                     " do not match input " + shape_str(x.shape()));
}

/// (x - mean) / std per (instance, channel).
template <typename T> Tensor<T> standardize(const Tensor<T> &x, const ChannelStats<T> &stats) {
  sncn::detail::expect_nchw("standardize", x.shape());
  check_stats_shape("standardize", x, stats);
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t j = 0; j < hw; ++j) out[p * hw + j] = (x[p * hw + j] - stats.mean[p]) / stats.std[p];
  return out;
}

/// Re-renders standardized content with donor statistics:
/// donor_std * (x - content_mean) / content_std + donor_mean.
template <typename T>
Tensor<T> crossnorm_apply(const Tensor<T> &content, const ChannelStats<T> &content_stats,
                          const ChannelStats<T> &donor_stats) {
  sncn::detail::expect_nchw("crossnorm_apply", content.shape());
  check_stats_shape("crossnorm_apply", content, content_stats);
  check_stats_shape("crossnorm_apply", content, donor_stats);
  const std::size_t planes = content.dim(0) * content.dim(1), hw = content.dim(2) * content.dim(3);
  Tensor<T> out(content.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T scale = donor_stats.std[p] / content_stats.std[p];
    for (std::size_t j = 0; j < hw; ++j)
      out[p * hw + j] = scale * (content[p * hw + j] - content_stats.mean[p]) + donor_stats.mean[p];
  }
  return out;
}

/// Square crop whose area ratio is drawn uniformly from [t, 1].
///
/// The side is rounded from sqrt(ratio·H·W), then grown if rounding dropped
/// the realized ratio below t, and finally clamped to min(H, W). For maps so
/// elongated that min(H, W)² < t·H·W the largest inscribed square is returned.
inline CropSpec sample_crop(std::size_t height, std::size_t width, double threshold, Rng &rng) {
  if (height == 0 || width == 0) throw ShapeError("sample_crop: empty map");
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw std::invalid_argument("sample_crop: threshold must be in (0, 1], got " + std::to_string(threshold));
  const double area = static_cast<double>(height * width);
  const std::size_t max_side = std::min(height, width);
  const double ratio = rng.uniform(threshold, 1.0);
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(ratio * area)));
  side = std::clamp<std::size_t>(side, 1, max_side);
  while (side < max_side && static_cast<double>(side * side) < threshold * area) ++side;
  CropSpec crop;
  crop.side = side;
  crop.top = rng.below(height - side + 1);
  crop.left = rng.below(width - side + 1);
  crop.ratio = static_cast<double>(side * side) / area;
  return crop;
}

namespace ops {

/// Where each output (n, c) statistic is read from, and over which window.
struct MomentPlan {
  std::size_t instances = 0, channels = 0;
  std::vector<std::size_t> source_instance; // N*C
  std::vector<std::size_t> source_channel;  // N*C
  std::vector<Region> regions;              // per output instance n

  static MomentPlan identity(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    MomentPlan plan{n, c, {}, {}, std::vector<Region>(n, Region::full(h, w))};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        plan.source_instance.push_back(i);
        plan.source_channel.push_back(j);
      }
    return plan;
  }
};

/// Packed N×C×2 (mean, std) gathered according to `plan`.
template <typename T> Var<T> moments(Var<T> x, MomentPlan plan) {
  const std::string kind = "channel_moments";
  sncn::detail::expect_nchw(kind, x.shape());
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (plan.instances != N || plan.channels != C || plan.source_instance.size() != N * C ||
      plan.source_channel.size() != N * C || plan.regions.size() != N)
    throw ShapeError(kind + ": plan does not match input " + shape_str(x.shape()));
  for (const Region &r : plan.regions)
    if (!r.fits(H, W)) throw ShapeError(kind + ": region does not fit " + shape_str(x.shape()));
  Tensor<T> out(Shape{N, C, 2});
  const auto &xv = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = n * C + c;
      if (plan.source_instance[i] >= N || plan.source_channel[i] >= C)
        throw ShapeError(kind + ": plan source out of range");
      const T *plane = xv.data().data() + (plan.source_instance[i] * C + plan.source_channel[i]) * H * W;
      sncn::detail::window_moments(plane, W, plan.regions[n], out[2 * i], out[2 * i + 1]);
    }
  const Tensor<T> saved = out;
  return x.tape->record(kind, std::move(out), {x}, [x, plan, saved, C, H, W](Tape<T> &tape, const Tensor<T> &gout) {
    Tensor<T> *gx = tape.grad_for(x);
    if (!gx) return;
    const auto &xv = tape.value(x);
    for (std::size_t i = 0; i < plan.instances * C; ++i) {
      const Region &r = plan.regions[i / C];
      const std::size_t base = (plan.source_instance[i] * C + plan.source_channel[i]) * H * W;
      const T count = static_cast<T>(r.count());
      const T mean = saved[2 * i], stddev = saved[2 * i + 1];
      const T g_mean = gout[2 * i] / count;
      const T g_std = gout[2 * i + 1] / (count * stddev);
      for (std::size_t h = r.top; h < r.top + r.height; ++h)
        for (std::size_t w = r.left; w < r.left + r.width; ++w) {
          const std::size_t j = base + h * W + w;
          (*gx)[j] += g_mean + g_std * (xv[j] - mean);
        }
    }
  });
}

/// Inside each instance's region: donor_std·(x − content_mean)/content_std + donor_mean.
/// Outside the region the input passes through.
template <typename T>
Var<T> restyle(Var<T> x, Var<T> content, Var<T> donor, std::vector<Region> regions) {
  const std::string kind = "restyle";
  sncn::detail::expect_nchw(kind, x.shape());
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const Shape stat_shape{N, C, 2};
  if (content.shape() != stat_shape || donor.shape() != stat_shape || regions.size() != N)
    throw ShapeError(kind + ": statistics " + shape_str(content.shape()) + "/" + shape_str(donor.shape()) +
                     " do not match input " + shape_str(x.shape()));
  Tensor<T> out = x.value();
  const auto &cs = content.value();
  const auto &ds = donor.value();
  for (std::size_t i = 0; i < N * C; ++i) {
    const Region &r = regions[i / C];
    const T scale = ds[2 * i + 1] / cs[2 * i + 1];
    T *plane = out.data().data() + i * H * W;
    for (std::size_t h = r.top; h < r.top + r.height; ++h)
      for (std::size_t w = r.left; w < r.left + r.width; ++w)
        plane[h * W + w] = scale * (plane[h * W + w] - cs[2 * i]) + ds[2 * i];
  }
  return x.tape->record(kind, std::move(out), {x, content, donor},
                        [x, content, donor, regions, C, H, W](Tape<T> &tape, const Tensor<T> &gout) {
    const auto &xv = tape.value(x);
    const auto &cs = tape.value(content);
    const auto &ds = tape.value(donor);
    Tensor<T> *gx = tape.grad_for(x);
    Tensor<T> *gc = tape.grad_for(content);
    Tensor<T> *gd = tape.grad_for(donor);
    if (gx)
      for (std::size_t j = 0; j < gout.size(); ++j) (*gx)[j] += gout[j];
    for (std::size_t i = 0; i < regions.size() * C; ++i) {
      const Region &r = regions[i / C];
      const T cm = cs[2 * i], csd = cs[2 * i + 1], dsd = ds[2 * i + 1];
      const T scale = dsd / csd;
      T sum_g{}, sum_gz{};
      const std::size_t base = i * H * W;
      for (std::size_t h = r.top; h < r.top + r.height; ++h)
        for (std::size_t w = r.left; w < r.left + r.width; ++w) {
          const std::size_t j = base + h * W + w;
          const T z = (xv[j] - cm) / csd;
          sum_g += gout[j];
          sum_gz += gout[j] * z;
          if (gx) (*gx)[j] += gout[j] * (scale - T{1});
        }
      if (gc) {
        (*gc)[2 * i] += -scale * sum_g;
        (*gc)[2 * i + 1] += -scale * sum_gz;
      }
      if (gd) {
        (*gd)[2 * i] += sum_g;
        (*gd)[2 * i + 1] += sum_gz;
      }
    }
  });
}

} // namespace ops
} // namespace sncn
