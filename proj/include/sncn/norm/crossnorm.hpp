#pragma once

#include <cstddef>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sncn/core/rng.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"
#include "sncn/norm/stats.hpp"

namespace sncn {

enum class CnMode { one_instance, two_instance };
enum class CropChoice { neither, content, style, both };

inline std::string_view to_string(CnMode m) { return m == CnMode::one_instance ? "1-instance" : "2-instance"; }

inline std::string_view to_string(CropChoice c) {
  switch (c) {
  case CropChoice::neither: return "neither";
  case CropChoice::content: return "content";
  case CropChoice::style: return "style";
  case CropChoice::both: return "both";
  }
  return "?";
}

/// CrossNorm behavior: which statistics are exchanged, over which windows,
/// and how many units fire per forward pass.
struct CnConfig {
  CnMode mode = CnMode::two_instance;
  CropChoice crop = CropChoice::style;
  double threshold = 0.1;
  std::size_t active_count = 1;
  double probability = 0.5;

  bool crops_content() const { return crop == CropChoice::content || crop == CropChoice::both; }
  bool crops_style() const { return crop == CropChoice::style || crop == CropChoice::both; }

  void validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0))
      throw std::invalid_argument("crossnorm: threshold must be in (0, 1], got " + std::to_string(threshold));
    if (!(probability >= 0.0 && probability <= 1.0))
      throw std::invalid_argument("crossnorm: probability must be in [0, 1], got " + std::to_string(probability));
    if (active_count < 1) throw std::invalid_argument("crossnorm: active_count must be at least 1");
  }
};

/// One concrete draw of a CrossNorm application: who donates to whom and
/// over which windows. Fixing a plan makes the unit deterministic (and
/// differentiable as an ordinary function of its input).
struct CnPlan {
  bool passthrough = false;
  std::vector<Region> content_regions; // per receiver instance
  ops::MomentPlan donor;               // donor statistics per (n, c)
};

namespace detail {

inline void log_single_instance_once() {
  static std::once_flag flag;
  std::call_once(flag, [] {
    std::clog << "crossnorm: 2-instance mode with a batch of 1; unit passes through\n";
  });
}

} // namespace detail

/// 2-instance plan from an explicit instance mapping (receiver n takes the
/// statistics of instance donors[n]) and full-map windows.
inline CnPlan two_instance_plan(const std::vector<std::size_t> &donors, std::size_t channels, std::size_t h,
                                std::size_t w) {
  const std::size_t n = donors.size();
  CnPlan plan;
  plan.content_regions.assign(n, Region::full(h, w));
  plan.donor = ops::MomentPlan::identity(n, channels, h, w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c) plan.donor.source_instance[i * channels + c] = donors[i];
  return plan;
}

/// Draws pairing and crops for an N×C×H×W input.
inline CnPlan sample_cn_plan(const Shape &shape, const CnConfig &cfg, Rng &rng) {
  if (shape.size() != 4) throw ShapeError("crossnorm: expected N×C×H×W input, got " + shape_str(shape));
  cfg.validate();
  const std::size_t N = shape[0], C = shape[1], H = shape[2], W = shape[3];
  CnPlan plan;
  if (cfg.mode == CnMode::two_instance && N < 2) {
    detail::log_single_instance_once();
    plan.passthrough = true;
    return plan;
  }
  plan.donor = ops::MomentPlan::identity(N, C, H, W);
  if (cfg.mode == CnMode::two_instance) {
    const std::vector<std::size_t> rho = rng.permutation(N);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) plan.donor.source_instance[n * C + c] = rho[n];
  } else {
    for (std::size_t n = 0; n < N; ++n) {
      const std::vector<std::size_t> pi = rng.permutation(C);
      for (std::size_t c = 0; c < C; ++c) plan.donor.source_channel[n * C + c] = pi[c];
    }
  }
  plan.content_regions.assign(N, Region::full(H, W));
  for (std::size_t n = 0; n < N; ++n) {
    if (cfg.crops_content()) plan.content_regions[n] = Region::of(sample_crop(H, W, cfg.threshold, rng));
    if (cfg.crops_style()) plan.donor.regions[n] = Region::of(sample_crop(H, W, cfg.threshold, rng));
  }
  return plan;
}

namespace ops {

/// CrossNorm under a fixed plan.
template <typename T> Var<T> crossnorm(Var<T> x, const CnPlan &plan) {
  if (plan.passthrough) return x;
  const Shape &s = x.shape();
  MomentPlan content = MomentPlan::identity(s[0], s[1], s[2], s[3]);
  content.regions = plan.content_regions;
  Var<T> content_stats = moments(x, std::move(content));
  Var<T> donor_stats = moments(x, plan.donor);
  return restyle(x, content_stats, donor_stats, plan.content_regions);
}

} // namespace ops

/// Batch CrossNorm. Eval mode returns the input untouched; train mode draws
/// a plan from `rng` and applies it.
template <typename T> Tensor<T> crossnorm_batch(const Tensor<T> &x, const CnConfig &cfg, Rng &rng, Mode mode) {
  if (mode == Mode::eval) return x;
  const CnPlan plan = sample_cn_plan(x.shape(), cfg, rng);
  Tape<T> tape;
  return ops::crossnorm(tape.leaf(x), plan).value();
}

/// With probability p, exactly k of `total` units fire (chosen uniformly
/// without replacement); otherwise none do.
inline std::vector<bool> sample_active_units(std::size_t total, std::size_t k, double p, Rng &rng) {
  if (k < 1 || k > total)
    throw std::invalid_argument("sample_active_units: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(total) + "]");
  std::vector<bool> mask(total, false);
  if (!rng.bernoulli(p)) return mask;
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(total - i);
    std::swap(order[i], order[j]);
    mask[order[i]] = true;
  }
  return mask;
}

} // namespace sncn
