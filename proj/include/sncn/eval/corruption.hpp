#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sncn/core/rng.hpp"
#include "sncn/data/image.hpp"

namespace sncn {

enum class CorruptionKind { gaussian_noise, shot_noise, impulse_noise, brightness, contrast, pixelate };

inline constexpr int kSeverities = 5;

inline const std::vector<CorruptionKind> &all_corruption_kinds() {
  static const std::vector<CorruptionKind> kinds{CorruptionKind::gaussian_noise, CorruptionKind::shot_noise,
                                                 CorruptionKind::impulse_noise,  CorruptionKind::brightness,
                                                 CorruptionKind::contrast,       CorruptionKind::pixelate};
  return kinds;
}

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
  case CorruptionKind::gaussian_noise: return "gaussian_noise";
  case CorruptionKind::shot_noise: return "shot_noise";
  case CorruptionKind::impulse_noise: return "impulse_noise";
  case CorruptionKind::brightness: return "brightness";
  case CorruptionKind::contrast: return "contrast";
  case CorruptionKind::pixelate: return "pixelate";
  }
  return "?";
}

inline CorruptionKind parse_corruption_kind(std::string_view name) {
  for (CorruptionKind k : all_corruption_kinds())
    if (to_string(k) == name) return k;
  throw std::invalid_argument("unknown corruption '" + std::string(name) +
                              "' (expected gaussian_noise, shot_noise, impulse_noise, brightness, contrast or pixelate)");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;

  void validate() const {
    if (severity < 1 || severity > kSeverities)
      throw std::invalid_argument("corruption severity " + std::to_string(severity) + " outside 1..5");
    bool known = false;
    for (CorruptionKind k : all_corruption_kinds()) known |= k == kind;
    if (!known) throw std::invalid_argument("unsupported corruption kind");
  }
};

/// Per-severity constants; each schedule is linear in severity.
struct CorruptionSchedule {
  double gaussian_sigma = 0.06;  // σ per severity step
  double shot_rate = 60.0;       // photons per unit intensity at severity 1, divided by severity
  double impulse_fraction = 0.02;
  double brightness_shift = 0.1;
  double contrast_step = 0.15;   // scale = 1 - step·severity
};

/// Stream for one grid cell: (master seed, kind, severity, image index).
inline Rng corruption_rng(std::uint64_t master, CorruptionKind kind, int severity, std::size_t index) {
  return Rng(master).derive("corruption").derive(to_string(kind)).derive(static_cast<std::uint64_t>(severity)).derive(
      static_cast<std::uint64_t>(index));
}

/// Corruption without the final clamp (test hook for noise statistics).
inline Tensor<float> corrupt_unclamped(const Tensor<float> &pixels, const CorruptionSpec &spec, Rng &rng,
                                       const CorruptionSchedule &sched = {}) {
  spec.validate();
  const Shape &s = pixels.shape();
  if (s.size() != 3) throw ShapeError("corrupt: expected C×H×W image, got " + shape_str(s));
  const double sev = spec.severity;
  Tensor<float> out = pixels;
  auto &v = out.storage();
  switch (spec.kind) {
  case CorruptionKind::gaussian_noise: {
    const double sigma = sched.gaussian_sigma * sev;
    for (auto &p : v) p = static_cast<float>(p + sigma * rng.normal());
    break;
  }
  case CorruptionKind::shot_noise: {
    const double rate = sched.shot_rate / sev;
    for (auto &p : v) p = static_cast<float>(static_cast<double>(rng.poisson(std::max(0.0, double{p}) * rate)) / rate);
    break;
  }
  case CorruptionKind::impulse_noise: {
    const double q = sched.impulse_fraction * sev;
    for (auto &p : v)
      if (rng.bernoulli(q)) p = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    break;
  }
  case CorruptionKind::brightness: {
    const auto shift = static_cast<float>(sched.brightness_shift * sev);
    for (auto &p : v) p += shift;
    break;
  }
  case CorruptionKind::contrast: {
    double mean = 0;
    for (float p : v) mean += p;
    mean /= static_cast<double>(v.size());
    const double scale = 1.0 - sched.contrast_step * sev;
    for (auto &p : v) p = static_cast<float>((p - mean) * scale + mean);
    break;
  }
  case CorruptionKind::pixelate: {
    const std::size_t f = static_cast<std::size_t>(spec.severity) + 1;
    const std::size_t C = s[0], H = s[1], W = s[2];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t by = 0; by < H; by += f)
        for (std::size_t bx = 0; bx < W; bx += f) {
          const std::size_t ey = std::min(H, by + f), ex = std::min(W, bx + f);
          double sum = 0;
          for (std::size_t y = by; y < ey; ++y)
            for (std::size_t x = bx; x < ex; ++x) sum += pixels[(c * H + y) * W + x];
          const auto avg = static_cast<float>(sum / static_cast<double>((ey - by) * (ex - bx)));
          for (std::size_t y = by; y < ey; ++y)
            for (std::size_t x = bx; x < ex; ++x) out[(c * H + y) * W + x] = avg;
        }
    break;
  }
  }
  return out;
}

/// Label-preserving corruption clamped to [0, 1].
inline LabeledImage corrupt(const LabeledImage &img, const CorruptionSpec &spec, Rng &rng,
                            const CorruptionSchedule &sched = {}) {
  return {clamp01(corrupt_unclamped(img.pixels, spec, rng, sched)), img.label};
}

} // namespace sncn
