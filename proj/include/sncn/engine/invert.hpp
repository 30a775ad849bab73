#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/ops.hpp"
#include "sncn/data/image.hpp"
#include "sncn/nn/model.hpp"

namespace sncn {

enum class InvertProtocol { sn_single, sn_accumulated, cn_mix };
enum class InvertInit { content_image, noise };

inline std::string_view to_string(InvertProtocol p) {
  switch (p) {
  case InvertProtocol::sn_single: return "sn_single";
  case InvertProtocol::sn_accumulated: return "sn_accumulated";
  case InvertProtocol::cn_mix: return "cn_mix";
  }
  return "?";
}

inline std::string_view to_string(InvertInit i) { return i == InvertInit::noise ? "noise" : "content_image"; }

struct InvertConfig {
  std::string location = "sn0"; // any model_forward stop location
  InvertProtocol protocol = InvertProtocol::sn_single;
  std::size_t iterations = 200;
  double lr = 1e4;
  std::size_t lr_decay_every = 40; // lr /= 10 at each multiple
  double momentum = 0.9;
  InvertInit init = InvertInit::content_image;
  bool disable_sn = false; // sn_accumulated: run the SN-off network
  std::uint64_t seed = 0;  // noise init

  void validate() const {
    if (iterations < 1) throw ConfigError("invert.iterations must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("invert.lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("invert.momentum must be in [0, 1)");
    if (location.empty()) throw ConfigError("invert.location must name a unit or block");
    if (protocol == InvertProtocol::sn_single && location.rfind("sn", 0) != 0)
      throw ConfigError("invert.location must be an SN unit (sn<i>) for sn_single");
    if (protocol == InvertProtocol::cn_mix && location.rfind("cn", 0) != 0)
      throw ConfigError("invert.location must be a CN unit (cn<i>) for cn_mix");
  }
};

/// Pixel units seen by the inversion optimizer (0..255).
inline constexpr double kInvertPixelScale = 255.0;

struct InvertResult {
  Tensor<float> image;       // 3×H×W, unclamped
  std::vector<double> losses; // loss before each update, then the final loss
};

namespace detail {

inline std::size_t unit_index(const std::string &location, std::size_t count, const char *kind) {
  std::size_t idx = 0;
  try {
    idx = std::stoul(location.substr(2));
  } catch (const std::exception &) {
    throw ConfigError("invert.location '" + location + "' has no unit index");
  }
  if (idx >= count)
    throw ConfigError("invert.location '" + location + "': model has " + std::to_string(count) + " " + kind + " units");
  return idx;
}

inline Tensor<float> representation(Model<float> &m, const Tensor<float> &image, const ForwardOptions<float> &opt) {
  Rng unused(0);
  Tape<float> tape;
  return model_forward(m, tape, tape.leaf(as_batch(image)), Mode::eval, unused, opt).output.value();
}

} // namespace detail

/// Optimizes an input image (momentum SGD, step decay) so that its
/// representation at `opt.stop_at` matches `target` under mean squared error.
inline InvertResult invert_to_target(Model<float> &m, const Tensor<float> &target, const Tensor<float> &init,
                                     const ForwardOptions<float> &opt, const InvertConfig &cfg) {
  cfg.validate();
  InvertResult r{init, {}};
  Tensor<float> velocity(init.shape());
  Rng unused(0);
  double lr = cfg.lr;
  double first = 0.0;
  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    Tape<float> tape;
    Var<float> x = tape.leaf(as_batch(r.image), true);
    Var<float> rep = model_forward(m, tape, x, Mode::eval, unused, opt).output;
    if (rep.shape() != target.shape())
      throw ShapeError("invert: representation " + shape_str(rep.shape()) + " does not match target " +
                       shape_str(target.shape()));
    Var<float> loss = ops::mean_squared_error(rep, target);
    const double value = loss.value().item();
    r.losses.push_back(value);
    if (it == 0) first = value;
    if (!std::isfinite(value) || (value > 10.0 * first && value > 1e-12))
      throw NumericError("invert: loss diverged at iteration " + std::to_string(it) + " (" + std::to_string(value) +
                         " vs initial " + std::to_string(first) + "); lower invert.lr");
    if (it == cfg.iterations) break;
    if (it > 0 && cfg.lr_decay_every > 0 && it % cfg.lr_decay_every == 0) lr /= 10.0;
    tape.backward(loss);
    const Tensor<float> &g = tape.grad(x);
    // The optimizer works on 8-bit pixel values p = 255·x, so ∂L/∂p = g/255
    // and a step of lr·v in p moves x by lr·v/255.
    const double scale = 1.0 / kInvertPixelScale;
    for (std::size_t i = 0; i < velocity.size(); ++i) {
      velocity[i] = static_cast<float>(cfg.momentum * velocity[i] + g[i] * scale);
      r.image[i] -= static_cast<float>(lr * velocity[i] * scale);
    }
  }
  return r;
}

/// Representation inversion under one of the visualization protocols.
///
///  - sn_single: target taken after SN unit `location` with it on; the same
///    unit is switched off while the content image is optimized.
///  - sn_accumulated: target at `location` for the network with all SN on
///    (or all off, cfg.disable_sn); optimization starts from the init.
///  - cn_mix: target re-renders the content's standardized features at CN
///    unit `location` with the donor's statistics; starts from the content.
inline InvertResult invert_representation(Model<float> &m, const InvertConfig &cfg, const Tensor<float> &content,
                                          const std::optional<Tensor<float>> &donor = std::nullopt) {
  cfg.validate();
  if (content.rank() != 3 || content.dim(0) != 3)
    throw ShapeError("invert: content must be a 3×H×W image, got " + shape_str(content.shape()));
  Tensor<float> init = content;
  if (cfg.init == InvertInit::noise) {
    Rng rng = Rng(cfg.seed).derive("invert-noise");
    for (auto &v : init.storage()) v = static_cast<float>(rng.uniform());
  }

  ForwardOptions<float> target_opt, run_opt;
  target_opt.stop_at = run_opt.stop_at = cfg.location;
  switch (cfg.protocol) {
  case InvertProtocol::sn_single: {
    const std::size_t u = detail::unit_index(cfg.location, m.sn_count(), "SN");
    run_opt.disabled_sn.insert(u);
    break;
  }
  case InvertProtocol::sn_accumulated:
    target_opt.disable_all_sn = run_opt.disable_all_sn = cfg.disable_sn;
    break;
  case InvertProtocol::cn_mix: {
    const std::size_t u = detail::unit_index(cfg.location, m.cn_count, "CN");
    if (!donor) throw ConfigError("invert: cn_mix needs a donor image");
    if (donor->shape() != content.shape())
      throw ShapeError("invert: donor " + shape_str(donor->shape()) + " and content " + shape_str(content.shape()) +
                       " differ");
    // Eval-mode CN is the identity, so the activation at cn<u> is the unit's input.
    const Tensor<float> donor_features = detail::representation(m, *donor, run_opt);
    target_opt.cn_override = CnOverride<float>{u, channel_stats(donor_features).packed()};
    break;
  }
  }
  const Tensor<float> target = detail::representation(m, content, target_opt);
  return invert_to_target(m, target, init, run_opt, cfg);
}

inline std::filesystem::path inversion_filename(const InvertConfig &cfg, std::size_t index) {
  return std::string(to_string(cfg.protocol)) + "_" + cfg.location + "_" + std::to_string(index) + ".ppm";
}

} // namespace sncn
