#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sncn/core/checkpoint.hpp"
#include "sncn/core/ops.hpp"
#include "sncn/core/rng.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"
#include "sncn/norm/crossnorm.hpp"
#include "sncn/norm/selfnorm.hpp"

namespace sncn {

/// Where SN/CN units sit inside a residual cell (or in front of the stem).
enum class Placement { identity, pre_residual, post_residual, post_addition, image };
enum class UnitOrder { cn_then_sn, sn_then_cn };

inline std::string_view to_string(Placement p) {
  switch (p) {
  case Placement::identity: return "identity";
  case Placement::pre_residual: return "pre-residual";
  case Placement::post_residual: return "post-residual";
  case Placement::post_addition: return "post-addition";
  case Placement::image: return "image";
  }
  return "?";
}

inline std::string_view to_string(UnitOrder o) { return o == UnitOrder::cn_then_sn ? "cn-sn" : "sn-cn"; }

/// Backbone topology plus SN/CN placement.
struct ModelSpec {
  std::vector<std::size_t> widths{16, 32, 64}; // one residual block per entry
  std::size_t cells_per_block = 2;
  std::size_t num_classes = 4;
  std::size_t in_channels = 3;
  Placement placement = Placement::post_addition;
  UnitOrder order = UnitOrder::cn_then_sn;
  std::set<std::size_t> blocks{1, 2, 3}; // 1-based residual blocks carrying units
  bool image_units = false;              // units in front of the stem as well
  bool sn_enabled = true;
  bool cn_enabled = true;
  CnConfig cn;

  bool has_units() const { return sn_enabled || cn_enabled; }

  /// Sites (image site first, then cells by depth) that carry units.
  std::size_t site_count() const {
    if (!has_units()) return 0;
    if (placement == Placement::image) return 1;
    std::size_t n = image_units ? 1 : 0;
    for (std::size_t b : blocks)
      if (b >= 1 && b <= widths.size()) n += cells_per_block;
    return n;
  }

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("model: widths must not be empty");
    for (std::size_t w : widths)
      if (w == 0) throw std::invalid_argument("model: zero width");
    if (cells_per_block == 0) throw std::invalid_argument("model: cells_per_block must be at least 1");
    if (num_classes < 2) throw std::invalid_argument("model: num_classes must be at least 2");
    for (std::size_t b : blocks)
      if (b < 1 || b > widths.size())
        throw std::invalid_argument("model: block " + std::to_string(b) + " does not exist (" +
                                    std::to_string(widths.size()) + " blocks)");
    if (has_units() && placement != Placement::image && blocks.empty() && !image_units)
      throw std::invalid_argument("model: SN/CN enabled but no block or image site selected");
    if (cn_enabled) {
      cn.validate();
      if (cn.active_count > site_count())
        throw std::invalid_argument("model: active_count " + std::to_string(cn.active_count) + " exceeds " +
                                    std::to_string(site_count()) + " CrossNorm units");
    }
  }
};

template <typename T> struct BnParams {
  Tensor<T> weight, bias, running_mean, running_var;

  static BnParams init(std::size_t c) {
    return {Tensor<T>(Shape{c}, T{1}), Tensor<T>(Shape{c}, T{}), Tensor<T>(Shape{c}, T{}), Tensor<T>(Shape{c}, T{1})};
  }
};

/// Insertion point for at most one CN and one SN unit.
struct UnitSite {
  std::string name;
  std::optional<std::size_t> sn; // index into Model::sn
  std::optional<std::size_t> cn; // index into the CN registry
};

template <typename T> struct Cell {
  std::size_t in = 0, out = 0, stride = 1;
  BnParams<T> bn1, bn2;
  Tensor<T> conv1, conv2;
  std::optional<Tensor<T>> shortcut;
  std::optional<std::size_t> site;
};

struct ParamInfo {
  std::string name;
  bool trainable = true;
};

template <typename T> struct ParamRef {
  std::string name;
  Tensor<T> *tensor = nullptr;
  bool trainable = true;
};

/// Residual CNN: stem conv, blocks of pre-activation cells, BN-ReLU-pool-linear head.
template <typename T> struct Model {
  ModelSpec spec;
  Tensor<T> stem;
  std::vector<Cell<T>> cells;
  BnParams<T> head_bn;
  Tensor<T> fc_weight, fc_bias;
  std::vector<SnParams<T>> sn;
  std::vector<UnitSite> sites;
  std::optional<std::size_t> image_site;
  std::size_t cn_count = 0;

  std::size_t sn_count() const { return sn.size(); }

  /// Deterministic, ordered view of every tensor (trainable or running stat).
  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    auto bn = [&](const std::string &prefix, BnParams<T> &p) {
      out.push_back({prefix + ".weight", &p.weight, true});
      out.push_back({prefix + ".bias", &p.bias, true});
      out.push_back({prefix + ".running_mean", &p.running_mean, false});
      out.push_back({prefix + ".running_var", &p.running_var, false});
    };
    auto sn_unit = [&](const std::string &prefix, SnParams<T> &p) {
      out.push_back({prefix + ".gate_weight", &p.gate_weight, true});
      out.push_back({prefix + ".gate_bias", &p.gate_bias, true});
      out.push_back({prefix + ".bn_weight", &p.bn_weight, true});
      out.push_back({prefix + ".bn_bias", &p.bn_bias, true});
      out.push_back({prefix + ".running_mean", &p.running_mean, false});
      out.push_back({prefix + ".running_var", &p.running_var, false});
    };
    if (image_site && sites[*image_site].sn) sn_unit("image.sn", sn[*sites[*image_site].sn]);
    out.push_back({"stem.weight", &stem, true});
    for (auto &cell : cells) {
      const std::string prefix = cell_name(static_cast<std::size_t>(&cell - cells.data()));
      bn(prefix + ".bn1", cell.bn1);
      out.push_back({prefix + ".conv1.weight", &cell.conv1, true});
      bn(prefix + ".bn2", cell.bn2);
      out.push_back({prefix + ".conv2.weight", &cell.conv2, true});
      if (cell.shortcut) out.push_back({prefix + ".shortcut.weight", &*cell.shortcut, true});
      if (cell.site && sites[*cell.site].sn) sn_unit(prefix + ".sn", sn[*sites[*cell.site].sn]);
    }
    bn("head.bn", head_bn);
    out.push_back({"head.fc.weight", &fc_weight, true});
    out.push_back({"head.fc.bias", &fc_bias, true});
    return out;
  }

  std::string cell_name(std::size_t index) const {
    return "block" + std::to_string(index / spec.cells_per_block + 1) + ".cell" +
           std::to_string(index % spec.cells_per_block);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto &p : parameters())
      if (p.trainable) n += p.tensor->size();
    return n;
  }

  Checkpoint to_checkpoint() {
    Checkpoint out;
    for (const auto &p : parameters()) out.push_back({p.name, p.tensor->template cast<float>()});
    return out;
  }

  /// Copies a checkpoint in; names and shapes must match exactly.
  void load(const Checkpoint &ckpt) {
    auto params = parameters();
    if (ckpt.size() != params.size())
      throw FormatError("checkpoint has " + std::to_string(ckpt.size()) + " tensors, model expects " +
                        std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (ckpt[i].name != params[i].name)
        throw FormatError("checkpoint entry " + std::to_string(i) + " is '" + ckpt[i].name + "', model expects '" +
                          params[i].name + "'");
      if (ckpt[i].tensor.shape() != params[i].tensor->shape())
        throw FormatError("checkpoint tensor '" + ckpt[i].name + "' has shape " + shape_str(ckpt[i].tensor.shape()) +
                          ", model expects " + shape_str(params[i].tensor->shape()));
      *params[i].tensor = ckpt[i].tensor.template cast<T>();
    }
  }

  template <typename U> Model<U> cast() const {
    Model<U> out;
    out.spec = spec;
    out.sites = sites;
    out.image_site = image_site;
    out.cn_count = cn_count;
    auto bn = [](const BnParams<T> &p) {
      return BnParams<U>{p.weight.template cast<U>(), p.bias.template cast<U>(), p.running_mean.template cast<U>(),
                         p.running_var.template cast<U>()};
    };
    out.stem = stem.template cast<U>();
    for (const auto &c : cells) {
      Cell<U> d;
      d.in = c.in;
      d.out = c.out;
      d.stride = c.stride;
      d.bn1 = bn(c.bn1);
      d.bn2 = bn(c.bn2);
      d.conv1 = c.conv1.template cast<U>();
      d.conv2 = c.conv2.template cast<U>();
      if (c.shortcut) d.shortcut = c.shortcut->template cast<U>();
      d.site = c.site;
      out.cells.push_back(std::move(d));
    }
    out.head_bn = bn(head_bn);
    out.fc_weight = fc_weight.template cast<U>();
    out.fc_bias = fc_bias.template cast<U>();
    for (const auto &s : sn)
      out.sn.push_back(SnParams<U>{s.gate_weight.template cast<U>(), s.gate_bias.template cast<U>(),
                                   s.bn_weight.template cast<U>(), s.bn_bias.template cast<U>(),
                                   s.running_mean.template cast<U>(), s.running_var.template cast<U>()});
    return out;
  }
};

namespace detail {

template <typename T> Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng &rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto &v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

} // namespace detail

/// Builds and initializes a model. Only conv/linear weights consume `rng`,
/// so enabling or disabling SN/CN never changes the backbone's initial weights.
template <typename T> Model<T> build_model(const ModelSpec &spec, Rng &rng) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  auto add_site = [&](std::string name) {
    UnitSite site{std::move(name), std::nullopt, std::nullopt};
    if (spec.cn_enabled) site.cn = m.cn_count++;
    m.sites.push_back(std::move(site));
    return m.sites.size() - 1;
  };
  auto attach_sn = [&](std::size_t site, std::size_t channels) {
    if (!spec.sn_enabled) return;
    m.sites[site].sn = m.sn.size();
    m.sn.push_back(SnParams<T>::init(channels));
  };

  const bool units = spec.has_units();
  if (units && (spec.placement == Placement::image || spec.image_units)) {
    m.image_site = add_site("image");
    attach_sn(*m.image_site, spec.in_channels);
  }

  m.stem = detail::uniform_init<T>(Shape{spec.widths[0], spec.in_channels, 3, 3}, spec.in_channels * 9, rng);
  std::size_t in = spec.widths[0];
  for (std::size_t b = 0; b < spec.widths.size(); ++b) {
    const std::size_t out = spec.widths[b];
    for (std::size_t k = 0; k < spec.cells_per_block; ++k) {
      Cell<T> cell;
      cell.in = in;
      cell.out = out;
      cell.stride = (b > 0 && k == 0) ? 2 : 1;
      cell.bn1 = BnParams<T>::init(in);
      cell.conv1 = detail::uniform_init<T>(Shape{out, in, 3, 3}, in * 9, rng);
      cell.bn2 = BnParams<T>::init(out);
      cell.conv2 = detail::uniform_init<T>(Shape{out, out, 3, 3}, out * 9, rng);
      if (in != out || cell.stride != 1) cell.shortcut = detail::uniform_init<T>(Shape{out, in, 1, 1}, in, rng);
      if (units && spec.placement != Placement::image && spec.blocks.contains(b + 1)) {
        const std::size_t index = m.cells.size();
        cell.site = add_site(m.cell_name(index));
        // Pre-residual units see the cell input; every other position sees `out` channels.
        attach_sn(*cell.site, spec.placement == Placement::pre_residual ? in : out);
      }
      m.cells.push_back(std::move(cell));
      in = out;
    }
  }
  m.head_bn = BnParams<T>::init(in);
  m.fc_weight = detail::uniform_init<T>(Shape{spec.num_classes, in}, in, rng);
  m.fc_bias = Tensor<T>(Shape{spec.num_classes}, T{});
  return m;
}

/// Frozen-inference hook for visualization: at CN unit `unit`, re-render the
/// activation with the given packed N×C×2 statistics even in eval mode.
template <typename T> struct CnOverride {
  std::size_t unit = 0;
  Tensor<T> donor_stats;
};

template <typename T> struct ForwardOptions {
  std::optional<std::array<double, 2>> forced_gates; // every SN unit
  std::set<std::size_t> disabled_sn;
  bool disable_all_sn = false;
  std::optional<CnOverride<T>> cn_override;
  /// Stop and return the activation at this location: "image", "stem",
  /// "sn<i>", "cn<i>", "block<b>", "cell<k>" or "logits".
  std::string stop_at;
  /// Optional per-cell output probes, filled in cell order.
  std::vector<Tensor<T>> *cell_probes = nullptr;
  /// Replace parameter leaves (trainable parameters, in parameters() order).
  const std::vector<Var<T>> *bound_params = nullptr;
};

template <typename T> struct ForwardPass {
  Var<T> output;
  std::vector<bool> active_cn;
  std::vector<Tensor<T> *> trainable;   // parameter storage
  std::vector<Var<T>> trainable_leaves; // matching tape leaves
  bool stopped = false;
};

namespace detail {

template <typename T> class ForwardRun {
public:
  ForwardRun(Model<T> &m, Tape<T> &tape, Mode mode, Rng &rng, const ForwardOptions<T> &opt, bool param_grads)
      : m_(m), tape_(tape), mode_(mode), rng_(rng), opt_(opt) {
    std::size_t k = 0;
    for (const auto &p : m_.parameters()) {
      if (!p.trainable) continue;
      Var<T> leaf;
      if (opt_.bound_params) {
        if (k >= opt_.bound_params->size()) throw std::invalid_argument("forward: too few bound parameters");
        leaf = (*opt_.bound_params)[k];
      } else {
        leaf = tape_.leaf(*p.tensor, param_grads);
      }
      ++k;
      leaves_.emplace(p.tensor, leaf);
      pass_.trainable.push_back(p.tensor);
      pass_.trainable_leaves.push_back(leaf);
    }
    pass_.active_cn.assign(m_.cn_count, false);
    if (mode_ == Mode::train && m_.cn_count > 0)
      pass_.active_cn = sample_active_units(m_.cn_count, m_.spec.cn.active_count, m_.spec.cn.probability, rng_);
  }

  ForwardPass<T> run(Var<T> x) {
    if (x.shape().size() != 4 || x.shape()[1] != m_.spec.in_channels)
      throw ShapeError("model_forward: expected N×" + std::to_string(m_.spec.in_channels) + "×H×W batch, got " +
                       shape_str(x.shape()));
    if (x.shape()[2] < 8 || x.shape()[3] < 8)
      throw ShapeError("model_forward: spatial dims must be at least 8, got " + shape_str(x.shape()));
    if (m_.image_site) x = site(*m_.image_site, x);
    if (stop_var_) return finish(*stop_var_);
    if (mark("image", x)) return finish(x);
    x = ops::conv2d(x, leaf(m_.stem), nullptr, {1, 1});
    if (mark("stem", x)) return finish(x);
    for (std::size_t i = 0; i < m_.cells.size(); ++i) {
      x = cell(m_.cells[i], x);
      if (stop_var_) return finish(*stop_var_);
      if (opt_.cell_probes) opt_.cell_probes->push_back(x.value());
      if (mark("cell" + std::to_string(i), x)) return finish(x);
      if ((i + 1) % m_.spec.cells_per_block == 0 && mark("block" + std::to_string((i + 1) / m_.spec.cells_per_block), x))
        return finish(x);
    }
    x = ops::relu(bn(m_.head_bn, x));
    x = ops::linear(ops::global_avg_pool(x), leaf(m_.fc_weight), leaf(m_.fc_bias));
    if (!opt_.stop_at.empty() && opt_.stop_at != "logits")
      throw std::invalid_argument("model_forward: unknown location '" + opt_.stop_at + "'");
    pass_.output = x;
    return std::move(pass_);
  }

private:
  ForwardPass<T> finish(Var<T> x) {
    pass_.output = x;
    pass_.stopped = true;
    return std::move(pass_);
  }

  bool mark(const std::string &name, const Var<T> &) const { return !opt_.stop_at.empty() && opt_.stop_at == name; }

  Var<T> leaf(Tensor<T> &t) { return leaves_.at(&t); }

  Var<T> bn(BnParams<T> &p, Var<T> x) {
    return ops::batchnorm2d(x, leaf(p.weight), leaf(p.bias), ops::BatchNormState<T>{&p.running_mean, &p.running_var},
                            mode_);
  }

  Var<T> site(std::size_t index, Var<T> x) {
    const UnitSite &s = m_.sites[index];
    auto apply_cn = [&] {
      if (!s.cn) return;
      const std::size_t u = *s.cn;
      if (mode_ == Mode::train && pass_.active_cn[u]) x = ops::crossnorm(x, sample_cn_plan(x.shape(), m_.spec.cn, rng_));
      if (opt_.cn_override && opt_.cn_override->unit == u) {
        const Shape &sh = x.shape();
        ops::MomentPlan plan = ops::MomentPlan::identity(sh[0], sh[1], sh[2], sh[3]);
        Var<T> content = ops::moments(x, plan);
        x = ops::restyle(x, content, tape_.leaf(opt_.cn_override->donor_stats), plan.regions);
      }
      if (!stop_var_ && mark("cn" + std::to_string(u), x)) stop_var_ = x;
    };
    auto apply_sn = [&] {
      if (!s.sn) return;
      const std::size_t u = *s.sn;
      if (!opt_.disable_all_sn && !opt_.disabled_sn.contains(u)) {
        SnParams<T> &p = m_.sn[u];
        SnLeaves<T> leaves{leaf(p.gate_weight), leaf(p.gate_bias), leaf(p.bn_weight), leaf(p.bn_bias)};
        SnOptions sopt;
        sopt.forced_gates = opt_.forced_gates;
        x = ops::selfnorm(x, leaves, p, mode_, sopt);
      }
      if (!stop_var_ && mark("sn" + std::to_string(u), x)) stop_var_ = x;
    };
    if (m_.spec.order == UnitOrder::cn_then_sn) {
      apply_cn();
      apply_sn();
    } else {
      apply_sn();
      apply_cn();
    }
    return x;
  }

  Var<T> cell(Cell<T> &c, Var<T> x) {
    const bool has_site = c.site.has_value();
    const Placement where = m_.spec.placement;
    Var<T> branch = (has_site && where == Placement::pre_residual) ? site(*c.site, x) : x;
    Var<T> h = ops::conv2d(ops::relu(bn(c.bn1, branch)), leaf(c.conv1), nullptr, {c.stride, 1});
    h = ops::conv2d(ops::relu(bn(c.bn2, h)), leaf(c.conv2), nullptr, {1, 1});
    if (has_site && where == Placement::post_residual) h = site(*c.site, h);
    Var<T> skip = c.shortcut ? ops::conv2d(x, leaf(*c.shortcut), nullptr, {c.stride, 0}) : x;
    if (has_site && where == Placement::identity) skip = site(*c.site, skip);
    Var<T> out = ops::add(h, skip);
    if (has_site && where == Placement::post_addition) out = site(*c.site, out);
    return out;
  }

  Model<T> &m_;
  Tape<T> &tape_;
  Mode mode_;
  Rng &rng_;
  const ForwardOptions<T> &opt_;
  std::unordered_map<const Tensor<T> *, Var<T>> leaves_;
  ForwardPass<T> pass_;
  std::optional<Var<T>> stop_var_;
};

} // namespace detail

/// Forward pass on a caller-owned tape.
///
/// Train mode samples the active CrossNorm units once, applies CN only at
/// active sites and updates BN/SN running statistics. Eval mode never runs
/// CrossNorm (apart from an explicit `cn_override`).
template <typename T>
ForwardPass<T> model_forward(Model<T> &model, Tape<T> &tape, Var<T> input, Mode mode, Rng &rng,
                             const ForwardOptions<T> &opt = {}, bool param_grads = false) {
  detail::ForwardRun<T> run(model, tape, mode, rng, opt, param_grads);
  return run.run(input);
}

/// Logits for a batch without gradient recording.
template <typename T> Tensor<T> model_forward(Model<T> &model, const Tensor<T> &batch, Mode mode, Rng &rng,
                                              const ForwardOptions<T> &opt = {}) {
  Tape<T> tape;
  return model_forward(model, tape, tape.leaf(batch), mode, rng, opt).output.value();
}

} // namespace sncn
