#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sncn/core/grad_check.hpp"
#include "sncn/core/ops.hpp"
#include "sncn/data/style.hpp"
#include "sncn/engine/train.hpp"
#include "sncn/eval/metrics.hpp"
#include "sncn/nn/model.hpp"
#include "sncn/norm/crossnorm.hpp"
#include "sncn/norm/selfnorm.hpp"

// Invariant suite shared by `sncn selftest` and the acceptance binary.

namespace sncn::properties {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Tensor<double> uniform_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto &v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Every (n, c) plane gets its own offset and scale.
inline Tensor<double> styled_batch(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x(Shape{n, c, h, w});
  for (std::size_t p = 0; p < n * c; ++p) {
    const double offset = rng.uniform(-2.0, 2.0), scale = rng.uniform(0.3, 2.0);
    for (std::size_t j = 0; j < h * w; ++j) x[p * h * w + j] = offset + scale * rng.uniform(-1.0, 1.0);
  }
  return x;
}

// Two-pass long-double moments of plane (n, c); independent of channel_stats.
inline std::pair<double, double> plane_stats(const Tensor<double> &x, std::size_t n, std::size_t c) {
  const std::size_t hw = x.dim(2) * x.dim(3);
  const double *p = x.data().data() + (n * x.dim(1) + c) * hw;
  long double sum = 0;
  for (std::size_t j = 0; j < hw; ++j) sum += p[j];
  const long double mean = sum / hw;
  long double sq = 0;
  for (std::size_t j = 0; j < hw; ++j) sq += (p[j] - mean) * (p[j] - mean);
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(sq / hw + 1e-5L))};
}

inline double max_abs_diff(const Tensor<double> &a, const Tensor<double> &b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Var<double> probe_loss(Tape<double> &tape, Var<double> y, std::uint64_t seed) {
  return ops::sum(ops::mul(y, tape.leaf(uniform_tensor(y.shape(), seed, 0.5, 1.5))));
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

} // namespace detail

/// 2-instance crop-free CN hands each receiver its donor's statistics, and
/// 1-instance CN permutes each instance's channel statistics.
inline CheckResult statistic_transfer(std::size_t batches = 1000) {
  CnConfig two, one;
  two.crop = one.crop = CropChoice::neither;
  two.mode = CnMode::two_instance;
  one.mode = CnMode::one_instance;
  const std::size_t N = 4, C = 8, H = 16, W = 16;
  double worst_two = 0, worst_one = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    const Tensor<double> x = detail::styled_batch(N, C, H, W, 10'000 + b);
    Rng rng = Rng(b).derive("transfer"), replay = rng;
    const Tensor<double> y = crossnorm_batch(x, two, rng, Mode::train);
    const CnPlan plan = sample_cn_plan(x.shape(), two, replay);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const auto [dm, ds] = detail::plane_stats(x, plan.donor.source_instance[n * C + c], c);
        const auto [om, os] = detail::plane_stats(y, n, c);
        worst_two = std::max({worst_two, std::abs(om - dm), std::abs(os - ds)});
      }
    Rng rng1 = Rng(b).derive("transfer-1");
    const Tensor<double> z = crossnorm_batch(x, one, rng1, Mode::train);
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<std::pair<double, double>> before, after;
      for (std::size_t c = 0; c < C; ++c) {
        before.push_back(detail::plane_stats(x, n, c));
        after.push_back(detail::plane_stats(z, n, c));
      }
      std::sort(before.begin(), before.end());
      std::sort(after.begin(), after.end());
      for (std::size_t c = 0; c < C; ++c)
        worst_one = std::max({worst_one, std::abs(after[c].first - before[c].first),
                              std::abs(after[c].second - before[c].second)});
    }
  }
  const bool ok = worst_two <= 1e-3 && worst_one <= 1e-3;
  return {"statistic transfer", ok,
          std::to_string(batches) + " batches; 2-instance max err " + detail::fmt(worst_two) +
              ", 1-instance multiset max err " + detail::fmt(worst_one)};
}

/// Double swap restores, eval-mode CN is untouched, SN with unit gates is
/// the identity.
inline CheckResult involution_identity(std::size_t trials = 100) {
  double swap_err = 0, sn_err = 0;
  bool eval_identical = true;
  const CnPlan plan = two_instance_plan({1, 0, 3, 2}, 3, 8, 8);
  SnOptions unit;
  unit.forced_gates = {1.0, 1.0};
  for (std::size_t t = 0; t < trials; ++t) {
    const Tensor<double> x = detail::styled_batch(4, 3, 8, 8, 20'000 + t);
    Tape<double> tape;
    const auto twice = ops::crossnorm(ops::crossnorm(tape.leaf(x), plan), plan);
    swap_err = std::max(swap_err, detail::max_abs_diff(twice.value(), x));

    Rng rng(t);
    for (CropChoice crop : {CropChoice::neither, CropChoice::style, CropChoice::both}) {
      CnConfig cfg;
      cfg.crop = crop;
      for (CnMode mode : {CnMode::one_instance, CnMode::two_instance}) {
        cfg.mode = mode;
        if (!(crossnorm_batch(x, cfg, rng, Mode::eval) == x)) eval_identical = false;
      }
    }
    auto params = SnParams<double>::init(3);
    for (Mode mode : {Mode::train, Mode::eval})
      sn_err = std::max(sn_err, detail::max_abs_diff(selfnorm_forward(x, params, mode, unit), x));
  }
  const bool ok = swap_err <= 1e-3 && eval_identical && sn_err <= 1e-3;
  return {"involution and identity", ok,
          "double-swap max err " + detail::fmt(swap_err) + ", eval CN " +
              (eval_identical ? "bit-identical" : "CHANGED INPUT") + ", unit-gate SN max err " + detail::fmt(sn_err)};
}

/// Finite-difference checks of the differentiable building blocks and of
/// whole residual cells with SN and CN inside.
inline CheckResult gradient_correctness() {
  double worst_layer = 0;
  std::string worst_name = "none";
  auto note = [&](const std::string &name, double err) {
    if (err > worst_layer) {
      worst_layer = err;
      worst_name = name;
    }
  };

  // selfnorm, train and eval
  {
    const Tensor<double> x = detail::styled_batch(3, 2, 5, 5, 90);
    SnParams<double> base = SnParams<double>::init(2);
    base.gate_weight = detail::uniform_tensor(Shape{2, 2, 2}, 91, -1.5, 1.5);
    base.gate_bias = detail::uniform_tensor(Shape{2, 2}, 92, -0.5, 0.5);
    base.bn_weight = detail::uniform_tensor(Shape{2, 2}, 93, 0.5, 1.5);
    base.bn_bias = detail::uniform_tensor(Shape{2, 2}, 94, -0.5, 0.5);
    base.running_mean = detail::uniform_tensor(Shape{2, 2}, 95, -0.5, 0.5);
    base.running_var = detail::uniform_tensor(Shape{2, 2}, 96, 0.5, 1.5);
    for (Mode mode : {Mode::train, Mode::eval})
      note(std::string("selfnorm/") + (mode == Mode::train ? "train" : "eval"),
           grad_check(
               [&](Tape<double> &tape, const std::vector<Var<double>> &v) {
                 SnParams<double> p = base;
                 SnLeaves<double> leaves{v[1], v[2], v[3], v[4]};
                 return detail::probe_loss(tape, ops::selfnorm(v[0], leaves, p, mode), 2);
               },
               {x, base.gate_weight, base.gate_bias, base.bn_weight, base.bn_bias}));
  }
  // crossnorm under frozen plans
  {
    const Tensor<double> x = detail::styled_batch(3, 2, 6, 6, 700);
    for (CnMode mode : {CnMode::one_instance, CnMode::two_instance})
      for (CropChoice crop : {CropChoice::neither, CropChoice::content, CropChoice::style, CropChoice::both}) {
        CnConfig cfg;
        cfg.mode = mode;
        cfg.crop = crop;
        cfg.threshold = 0.3;
        Rng rng(static_cast<std::uint64_t>(crop) * 7 + 1);
        const CnPlan plan = sample_cn_plan(x.shape(), cfg, rng);
        note("crossnorm/" + std::string(to_string(mode)) + "/" + std::string(to_string(crop)),
             grad_check([&](Tape<double> &tape, Var<double> v) {
               return detail::probe_loss(tape, ops::crossnorm(v, plan), 1);
             },
                        x));
      }
  }
  // batchnorm2d, both modes
  {
    const Tensor<double> x = detail::uniform_tensor(Shape{3, 2, 4, 4}, 21, -1.0, 1.0);
    for (Mode mode : {Mode::train, Mode::eval})
      note(std::string("batchnorm2d/") + (mode == Mode::train ? "train" : "eval"),
           grad_check(
               [&](Tape<double> &t, const std::vector<Var<double>> &v) {
                 Tensor<double> rm = Tensor<double>::from({0.1, -0.2}), rv = Tensor<double>::from({0.8, 1.3});
                 return detail::probe_loss(
                     t, ops::batchnorm2d(v[0], v[1], v[2], ops::BatchNormState<double>{&rm, &rv}, mode), 8);
               },
               {x, Tensor<double>::from({1.2, 0.7}), Tensor<double>::from({0.1, -0.3})}));
  }
  // conv2d, strided and padded with bias
  note("conv2d", grad_check(
                     [](Tape<double> &t, const std::vector<Var<double>> &v) {
                       return detail::probe_loss(t, ops::conv2d(v[0], v[1], &v[2], {2, 1}), 7);
                     },
                     {detail::uniform_tensor(Shape{3, 2, 5, 5}, 30, -1.0, 1.0),
                      detail::uniform_tensor(Shape{3, 2, 3, 3}, 31, -1.0, 1.0),
                      detail::uniform_tensor(Shape{3}, 32, -1.0, 1.0)}));

  // full cells: input and every trainable parameter
  double worst_cell = 0;
  std::string worst_cell_name = "none";
  ModelSpec s;
  s.widths = {3, 4};
  s.blocks = {1, 2};
  s.cells_per_block = 1;
  s.num_classes = 3;
  s.cn.probability = 1.0;
  s.cn.active_count = 2;
  s.cn.crop = CropChoice::both;
  s.cn.threshold = 0.3;
  for (Placement p : {Placement::post_addition, Placement::pre_residual, Placement::post_residual,
                      Placement::identity}) {
    s.placement = p;
    Rng init(3);
    Model<double> m = build_model<double>(s, init);
    for (auto &sn : m.sn) {
      const std::size_t c = sn.channels();
      sn.gate_weight = detail::uniform_tensor(Shape{c, 2, 2}, 40, -1.0, 1.0);
      sn.gate_bias = detail::uniform_tensor(Shape{c, 2}, 41, -0.5, 0.5);
    }
    std::vector<Tensor<double>> points{detail::uniform_tensor(Shape{3, 3, 8, 8}, 9, -1.0, 2.0)};
    for (auto &ref : m.parameters())
      if (ref.trainable) points.push_back(*ref.tensor);
    const std::vector<int> labels{0, 2, 1};
    auto build = [&](Tape<double> &tape, const std::vector<Var<double>> &v) {
      Rng rng(17);
      ForwardOptions<double> opt;
      std::vector<Var<double>> bound(v.begin() + 1, v.end());
      opt.bound_params = &bound;
      auto pass = model_forward(m, tape, v[0], Mode::train, rng, opt);
      return ops::softmax_cross_entropy(pass.output, std::span<const int>(labels));
    };
    const double err = grad_check(build, points);
    if (err >= worst_cell) {
      worst_cell = err;
      worst_cell_name = std::string(to_string(p));
    }
  }
  const bool ok = worst_layer <= 1e-4 && worst_cell <= 1e-3;
  return {"gradient correctness", ok,
          "layers max rel err " + detail::fmt(worst_layer) + " (" + worst_name + "), cell composite " +
              detail::fmt(worst_cell) + " (" + worst_cell_name + ")"};
}

/// Both mCE variants against plain re-summation over 100 random tables.
inline CheckResult metric_arithmetic(std::size_t tables = 100) {
  auto random_table = [](std::uint64_t seed, double lo, double hi) {
    Rng rng = Rng(seed).derive("table");
    ErrorTable t = ErrorTable::over(all_corruption_kinds());
    for (CorruptionKind k : all_corruption_kinds())
      for (int s = 1; s <= kSeverities; ++s) t.set(k, s, rng.uniform(lo, hi));
    t.clean_error = rng.uniform();
    return t;
  };
  double worst = 0;
  bool self_exact = true;
  for (std::size_t i = 0; i < tables; ++i) {
    const ErrorTable t = random_table(i, 0.0, 1.0), ref = random_table(i + 5000, 0.05, 1.0);
    long double total = 0, norm = 0;
    for (CorruptionKind k : t.kinds) {
      long double num = 0, den = 0;
      for (int s = 1; s <= kSeverities; ++s) {
        total += t.at(k, s);
        num += t.at(k, s);
        den += ref.at(k, s);
      }
      norm += num / den;
    }
    const long double cells = static_cast<long double>(t.kinds.size()) * kSeverities;
    worst = std::max(worst, std::abs(mce_unnormalized(t) - static_cast<double>(total / cells)));
    worst = std::max(worst, std::abs(mce_normalized(t, ref) - static_cast<double>(norm / t.kinds.size())));
    self_exact = self_exact && mce_normalized(t, t) == 1.0;
  }
  const bool ok = worst <= 1e-9 && self_exact;
  return {"metric arithmetic", ok,
          std::to_string(tables) + " tables; max oracle gap " + detail::fmt(worst) + ", self-normalized " +
              (self_exact ? "exactly 1" : "NOT exactly 1")};
}

/// Crop ratios respect the threshold; units fire with probability p.
inline CheckResult sampling_contracts() {
  Rng crop_rng = Rng(2024).derive("crop");
  double min_ratio = 1.0;
  bool inside = true;
  for (int i = 0; i < 10'000; ++i) {
    const CropSpec c = sample_crop(32, 32, 0.1, crop_rng);
    min_ratio = std::min(min_ratio, c.ratio);
    inside = inside && c.top + c.side <= 32 && c.left + c.side <= 32;
  }
  double worst_gap = 0;
  bool exact_k = true;
  const int trials = 100'000;
  for (double p : {0.25, 0.5})
    for (std::size_t k : {1u, 2u}) {
      Rng rng = Rng(static_cast<std::uint64_t>(p * 100) * 10 + k).derive("fire");
      int fired = 0;
      for (int t = 0; t < trials; ++t) {
        const auto mask = sample_active_units(6, k, p, rng);
        const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
        exact_k = exact_k && (n == 0 || n == k);
        fired += n > 0;
      }
      worst_gap = std::max(worst_gap, std::abs(fired / double(trials) - p));
    }
  const bool ok = min_ratio >= 0.1 && inside && worst_gap <= 0.01 && exact_k;
  return {"sampling contracts", ok,
          "min crop ratio " + detail::fmt(min_ratio) + " over 1e4 draws at t=0.1; max firing-rate gap " +
              detail::fmt(worst_gap) + " over 1e5 trials (p in {0.25,0.5}, k in {1,2})"};
}

/// Library-level stat exchange and adjustment on synthetic photos.
inline CheckResult stylize_stats(const Tensor<float> &a, const Tensor<float> &b) {
  const auto [oa, ob] = rgb_stat_exchange_unclamped(a, b);
  const auto sa = image_stats(a), sb = image_stats(b), soa = image_stats(oa), sob = image_stats(ob);
  double cross = 0;
  for (std::size_t c = 0; c < 3; ++c)
    cross = std::max({cross, std::abs(double(soa.mean[c]) - sb.mean[c]), std::abs(double(soa.std[c]) - sb.std[c]),
                      std::abs(double(sob.mean[c]) - sa.mean[c]), std::abs(double(sob.std[c]) - sa.std[c])});
  const auto target = rgb_target(0.45f, 0.5f, 0.55f, 0.2f, 0.18f, 0.22f);
  const auto va = image_stats(restyle_image_unclamped(a, target)), vb = image_stats(restyle_image_unclamped(b, target));
  double adjust = 0;
  for (std::size_t c = 0; c < 3; ++c)
    adjust = std::max({adjust, std::abs(double(va.mean[c]) - vb.mean[c]), std::abs(double(va.std[c]) - vb.std[c])});
  const bool ok = cross <= 1e-2 && adjust <= 1e-3;
  return {"style statistics", ok,
          "exchange crossover max err " + detail::fmt(cross) + ", adjust stat distance " + detail::fmt(adjust)};
}

/// Smooth sky-over-ground picture with texture; stands in for a photo.
inline Tensor<float> natural_scene(std::uint64_t seed, std::size_t height = 48, std::size_t width = 64) {
  Rng rng = Rng(seed).derive("scene");
  const double horizon = rng.uniform(0.35, 0.65);
  double sky_top[3], sky_low[3], ground[3];
  for (int c = 0; c < 3; ++c) {
    sky_top[c] = rng.uniform(0.1, 0.7);
    sky_low[c] = rng.uniform(0.3, 0.95);
    ground[c] = rng.uniform(0.05, 0.6);
  }
  const double sun_y = rng.uniform(0.1, 0.3) * height, sun_x = rng.uniform(0.2, 0.8) * width;
  const double sun_r = rng.uniform(3.0, 7.0), freq = rng.uniform(0.2, 0.6);
  Tensor<float> img(Shape{3, height, width});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double fy = double(y) / height;
      const double ridge = horizon + 0.08 * std::sin(freq * x + seed);
      const double d = std::hypot(y - sun_y, x - sun_x);
      for (std::size_t c = 0; c < 3; ++c) {
        double v;
        if (fy < ridge) {
          v = sky_top[c] + (sky_low[c] - sky_top[c]) * fy / ridge;
          if (d < sun_r) v = 0.5 * v + 0.5;
        } else {
          v = ground[c] * (0.7 + 0.3 * std::sin(0.9 * x + 1.3 * y)) + 0.05 * (fy - ridge);
        }
        v += rng.uniform(-0.04, 0.04);
        img[(c * height + y) * width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

/// Two short trainings with the same config agree to the last bit.
inline CheckResult training_determinism() {
  TrainConfig cfg;
  cfg.model.widths = {4, 8, 8};
  cfg.model.cells_per_block = 1;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.train_per_class = 6;
  cfg.test_per_class = 3;
  cfg.seed = 11;
  const auto data = load_data(cfg);
  auto a = train(cfg, data.train, data.test);
  auto b = train(cfg, data.train, data.test);
  bool same = format_log(a.log) == format_log(b.log);
  for (std::size_t i = 0; i < a.log.size(); ++i) same = same && a.log[i].train_loss == b.log[i].train_loss;
  std::ostringstream ca, cb;
  write_checkpoint(ca, a.model.to_checkpoint());
  write_checkpoint(cb, b.model.to_checkpoint());
  same = same && ca.str() == cb.str();
  return {"training determinism", same, same ? "logs and checkpoint bytes identical" : "runs differ"};
}

/// The fast suite run by `sncn selftest`.
inline std::vector<std::function<CheckResult()>> selftest_suite() {
  return {[] { return statistic_transfer(); },
          [] { return involution_identity(); },
          [] { return gradient_correctness(); },
          [] { return metric_arithmetic(); },
          [] { return sampling_contracts(); },
          [] { return stylize_stats(natural_scene(1), natural_scene(2)); },
          [] { return training_determinism(); }};
}

} // namespace sncn::properties
