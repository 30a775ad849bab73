#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "sncn/core/ops.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"
#include "sncn/norm/stats.hpp"

namespace sncn {

/// Per-channel gate networks of one SelfNorm unit.
///
/// Channel c owns a 2×2 weight and 2-vector bias mapping its (mean, std) to
/// two pre-activations, each batch-normalized across the batch and squashed
/// by a sigmoid into the gates (f, g). Component 0 is f (mean), 1 is g (std).
template <typename T> struct SnParams {
  Tensor<T> gate_weight;  // C×2×2, [c][out][in], in = (mean, std)
  Tensor<T> gate_bias;    // C×2
  Tensor<T> bn_weight;    // C×2
  Tensor<T> bn_bias;      // C×2
  Tensor<T> running_mean; // C×2
  Tensor<T> running_var;  // C×2

  /// Zero gate weights and biases, unit BN scale: every gate starts at 0.5.
  static SnParams init(std::size_t channels) {
    return SnParams{Tensor<T>(Shape{channels, 2, 2}, T{}), Tensor<T>(Shape{channels, 2}, T{}),
                    Tensor<T>(Shape{channels, 2}, T{1}),    Tensor<T>(Shape{channels, 2}, T{}),
                    Tensor<T>(Shape{channels, 2}, T{}),     Tensor<T>(Shape{channels, 2}, T{1})};
  }

  std::size_t channels() const { return gate_weight.dim(0); }

  /// Weights and biases of the C gate networks: C·(4 + 2).
  std::size_t gate_parameter_count() const { return gate_weight.size() + gate_bias.size(); }
};

/// Trainable SnParams tensors registered on a tape.
template <typename T> struct SnLeaves {
  Var<T> gate_weight, gate_bias, bn_weight, bn_bias;
};

template <typename T> SnLeaves<T> attach(Tape<T> &tape, const SnParams<T> &p, bool requires_grad) {
  return {tape.leaf(p.gate_weight, requires_grad), tape.leaf(p.gate_bias, requires_grad),
          tape.leaf(p.bn_weight, requires_grad), tape.leaf(p.bn_bias, requires_grad)};
}

struct SnOptions {
  /// Test hook: replace computed (f, g) with constants.
  std::optional<std::array<double, 2>> forced_gates;
};

namespace ops {

/// pre[n,c,k] = Σ_j W[c,k,j]·stats[n,c,j] + b[c,k]; channels never mix.
template <typename T> Var<T> gate_linear(Var<T> stats, Var<T> weight, Var<T> bias) {
  const std::string kind = "sn_gate_linear";
  const Shape &s = stats.shape();
  if (s.size() != 3 || s[2] != 2) throw ShapeError(kind + ": stats must be N×C×2, got " + shape_str(s));
  const std::size_t N = s[0], C = s[1];
  if (weight.shape() != Shape{C, 2, 2} || bias.shape() != Shape{C, 2})
    throw ShapeError(kind + ": gate parameters " + shape_str(weight.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match " + std::to_string(C) + " channels");
  Tensor<T> out(Shape{N, C, 2});
  const auto &x = stats.value();
  const auto &w = weight.value();
  const auto &b = bias.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < 2; ++k) {
        const std::size_t i = n * C + c;
        out[2 * i + k] = w[c * 4 + k * 2] * x[2 * i] + w[c * 4 + k * 2 + 1] * x[2 * i + 1] + b[c * 2 + k];
      }
  return stats.tape->record(kind, std::move(out), {stats, weight, bias},
                            [stats, weight, bias, N, C](Tape<T> &tape, const Tensor<T> &gout) {
    const auto &x = tape.value(stats);
    const auto &w = tape.value(weight);
    Tensor<T> *gx = tape.grad_for(stats);
    Tensor<T> *gw = tape.grad_for(weight);
    Tensor<T> *gb = tape.grad_for(bias);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < 2; ++k) {
          const std::size_t i = n * C + c;
          const T g = gout[2 * i + k];
          if (gx) {
            (*gx)[2 * i] += g * w[c * 4 + k * 2];
            (*gx)[2 * i + 1] += g * w[c * 4 + k * 2 + 1];
          }
          if (gw) {
            (*gw)[c * 4 + k * 2] += g * x[2 * i];
            (*gw)[c * 4 + k * 2 + 1] += g * x[2 * i + 1];
          }
          if (gb) (*gb)[c * 2 + k] += g;
        }
  });
}

/// y = σ'·(x − μ)/σ + μ'  with μ' = f·μ, σ' = g·σ.
template <typename T> Var<T> selfnorm_combine(Var<T> x, Var<T> stats, Var<T> gates) {
  const std::string kind = "sn_combine";
  sncn::detail::expect_nchw(kind, x.shape());
  const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  if (stats.shape() != Shape{N, C, 2} || gates.shape() != Shape{N, C, 2})
    throw ShapeError(kind + ": stats/gates " + shape_str(stats.shape()) + "/" + shape_str(gates.shape()) +
                     " do not match input " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const auto &xv = x.value();
  const auto &s = stats.value();
  const auto &g = gates.value();
  for (std::size_t i = 0; i < N * C; ++i) {
    const T mu = s[2 * i], sigma = s[2 * i + 1];
    const T new_mu = g[2 * i] * mu, new_sigma = g[2 * i + 1] * sigma;
    for (std::size_t j = 0; j < HW; ++j) out[i * HW + j] = new_sigma * (xv[i * HW + j] - mu) / sigma + new_mu;
  }
  return x.tape->record(kind, std::move(out), {x, stats, gates}, [x, stats, gates, N, C, HW](Tape<T> &tape, const Tensor<T> &gout) {
    const auto &xv = tape.value(x);
    const auto &s = tape.value(stats);
    const auto &g = tape.value(gates);
    Tensor<T> *gx = tape.grad_for(x);
    Tensor<T> *gs = tape.grad_for(stats);
    Tensor<T> *gg = tape.grad_for(gates);
    for (std::size_t i = 0; i < N * C; ++i) {
      const T mu = s[2 * i], sigma = s[2 * i + 1];
      const T f = g[2 * i], gs_gate = g[2 * i + 1];
      T sum_g{}, sum_gz{};
      for (std::size_t j = 0; j < HW; ++j) {
        const T go = gout[i * HW + j];
        const T z = (xv[i * HW + j] - mu) / sigma;
        sum_g += go;
        sum_gz += go * z;
        if (gx) (*gx)[i * HW + j] += go * gs_gate;
      }
      // ∂y/∂σ vanishes: g·σ·(x−μ)/σ does not depend on σ.
      if (gs) (*gs)[2 * i] += sum_g * (f - gs_gate);
      if (gg) {
        (*gg)[2 * i] += sum_g * mu;
        (*gg)[2 * i + 1] += sum_gz * sigma;
      }
    }
  });
}

/// Per-channel gates (f, g) as an N×C×2 variable.
template <typename T>
Var<T> selfnorm_gates(Var<T> stats, const SnLeaves<T> &leaves, SnParams<T> &params, Mode mode) {
  const std::size_t N = stats.shape()[0], C = stats.shape()[1];
  Var<T> pre = gate_linear(stats, leaves.gate_weight, leaves.gate_bias);
  Var<T> flat = reshape(pre, Shape{N, 2 * C});
  Var<T> gamma = reshape(leaves.bn_weight, Shape{2 * C});
  Var<T> beta = reshape(leaves.bn_bias, Shape{2 * C});
  Var<T> normed = batchnorm2d(flat, gamma, beta, BatchNormState<T>{&params.running_mean, &params.running_var}, mode);
  return sigmoid(reshape(normed, Shape{N, C, 2}));
}

/// SelfNorm on a tape; active in both train and eval mode.
template <typename T>
Var<T> selfnorm(Var<T> x, const SnLeaves<T> &leaves, SnParams<T> &params, Mode mode, const SnOptions &opt = {}) {
  sncn::detail::expect_nchw("selfnorm", x.shape());
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  if (params.channels() != C)
    throw ShapeError("selfnorm: parameters for " + std::to_string(params.channels()) +
                     " channels, input " + shape_str(x.shape()));
  Var<T> stats = moments(x, MomentPlan::identity(N, C, x.shape()[2], x.shape()[3]));
  Var<T> gates;
  if (opt.forced_gates) {
    Tensor<T> fixed(Shape{N, C, 2});
    for (std::size_t i = 0; i < N * C; ++i) {
      fixed[2 * i] = static_cast<T>((*opt.forced_gates)[0]);
      fixed[2 * i + 1] = static_cast<T>((*opt.forced_gates)[1]);
    }
    gates = x.tape->leaf(std::move(fixed));
  } else {
    gates = selfnorm_gates(stats, leaves, params, mode);
  }
  return selfnorm_combine(x, stats, gates);
}

} // namespace ops

/// Gates (f, g), each N×C, for given per-channel statistics.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> sn_gate(const ChannelStats<T> &stats, SnParams<T> &params, Mode mode) {
  if (stats.channels() != params.channels())
    throw ShapeError("sn_gate: statistics for " + std::to_string(stats.channels()) + " channels, parameters for " +
                     std::to_string(params.channels()));
  Tape<T> tape;
  const SnLeaves<T> leaves = attach(tape, params, false);
  Var<T> gates = ops::selfnorm_gates(tape.leaf(stats.packed()), leaves, params, mode);
  ChannelStats<T> split = ChannelStats<T>::unpack(gates.value());
  return {std::move(split.mean), std::move(split.std)};
}

/// SelfNorm forward without gradient recording. Train mode updates the gate
/// BN running statistics held in `params`.
template <typename T>
Tensor<T> selfnorm_forward(const Tensor<T> &x, SnParams<T> &params, Mode mode, const SnOptions &opt = {}) {
  Tape<T> tape;
  const SnLeaves<T> leaves = attach(tape, params, false);
  return ops::selfnorm(tape.leaf(x), leaves, params, mode, opt).value();
}

} // namespace sncn
