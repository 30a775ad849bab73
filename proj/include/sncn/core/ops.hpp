#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "sncn/core/error.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and
// records a closure that maps the output gradient onto its inputs.

namespace sncn::ops {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T> using MapMat = Eigen::Map<RowMat<T>>;
template <typename T> using CMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] inline void shape_fail(const std::string &kind, const std::string &what) {
  throw ShapeError(kind + ": " + what);
}

inline void expect_rank(const std::string &kind, const Shape &s, std::size_t rank, const char *name) {
  if (s.size() != rank)
    shape_fail(kind, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel_h, kernel_w, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t pixels() const { return out_h * out_w; }
};

template <typename T> void im2col(const T *img, const ConvGeometry &g, T *cols) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        T *row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
          T *dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            for (std::size_t ow = 0; ow < g.out_w; ++ow) dst[ow] = T{};
            continue;
          }
          const T *src = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? T{} : src[iw];
          }
        }
      }
}

template <typename T> void col2im_add(const T *cols, const ConvGeometry &g, T *img) {
  const std::size_t pixels = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh)
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        const T *row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          T *dst = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T *src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[ow];
          }
        }
      }
}

} // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// x: N×Cin×H×W, weight: Cout×Cin×k×k, bias: Cout (optional).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::type_identity_t<const Var<T> *> bias = nullptr,
              Conv2dOptions opt = {}) {
  using namespace detail;
  const std::string kind = "conv2d";
  const Shape &xs = x.shape();
  const Shape &ws = weight.shape();
  expect_rank(kind, xs, 4, "input");
  expect_rank(kind, ws, 4, "kernel");
  if (ws[1] != xs[1])
    shape_fail(kind, "kernel expects " + std::to_string(ws[1]) + " input channels, input has " +
                         std::to_string(xs[1]) + " (input " + shape_str(xs) + ", kernel " +
                         shape_str(ws) + ")");
  if (opt.stride == 0) shape_fail(kind, "stride must be positive");
  if (xs[2] + 2 * opt.pad < ws[2] || xs[3] + 2 * opt.pad < ws[3])
    shape_fail(kind, "kernel " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != ws[0]))
    shape_fail(kind, "bias shape " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(ws[0]) + " output channels");

  ConvGeometry g{xs[1], xs[2], xs[3], ws[2], ws[3], opt.stride, opt.pad, 0, 0};
  g.out_h = (g.height + 2 * g.pad - g.kernel_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kernel_w) / g.stride + 1;
  const std::size_t batch = xs[0], out_c = ws[0], patch = g.patch(), pixels = g.pixels();

  Tensor<T> out(Shape{batch, out_c, g.out_h, g.out_w});
  std::vector<T> cols(patch * pixels);
  CMapMat<T> wmat(weight.value().data().data(), out_c, patch);
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.value().data().data() + n * in_stride, g, cols.data());
    MapMat<T> omat(out.data().data() + n * out_c * pixels, out_c, pixels);
    omat.noalias() = wmat * CMapMat<T>(cols.data(), patch, pixels);
    if (bias)
      for (std::size_t o = 0; o < out_c; ++o) omat.row(o).array() += bias->value()[o];
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  const Var<T> b = bias ? *bias : Var<T>{};
  const bool has_bias = bias != nullptr;
  return x.tape->record(kind, std::move(out), inputs, [x, weight, b, has_bias, g, batch, out_c](Tape<T> &tape, const Tensor<T> &gout) {
    const std::size_t patch = g.patch(), pixels = g.pixels();
    const std::size_t in_stride = g.channels * g.height * g.width;
    Tensor<T> *gx = tape.grad_for(x);
    Tensor<T> *gw = tape.grad_for(weight);
    Tensor<T> *gb = has_bias ? tape.grad_for(b) : nullptr;
    std::vector<T> cols(patch * pixels);
    CMapMat<T> wmat(tape.value(weight).data().data(), out_c, patch);
    for (std::size_t n = 0; n < batch; ++n) {
      CMapMat<T> go(gout.data().data() + n * out_c * pixels, out_c, pixels);
      if (gw) {
        im2col(tape.value(x).data().data() + n * in_stride, g, cols.data());
        MapMat<T>(gw->data().data(), out_c, patch).noalias() +=
            go * CMapMat<T>(cols.data(), patch, pixels).transpose();
      }
      if (gb)
        for (std::size_t o = 0; o < out_c; ++o) (*gb)[o] += go.row(o).sum();
      if (gx) {
        MapMat<T>(cols.data(), patch, pixels).noalias() = wmat.transpose() * go;
        col2im_add(cols.data(), g, gx->data().data() + n * in_stride);
      }
    }
  });
}

/// x: N×in, weight: out×in, bias: out. y = x·Wᵀ + b.
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  using namespace detail;
  const std::string kind = "linear";
  const Shape &xs = x.shape();
  const Shape &ws = weight.shape();
  expect_rank(kind, xs, 2, "input");
  expect_rank(kind, ws, 2, "weight");
  if (ws[1] != xs[1])
    shape_fail(kind, "weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (bias.shape() != Shape{ws[0]})
    shape_fail(kind, "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(ws[0]) +
                         " outputs");
  const std::size_t batch = xs[0], in = xs[1], outd = ws[0];
  Tensor<T> out(Shape{batch, outd});
  MapMat<T> om(out.data().data(), batch, outd);
  om.noalias() = CMapMat<T>(x.value().data().data(), batch, in) *
                 CMapMat<T>(weight.value().data().data(), outd, in).transpose();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < outd; ++o) om(n, o) += bias.value()[o];
  return x.tape->record(kind, std::move(out), {x, weight, bias}, [x, weight, bias, batch, in, outd](Tape<T> &tape, const Tensor<T> &gout) {
    CMapMat<T> go(gout.data().data(), batch, outd);
    if (auto *gx = tape.grad_for(x))
      MapMat<T>(gx->data().data(), batch, in).noalias() +=
          go * CMapMat<T>(tape.value(weight).data().data(), outd, in);
    if (auto *gw = tape.grad_for(weight))
      MapMat<T>(gw->data().data(), outd, in).noalias() +=
          go.transpose() * CMapMat<T>(tape.value(x).data().data(), batch, in);
    if (auto *gb = tape.grad_for(bias))
      for (std::size_t o = 0; o < outd; ++o) (*gb)[o] += go.col(o).sum();
  });
}

template <typename T> Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto &v : out.storage()) v = v > T{} ? v : T{};
  return x.tape->record("relu", std::move(out), {x}, [x](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x)) {
      const auto &xv = tape.value(x);
      for (std::size_t i = 0; i < gout.size(); ++i)
        if (xv[i] > T{}) (*gx)[i] += gout[i];
    }
  });
}

template <typename T> Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto &v : out.storage()) v = T{1} / (T{1} + std::exp(-v));
  const Tensor<T> saved = out;
  return x.tape->record("sigmoid", std::move(out), {x}, [x, saved](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x))
      for (std::size_t i = 0; i < gout.size(); ++i) (*gx)[i] += gout[i] * saved[i] * (T{1} - saved[i]);
  });
}

template <typename T> Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    detail::shape_fail("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<T> &tape, const Tensor<T> &gout) {
    for (Var<T> v : {a, b})
      if (auto *g = tape.grad_for(v))
        for (std::size_t i = 0; i < gout.size(); ++i) (*g)[i] += gout[i];
  });
}

template <typename T> Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    detail::shape_fail("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape<T> &tape, const Tensor<T> &gout) {
    const auto &av = tape.value(a);
    const auto &bv = tape.value(b);
    if (auto *ga = tape.grad_for(a))
      for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * bv[i];
    if (auto *gb = tape.grad_for(b))
      for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i] * av[i];
  });
}

template <typename T> Var<T> mul_scalar(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto &v : out.storage()) v *= factor;
  return x.tape->record("mul_scalar", std::move(out), {x}, [x, factor](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x))
      for (std::size_t i = 0; i < gout.size(); ++i) (*gx)[i] += gout[i] * factor;
  });
}

template <typename T> Var<T> sum(Var<T> x) {
  T total{};
  for (T v : x.value().data()) total += v;
  return x.tape->record("sum", Tensor<T>::scalar(total), {x}, [x](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x))
      for (auto &v : gx->storage()) v += gout[0];
  });
}

/// View with a new shape; gradient is reshaped back.
template <typename T> Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x))
      for (std::size_t i = 0; i < gout.size(); ++i) (*gx)[i] += gout[i];
  });
}

/// N×C×H×W -> N×C.
template <typename T> Var<T> global_avg_pool(Var<T> x) {
  const Shape &s = x.shape();
  detail::expect_rank("global_avg_pool", s, 4, "input");
  const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1]});
  for (std::size_t i = 0; i < nc; ++i) {
    T acc{};
    for (std::size_t j = 0; j < hw; ++j) acc += x.value()[i * hw + j];
    out[i] = acc / static_cast<T>(hw);
  }
  return x.tape->record("global_avg_pool", std::move(out), {x}, [x, nc, hw](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x))
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < hw; ++j) (*gx)[i * hw + j] += gout[i] / static_cast<T>(hw);
  });
}

/// Mean softmax cross-entropy of N×K logits against integer labels.
template <typename T> Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Shape &s = logits.shape();
  detail::expect_rank("softmax_cross_entropy", s, 2, "logits");
  if (labels.size() != s[0])
    detail::shape_fail("softmax_cross_entropy", std::to_string(labels.size()) + " labels for " +
                                                    std::to_string(s[0]) + " rows");
  const std::size_t batch = s[0], classes = s[1];
  Tensor<T> probs(s);
  T loss{};
  for (std::size_t n = 0; n < batch; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes)
      detail::shape_fail("softmax_cross_entropy", "label " + std::to_string(labels[n]) +
                                                      " out of range for " + std::to_string(classes) +
                                                      " classes");
    const T *row = logits.value().data().data() + n * classes;
    T peak = row[0];
    for (std::size_t k = 1; k < classes; ++k) peak = std::max(peak, row[k]);
    T denom{};
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(row[k] - peak);
    for (std::size_t k = 0; k < classes; ++k) probs[n * classes + k] = std::exp(row[k] - peak) / denom;
    loss += -(row[labels[n]] - peak - std::log(denom));
  }
  loss /= static_cast<T>(batch);
  std::vector<int> saved_labels(labels.begin(), labels.end());
  return logits.tape->record("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                             [logits, probs, saved_labels, batch, classes](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(logits)) {
      const T scale = gout[0] / static_cast<T>(batch);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t k = 0; k < classes; ++k) {
          const T target = static_cast<std::size_t>(saved_labels[n]) == k ? T{1} : T{};
          (*gx)[n * classes + k] += scale * (probs[n * classes + k] - target);
        }
    }
  });
}

/// mean((x - target)²) over all elements; target is a constant.
template <typename T> Var<T> mean_squared_error(Var<T> x, const Tensor<T> &target) {
  if (x.shape() != target.shape())
    detail::shape_fail("mean_squared_error", shape_str(x.shape()) + " vs " + shape_str(target.shape()));
  T acc{};
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = x.value()[i] - target[i];
    acc += d * d;
  }
  const T count = static_cast<T>(target.size());
  return x.tape->record("mean_squared_error", Tensor<T>::scalar(acc / count), {x},
                        [x, target, count](Tape<T> &tape, const Tensor<T> &gout) {
    if (auto *gx = tape.grad_for(x)) {
      const auto &xv = tape.value(x);
      for (std::size_t i = 0; i < target.size(); ++i)
        (*gx)[i] += gout[0] * T{2} * (xv[i] - target[i]) / count;
    }
  });
}

/// Running statistics owned by the caller (model parameter store).
template <typename T> struct BatchNormState {
  Tensor<T> *running_mean = nullptr;
  Tensor<T> *running_var = nullptr;
};

/// Batch normalization over N (and H, W for rank-4 input) per channel.
/// Train mode normalizes with batch statistics and updates running stats;
/// eval mode applies the frozen running stats as a per-channel affine map.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T> state, Mode mode) {
  const std::string kind = "batchnorm2d";
  const Shape &s = x.shape();
  if (s.size() != 2 && s.size() != 4)
    detail::shape_fail(kind, "input must be N×C or N×C×H×W, got " + shape_str(s));
  const std::size_t batch = s[0], channels = s[1];
  const std::size_t spatial = s.size() == 4 ? s[2] * s[3] : 1;
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels})
    detail::shape_fail(kind, "affine parameters " + shape_str(gamma.shape()) + "/" +
                                 shape_str(beta.shape()) + " do not match " + std::to_string(channels) +
                                 " channels");
  for (const Tensor<T> *r : {state.running_mean, state.running_var})
    if (r && r->size() != channels)
      detail::shape_fail(kind, "running stats " + shape_str(r->shape()) + " do not match " +
                                   std::to_string(channels) + " channels");
  if (mode == Mode::eval && (!state.running_mean || !state.running_var))
    detail::shape_fail(kind, "eval mode requires running statistics");

  const T eps = static_cast<T>(kBatchNormEps);
  const std::size_t count = batch * spatial;
  const auto &xv = x.value();
  auto index = [&](std::size_t n, std::size_t c, std::size_t j) {
    return (n * channels + c) * spatial + j;
  };

  std::vector<T> mean(channels), inv_std(channels);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < channels; ++c) {
      T acc{};
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t j = 0; j < spatial; ++j) acc += xv[index(n, c, j)];
      const T mu = acc / static_cast<T>(count);
      T var{};
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t j = 0; j < spatial; ++j) {
          const T d = xv[index(n, c, j)] - mu;
          var += d * d;
        }
      var /= static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T{1} / std::sqrt(var + eps);
      if (state.running_mean && state.running_var) {
        const T m = static_cast<T>(kBatchNormMomentum);
        const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
        (*state.running_mean)[c] = (T{1} - m) * (*state.running_mean)[c] + m * mu;
        (*state.running_var)[c] = (T{1} - m) * (*state.running_var)[c] + m * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = (*state.running_mean)[c];
      inv_std[c] = T{1} / std::sqrt((*state.running_var)[c] + eps);
    }
  }

  Tensor<T> xhat(s), out(s);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t j = 0; j < spatial; ++j) {
        const std::size_t i = index(n, c, j);
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        out[i] = gamma.value()[c] * xhat[i] + beta.value()[c];
      }

  return x.tape->record(kind, std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, mode, batch, channels, spatial](Tape<T> &tape, const Tensor<T> &gout) {
    auto index = [&](std::size_t n, std::size_t c, std::size_t j) {
      return (n * channels + c) * spatial + j;
    };
    const std::size_t count = batch * spatial;
    Tensor<T> *gx = tape.grad_for(x);
    Tensor<T> *gg = tape.grad_for(gamma);
    Tensor<T> *gb = tape.grad_for(beta);
    for (std::size_t c = 0; c < channels; ++c) {
      T sum_g{}, sum_gx{};
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t j = 0; j < spatial; ++j) {
          const std::size_t i = index(n, c, j);
          sum_g += gout[i];
          sum_gx += gout[i] * xhat[i];
        }
      if (gg) (*gg)[c] += sum_gx;
      if (gb) (*gb)[c] += sum_g;
      if (!gx) continue;
      const T g = tape.value(gamma)[c];
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t j = 0; j < spatial; ++j) {
          const std::size_t i = index(n, c, j);
          if (mode == Mode::eval) {
            (*gx)[i] += gout[i] * g * inv_std[c];
          } else {
            (*gx)[i] += g * inv_std[c] / static_cast<T>(count) *
                        (static_cast<T>(count) * gout[i] - sum_g - xhat[i] * sum_gx);
          }
        }
    }
  });
}

} // namespace sncn::ops
