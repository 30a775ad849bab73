#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/tape.hpp"
#include "sncn/core/tensor.hpp"

namespace sncn {

/// Maps a fresh tape plus leaf variables to a scalar.
using GradCheckBuilder = std::function<Var<double>(Tape<double> &, const std::vector<Var<double>> &)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences in 64-bit.
///
/// Error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8);
/// the report holds the maximum over every coordinate of every input.
inline GradCheckReport grad_check_report(const GradCheckBuilder &build, const std::vector<Tensor<double>> &points,
                                         double fd_step = 1e-4) {
  auto evaluate = [&](const std::vector<Tensor<double>> &at, std::vector<Tensor<double>> *grads) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto &p : at) leaves.push_back(tape.leaf(p, grads != nullptr));
    Var<double> loss = build(tape, leaves);
    if (loss.value().size() != 1) throw ShapeError("grad_check: builder must return a scalar");
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    if (grads) {
      tape.backward(loss);
      for (const auto &l : leaves) grads->push_back(tape.grad(l));
    }
    return v;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(points, &analytic);

  GradCheckReport report;
  std::vector<Tensor<double>> probe = points;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].size(); ++i) {
      const double orig = points[k][i];
      probe[k][i] = orig + fd_step;
      const double up = evaluate(probe, nullptr);
      probe[k][i] = orig - fd_step;
      const double down = evaluate(probe, nullptr);
      probe[k][i] = orig;
      const double numeric = (up - down) / (2.0 * fd_step);
      const double a = analytic[k][i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) throw NumericError("grad_check: non-finite gradient");
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > report.max_rel_error) report = {rel, k, i, a, numeric};
    }
  }
  return report;
}

inline double grad_check(const GradCheckBuilder &build, const std::vector<Tensor<double>> &points,
                         double fd_step = 1e-4) {
  return grad_check_report(build, points, fd_step).max_rel_error;
}

inline double grad_check(const std::function<Var<double>(Tape<double> &, Var<double>)> &build,
                         const Tensor<double> &point, double fd_step = 1e-4) {
  return grad_check(
      [&](Tape<double> &tape, const std::vector<Var<double>> &v) { return build(tape, v[0]); },
      std::vector<Tensor<double>>{point}, fd_step);
}

} // namespace sncn
