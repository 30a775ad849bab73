#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sncn/core/error.hpp"
#include "sncn/core/tensor.hpp"

namespace sncn {

enum class Mode { train, eval };

template <typename T> class Tape;

/// Handle to a value recorded on a tape.
template <typename T> struct Var {
  Tape<T> *tape = nullptr;
  std::size_t id = 0;

  const Tensor<T> &value() const { return tape->value(*this); }
  const Shape &shape() const { return value().shape(); }
};

/// Reverse-mode recording of primitive applications.
///
/// Entries are appended in evaluation order, which is a topological order by
/// construction; `backward` walks them once in reverse.
template <typename T> class Tape {
public:
  /// Receives the gradient of the entry's output; pushes into inputs via grad_for().
  using BackwardFn = std::function<void(Tape &, const Tensor<T> &)>;

  struct Entry {
    std::string kind;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    Entry e;
    e.kind = "leaf";
    e.value = std::move(value);
    e.requires_grad = requires_grad;
    entries_.push_back(std::move(e));
    return Var<T>{this, entries_.size() - 1};
  }

  Var<T> record(std::string kind, Tensor<T> value, const std::vector<Var<T>> &inputs, BackwardFn fn) {
    if (!value.all_finite()) throw NumericError(kind + ": non-finite value in forward output");
    Entry e;
    e.kind = std::move(kind);
    e.value = std::move(value);
    for (const auto &v : inputs) {
      if (v.tape != this) throw std::logic_error(e.kind + ": input belongs to a different tape");
      e.inputs.push_back(v.id);
      e.requires_grad = e.requires_grad || entries_[v.id].requires_grad;
    }
    if (e.requires_grad) e.backward = std::move(fn);
    ++recorded_;
    entries_.push_back(std::move(e));
    return Var<T>{this, entries_.size() - 1};
  }

  const Tensor<T> &value(Var<T> v) const { return entries_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return entries_.at(v.id).requires_grad; }
  const std::string &kind(Var<T> v) const { return entries_.at(v.id).kind; }
  std::size_t size() const { return entries_.size(); }
  std::size_t recorded() const { return recorded_; }

  /// Gradient accumulator of `v`, or nullptr when `v` does not need one.
  Tensor<T> *grad_for(Var<T> v) {
    Entry &e = entries_.at(v.id);
    if (!e.requires_grad) return nullptr;
    if (e.grad.empty()) e.grad = Tensor<T>(e.value.shape(), T{});
    return &e.grad;
  }

  /// Gradient of the last backward pass with respect to `v`; zeros if unreached.
  Tensor<T> grad(Var<T> v) const {
    const Entry &e = entries_.at(v.id);
    if (e.grad.empty()) return Tensor<T>(e.value.shape(), T{});
    return e.grad;
  }

  void backward(Var<T> loss) {
    if (recorded_ == 0) throw std::logic_error("backward: tape is empty");
    const Entry &root = entries_.at(loss.id);
    if (root.value.size() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(root.value.shape()));
    for (auto &e : entries_) e.grad = Tensor<T>();
    if (!root.requires_grad) return;
    *grad_for(loss) = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Entry &e = entries_[i];
      if (!e.backward || e.grad.empty()) continue;
      Tensor<T> g = std::move(e.grad);
      if (!g.all_finite()) throw NumericError(e.kind + ": non-finite gradient");
      e.backward(*this, g);
      e.grad = std::move(g);
    }
  }

private:
  std::vector<Entry> entries_;
  std::size_t recorded_ = 0;
};

} // namespace sncn
