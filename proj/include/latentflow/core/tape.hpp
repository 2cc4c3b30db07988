#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/tensor.hpp"

namespace latentflow {

/// A trainable tensor with its accumulated gradient.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), T(0)); }
};

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape has not been cleared.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeOptions {
  /// Record backward closures. When false every value is a constant.
  bool grad_enabled = true;
  /// Parameters enter the tape as gradient-tracked leaves. Attacks turn
  /// this off so classifier and flow weights are treated as constants.
  bool params_require_grad = true;
  /// Check every recorded value for NaN/Inf and throw NumericError.
  bool strict = false;
};

/// Ordered record of primitive operations for one reverse-mode
/// evaluation. Confined to a single thread. backward() may run once;
/// afterwards the recorded values are released and only leaf gradients
/// remain readable.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  explicit Tape(TapeOptions options) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const TapeOptions& options() const noexcept { return options_; }
  bool grad_enabled() const noexcept { return options_.grad_enabled; }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, nullptr); }

  /// Leaf whose gradient is retrievable through grad() after backward().
  Var<T> variable(Tensor<T> value) {
    return push("variable", std::move(value), options_.grad_enabled, {}, nullptr);
  }

  Var<T> param(Parameter<T>& p) {
    const bool track = options_.grad_enabled && options_.params_require_grad;
    return push("param", p.value, track, {}, track ? &p : nullptr);
  }

  /// Records the result of a primitive. The backward closure is kept
  /// only if some input requires a gradient.
  Var<T> record(std::string_view primitive, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    bool needs = false;
    if (options_.grad_enabled) {
      for (const auto& v : inputs) needs = needs || requires_grad(v);
    }
    return push(primitive, std::move(value), needs, needs ? std::move(backward) : BackwardFn{}, nullptr);
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_live();
    return nodes_.at(v.id()).value;
  }

  bool requires_grad(const Var<T>& v) const {
    check_live();
    return nodes_.at(v.id()).requires_grad;
  }

  /// Adds `g` to the gradient slot of `v` (no-op for constants).
  void accumulate(const Var<T>& v, const Tensor<T>& g) {
    auto& node = nodes_.at(v.id());
    if (!node.requires_grad) return;
    auto& slot = grads_.at(v.id());
    if (slot.empty()) {
      slot = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  /// Reverse pass from `output`. A non-scalar output needs a seed of the
  /// same shape. Parameter gradients are added into Parameter::grad; the
  /// tape is then cleared.
  void backward(const Var<T>& output, std::optional<Tensor<T>> seed = std::nullopt) {
    if (consumed_) throw TapeError("backward pass already replayed on this tape; record a new evaluation");
    check_live();
    if (!options_.grad_enabled) throw TapeError("backward on a tape recorded without gradient tracking");
    const auto& out = nodes_.at(output.id());
    Tensor<T> g;
    if (seed) {
      if (seed->shape() != out.value.shape()) throw ShapeError("backward seed shape mismatch");
      g = std::move(*seed);
    } else {
      if (out.value.size() != 1) {
        throw TapeError("backward on non-scalar value of shape " + to_string(out.value.shape()) +
                        " requires a seed gradient");
      }
      g = Tensor<T>(out.value.shape(), T(1));
    }
    grads_.assign(nodes_.size(), Tensor<T>{});
    if (out.requires_grad) grads_[output.id()] = std::move(g);

    for (std::size_t i = output.id() + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (grads_[i].empty()) continue;
      if (node.backward) node.backward(*this, grads_[i]);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.backward) continue;
      Tensor<T> g_leaf = grads_[i].empty() ? Tensor<T>(node.value.shape()) : std::move(grads_[i]);
      if (node.param) {
        auto& pg = node.param->grad;
        if (pg.shape() != g_leaf.shape()) pg = Tensor<T>(g_leaf.shape());
        for (std::size_t j = 0; j < g_leaf.size(); ++j) pg[j] += g_leaf[j];
      } else {
        leaf_grads_.emplace(i, std::move(g_leaf));
      }
    }
    nodes_.clear();
    grads_.clear();
    consumed_ = true;
  }

  /// Gradient of a `variable()` leaf, available after backward().
  const Tensor<T>& grad(const Var<T>& v) const {
    if (!consumed_) throw TapeError("gradients are available only after backward()");
    auto it = leaf_grads_.find(v.id());
    if (it == leaf_grads_.end()) throw TapeError("no gradient recorded for this value (not a variable leaf)");
    return it->second;
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::string primitive;
    Tensor<T> value;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  void check_live() const {
    if (consumed_) throw TapeError("tape was cleared after backward(); values are no longer available");
  }

  Var<T> push(std::string_view primitive, Tensor<T> value, bool requires_grad, BackwardFn backward,
              Parameter<T>* param) {
    check_live();
    if (options_.strict && !value.all_finite()) {
      throw NumericError("non-finite value produced by primitive '" + std::string(primitive) + "'");
    }
    nodes_.push_back(Node{std::string(primitive), std::move(value), requires_grad, std::move(backward), param});
    return Var<T>(this, nodes_.size() - 1);
  }

  TapeOptions options_{};
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::unordered_map<std::size_t, Tensor<T>> leaf_grads_;
  bool consumed_ = false;
};

}  // namespace latentflow
