#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/ops.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/core/tape.hpp"
#include "latentflow/flow/layers.hpp"

namespace latentflow {

template <class T>
using FlowLayer = std::variant<CouplingLayer<T>, PermutationLayer<T>, ActNormLayer<T>, InvLinearLayer<T>>;

template <class T>
LayerKind kind_of(const FlowLayer<T>& layer) {
  return std::visit([](const auto& l) { return std::decay_t<decltype(l)>::kind; }, layer);
}

/// Result of pushing a batch through the flow: latent codes and the
/// per-sample log|det ∂F/∂x|, N×1.
template <class T>
struct FlowOutput {
  Var<T> z;
  Var<T> logdet;
};

/// Hyperparameters of the stacked architecture. Each block is
/// [actnorm] → [invlinear] → coupling → permutation, with the bracketed
/// layers optional. Dimension 1 admits no coupling, so a 1-D flow is a
/// stack of actnorm layers.
struct FlowArchitecture {
  std::size_t dim = 2;
  std::size_t label_width = 0;
  std::size_t blocks = 12;
  std::size_t hidden = 512;
  double scale_clamp = 2.0;
  bool actnorm = false;
  bool invlinear = false;
};

/// Normalizing flow F = f_ℓ ∘ … ∘ f₁ with a standard-normal prior.
template <class T>
class FlowModel {
 public:
  FlowModel() = default;
  explicit FlowModel(std::size_t dim, std::size_t label_width = 0) : dim_(dim), label_width_(label_width) {
    if (dim == 0) throw ShapeError("flow dimension must be positive");
  }

  std::size_t dim() const { return dim_; }
  std::size_t label_width() const { return label_width_; }
  bool conditional() const { return label_width_ > 0; }
  std::vector<FlowLayer<T>>& layers() { return layers_; }
  const std::vector<FlowLayer<T>>& layers() const { return layers_; }

  template <class Layer>
  Layer& add(Layer layer) {
    if (layer.dim() != dim_) throw ShapeError("layer width does not match flow dimension");
    if constexpr (std::is_same_v<Layer, CouplingLayer<T>>) {
      if (layer.label_width() != label_width_) throw ShapeError("coupling label width does not match flow");
    }
    layers_.emplace_back(std::move(layer));
    return std::get<Layer>(layers_.back());
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) std::visit([&](auto& layer) { layer.collect(out); }, l);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  FlowOutput<T> forward(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>& label = std::nullopt) {
    check_input(x, label);
    Var<T> h = x;
    std::optional<Var<T>> total;
    for (auto& l : layers_) {
      auto out = std::visit([&](auto& layer) { return layer.forward(tape, h, label); }, l);
      h = out.y;
      if (out.logdet) total = total ? latentflow::add(*total, *out.logdet) : *out.logdet;
    }
    if (!total) total = tape.constant(Tensor<T>({x.rows(), 1}));
    return {h, *total};
  }

  Var<T> inverse(Tape<T>& tape, const Var<T>& z, const std::optional<Var<T>>& label = std::nullopt) {
    check_input(z, label);
    Var<T> h = z;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      h = std::visit([&](auto& layer) { return layer.inverse(tape, h, label); }, *it);
    }
    return h;
  }

  /// log p_Z(z) for the standard normal prior, per row (N×1).
  static Var<T> prior_log_prob(const Var<T>& z) {
    const T c = static_cast<T>(-0.5 * static_cast<double>(z.cols()) * std::log(2.0 * std::numbers::pi));
    return add_scalar(scale(sum_cols(square(z)), T(-0.5)), c);
  }

  /// log p_X(x) = log p_Z(F(x)) + log|det ∂F/∂x|, per row.
  Var<T> log_prob(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>& label = std::nullopt) {
    auto out = forward(tape, x, label);
    return latentflow::add(prior_log_prob(out.z), out.logdet);
  }

  /// Mean negative log-likelihood in nats per sample.
  Var<T> nll(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>& label = std::nullopt) {
    return neg(mean(log_prob(tape, x, label)));
  }

  // ---- tensor conveniences (no gradient tracking) ----

  struct Encoded {
    Tensor<T> z;
    std::vector<T> logdet;
  };

  Encoded encode(const Tensor<T>& x, const std::optional<Tensor<T>>& labels = std::nullopt) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    auto out = forward(tape, tape.constant(as_batch(x)), label_var(tape, labels));
    std::vector<T> ld(out.logdet.value().storage());
    return {reshape_like(out.z.value(), x), std::move(ld)};
  }

  Tensor<T> decode(const Tensor<T>& z, const std::optional<Tensor<T>>& labels = std::nullopt) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    auto x = inverse(tape, tape.constant(as_batch(z)), label_var(tape, labels));
    return reshape_like(x.value(), z);
  }

  std::vector<T> log_prob(const Tensor<T>& x, const std::optional<Tensor<T>>& labels = std::nullopt) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    auto lp = log_prob(tape, tape.constant(as_batch(x)), label_var(tape, labels));
    return lp.value().storage();
  }

  T nll(const Tensor<T>& x, const std::optional<Tensor<T>>& labels = std::nullopt) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    return nll(tape, tape.constant(as_batch(x)), label_var(tape, labels)).value()[0];
  }

  /// n draws F⁻¹(z), z ~ N(0, I), drawn row by row from `rng`.
  Tensor<T> sample(std::size_t n, Rng& rng, const std::optional<Tensor<T>>& labels = std::nullopt) {
    if (n == 0) throw Error("sample: n must be at least 1");
    Tensor<T> z({n, dim_});
    for (auto& v : z.storage()) v = static_cast<T>(rng.normal());
    return decode(z, labels);
  }

  /// Runs data-dependent initialization of every actnorm layer that has
  /// not been initialized, feeding the batch through the stack.
  void initialize_actnorm(const Tensor<T>& batch, const std::optional<Tensor<T>>& labels = std::nullopt) {
    Tensor<T> h = as_batch(batch);
    for (auto& l : layers_) {
      if (auto* an = std::get_if<ActNormLayer<T>>(&l); an && !an->initialized()) an->initialize(h);
      Tape<T> tape(TapeOptions{.grad_enabled = false});
      auto out = std::visit([&](auto& layer) { return layer.forward(tape, tape.constant(h), label_var(tape, labels)); }, l);
      h = out.y.value();
    }
  }

 private:
  void check_input(const Var<T>& x, const std::optional<Var<T>>& label) const {
    if (x.shape().size() != 2 || x.cols() != dim_) {
      throw ShapeError("flow: expected N x " + std::to_string(dim_) + " input, got " + to_string(x.shape()));
    }
    if (conditional() != label.has_value()) {
      throw ShapeError(conditional() ? "conditional flow requires labels" : "unconditional flow given labels");
    }
    if (label && (label->rows() != x.rows() || label->cols() != label_width_)) {
      throw ShapeError("flow: label batch has shape " + to_string(label->shape()));
    }
  }

  Tensor<T> as_batch(const Tensor<T>& x) const {
    if (x.rank() == 1) return x.reshaped({1, x.size()});
    return x;
  }

  static Tensor<T> reshape_like(const Tensor<T>& v, const Tensor<T>& like) { return v.reshaped(like.shape()); }

  std::optional<Var<T>> label_var(Tape<T>& tape, const std::optional<Tensor<T>>& labels) const {
    if (!labels) return std::nullopt;
    return tape.constant(as_batch(*labels));
  }

  std::size_t dim_ = 0;
  std::size_t label_width_ = 0;
  std::vector<FlowLayer<T>> layers_;
};

/// Builds the block stack described by `arch`; permutations and weight
/// initialization are drawn from `rng`.
template <class T>
FlowModel<T> build_flow(const FlowArchitecture& arch, Rng& rng) {
  FlowModel<T> model(arch.dim, arch.label_width);
  for (std::size_t b = 0; b < arch.blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    if (arch.actnorm || arch.dim == 1) model.add(ActNormLayer<T>(arch.dim, prefix + ".actnorm"));
    if (arch.dim == 1) continue;
    if (arch.invlinear) model.add(InvLinearLayer<T>::random_orthogonal(arch.dim, rng, prefix + ".invlinear"));
    auto& c = model.add(CouplingLayer<T>(arch.dim, arch.dim / 2, arch.hidden, arch.label_width, arch.scale_clamp,
                                         prefix + ".coupling"));
    c.init(rng);
    model.add(PermutationLayer<T>::random(arch.dim, rng));
  }
  return model;
}

/// One-hot rows for integer labels.
template <class T>
Tensor<T> one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Tensor<T> out({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw ShapeError("one_hot: label out of range");
    out(i, labels[i]) = T(1);
  }
  return out;
}

}  // namespace latentflow
