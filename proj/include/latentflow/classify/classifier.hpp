#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "latentflow/classify/loss.hpp"
#include "latentflow/core/error.hpp"
#include "latentflow/core/linear.hpp"
#include "latentflow/core/ops.hpp"
#include "latentflow/core/random.hpp"

namespace latentflow {

enum class ClassifierKind { mlp, lenet };

inline const char* classifier_kind_name(ClassifierKind k) { return k == ClassifierKind::mlp ? "mlp" : "lenet"; }

/// Architecture descriptor. The MLP uses `hidden`; the LeNet-style stack
/// reads images of channels×height×width from flattened rows:
/// conv5×5(pad 2) → ReLU → avgpool2 → conv5×5 → ReLU → avgpool2 →
/// fc1 → ReLU → fc2 → ReLU → classes.
struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::mlp;
  std::size_t input_dim = 2;
  std::size_t classes = 2;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t channels = 1, height = 28, width = 28;
  std::size_t conv1 = 6, conv2 = 16, fc1 = 120, fc2 = 84;

  void validate() const {
    if (classes < 2) throw ConfigError("classifier: at least two classes required");
    if (input_dim == 0) throw ConfigError("classifier: input_dim must be > 0");
    if (kind == ClassifierKind::mlp) {
      for (auto h : hidden)
        if (h == 0) throw ConfigError("classifier: hidden widths must be > 0");
      return;
    }
    if (channels * height * width != input_dim) {
      throw ConfigError("classifier: channels*height*width = " + std::to_string(channels * height * width) +
                        " differs from input_dim " + std::to_string(input_dim));
    }
    if (height % 2 || width % 2 || height / 2 < 6 || width / 2 < 6 || (height / 2 - 4) % 2 || (width / 2 - 4) % 2) {
      throw ConfigError("classifier: lenet needs even sides >= 12 with (side/2 - 4) even");
    }
    if (conv1 == 0 || conv2 == 0 || fc1 == 0 || fc2 == 0) throw ConfigError("classifier: lenet widths must be > 0");
  }
};

template <class T>
class Classifier {
 public:
  explicit Classifier(ClassifierSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind == ClassifierKind::mlp) {
      std::size_t in = spec_.input_dim;
      for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        dense_.emplace_back("mlp.fc" + std::to_string(i), in, spec_.hidden[i]);
        in = spec_.hidden[i];
      }
      dense_.emplace_back("mlp.out", in, spec_.classes);
    } else {
      conv1_w_ = Parameter<T>("lenet.conv1.weight", Tensor<T>({spec_.conv1, spec_.channels, 5, 5}));
      conv1_b_ = Parameter<T>("lenet.conv1.bias", Tensor<T>({spec_.conv1}));
      conv2_w_ = Parameter<T>("lenet.conv2.weight", Tensor<T>({spec_.conv2, spec_.conv1, 5, 5}));
      conv2_b_ = Parameter<T>("lenet.conv2.bias", Tensor<T>({spec_.conv2}));
      const std::size_t flat = spec_.conv2 * ((spec_.height / 2 - 4) / 2) * ((spec_.width / 2 - 4) / 2);
      dense_.emplace_back("lenet.fc1", flat, spec_.fc1);
      dense_.emplace_back("lenet.fc2", spec_.fc1, spec_.fc2);
      dense_.emplace_back("lenet.out", spec_.fc2, spec_.classes);
    }
  }

  const ClassifierSpec& spec() const { return spec_; }
  std::size_t classes() const { return spec_.classes; }
  std::size_t input_dim() const { return spec_.input_dim; }
  /// Width of the penultimate representation.
  std::size_t feature_dim() const { return dense_.back().in_features(); }

  /// He-uniform for the MLP; truncated normal σ = 0.1 for the LeNet stack.
  void init(Rng& rng) {
    if (spec_.kind == ClassifierKind::mlp) {
      for (auto& l : dense_) l.init_he_uniform(rng);
      return;
    }
    for (auto* p : {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_})
      for (auto& v : p->value.storage()) v = static_cast<T>(rng.truncated_normal(0.1));
    for (auto& l : dense_) l.init_truncated_normal(rng, 0.1);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    if (spec_.kind == ClassifierKind::lenet) {
      out.insert(out.end(), {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_});
    }
    for (auto& l : dense_) l.collect(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  /// Penultimate activations, N×feature_dim().
  Var<T> features(Tape<T>& tape, const Var<T>& x) {
    if (x.shape().size() != 2 || x.cols() != spec_.input_dim) {
      throw ShapeError("classifier: expected N×" + std::to_string(spec_.input_dim) + " input, got " +
                       to_string(x.shape()));
    }
    Var<T> h = x;
    if (spec_.kind == ClassifierKind::lenet) {
      const std::size_t n = x.rows();
      h = reshape(h, {n, spec_.channels, spec_.height, spec_.width});
      h = avg_pool2d(relu(conv2d(h, tape.param(conv1_w_), tape.param(conv1_b_), 1, 2)), 2);
      h = avg_pool2d(relu(conv2d(h, tape.param(conv2_w_), tape.param(conv2_b_), 1, 0)), 2);
      h = reshape(h, {n, h.value().size() / n});
    }
    for (std::size_t i = 0; i + 1 < dense_.size(); ++i) h = relu(dense_[i](tape, h));
    return h;
  }

  Var<T> logits(Tape<T>& tape, const Var<T>& x) { return dense_.back()(tape, features(tape, x)); }

  Tensor<T> logits(const Tensor<T>& x) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    return logits(tape, tape.constant(x)).value();
  }

  Tensor<T> features(const Tensor<T>& x) {
    Tape<T> tape(TapeOptions{.grad_enabled = false});
    return features(tape, tape.constant(x)).value();
  }

  std::vector<std::size_t> predict(const Tensor<T>& x) {
    const auto l = logits(x);
    std::vector<std::size_t> out(l.rows());
    for (std::size_t r = 0; r < l.rows(); ++r) out[r] = argmax(l.row(r));
    return out;
  }

  /// Copy converted to another precision.
  template <class U>
  Classifier<U> cast() {
    Classifier<U> out(spec_);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
  }

 private:
  ClassifierSpec spec_;
  std::vector<Linear<T>> dense_;
  Parameter<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_;
};

}  // namespace latentflow
