#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/tape.hpp"

namespace latentflow {

enum class OptimizerKind { sgd_momentum_nesterov, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double weight_decay = 0.0;
  double momentum = 0.9;  // SGD
  bool nesterov = true;   // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;   // Adam
  double epsilon = 1e-8;  // Adam

  void validate() const {
    if (weight_decay < 0) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("optimizer: momentum must be in [0, 1)");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("optimizer: betas must be in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("optimizer: epsilon must be > 0");
  }
};

/// Optimizer with per-parameter accumulators. Weight decay is the L2
/// form: λθ is added to the gradient before the update rule.
///
/// SGD follows the common Nesterov formulation
///   b ← μ·b + g (b = g on the first step),  d = g + μ·b,  θ ← θ − η·d.
/// Adam uses bias-corrected first and second moments.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) { config_.validate(); }

  const OptimizerConfig& config() const { return config_; }
  std::size_t steps() const { return steps_; }

  /// Applies one update from each parameter's accumulated gradient. If any
  /// proposed value is non-finite nothing is modified.
  void step(std::span<Parameter<T>* const> params, double rate) {
    if (!(rate > 0) || !std::isfinite(rate)) throw NumericError("optimizer: learning rate must be positive and finite");
    ensure_state(params);
    const std::size_t t = steps_ + 1;
    std::vector<std::vector<T>> next_values(params.size()), next_m(params.size()), next_v(params.size());

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      const auto& p = *params[pi];
      const std::size_t n = p.value.size();
      if (p.grad.size() != n) throw ShapeError("optimizer: gradient shape differs from parameter " + p.name);
      auto& val = next_values[pi];
      auto& m = next_m[pi];
      auto& v = next_v[pi];
      val.resize(n);
      m = first_[pi];
      v = second_[pi];
      for (std::size_t i = 0; i < n; ++i) {
        const double theta = p.value[i];
        const double g = static_cast<double>(p.grad[i]) + config_.weight_decay * theta;
        if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in " + p.name);
        double update;
        if (config_.kind == OptimizerKind::adam) {
          const double mi = config_.beta1 * m[i] + (1 - config_.beta1) * g;
          const double vi = config_.beta2 * v[i] + (1 - config_.beta2) * g * g;
          m[i] = static_cast<T>(mi);
          v[i] = static_cast<T>(vi);
          const double mhat = mi / (1 - std::pow(config_.beta1, static_cast<double>(t)));
          const double vhat = vi / (1 - std::pow(config_.beta2, static_cast<double>(t)));
          update = rate * mhat / (std::sqrt(vhat) + config_.epsilon);
        } else {
          double d = g;
          if (config_.momentum > 0) {
            const double b = t == 1 ? g : config_.momentum * m[i] + g;
            m[i] = static_cast<T>(b);
            d = config_.nesterov ? g + config_.momentum * b : b;
          }
          update = rate * d;
        }
        const double next = theta - update;
        if (!std::isfinite(next)) throw NumericError("optimizer: non-finite update in " + p.name);
        val[i] = static_cast<T>(next);
      }
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      std::copy(next_values[pi].begin(), next_values[pi].end(), params[pi]->value.storage().begin());
      first_[pi] = std::move(next_m[pi]);
      second_[pi] = std::move(next_v[pi]);
    }
    steps_ = t;
  }

 private:
  void ensure_state(std::span<Parameter<T>* const> params) {
    if (first_.size() == params.size()) return;
    if (!first_.empty()) throw Error("optimizer: parameter list changed between steps");
    for (auto* p : params) {
      first_.emplace_back(p->value.size(), T(0));
      second_.emplace_back(p->value.size(), T(0));
    }
  }

  OptimizerConfig config_;
  std::vector<std::vector<T>> first_;   // Adam m / SGD momentum buffer
  std::vector<std::vector<T>> second_;  // Adam v
  std::size_t steps_ = 0;
};

template <class T>
void zero_grad(std::span<Parameter<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace latentflow
