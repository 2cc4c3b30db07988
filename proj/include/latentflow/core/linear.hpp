#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "latentflow/core/ops.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/core/tape.hpp"

namespace latentflow {

/// Fully connected map x·W + b with W stored as in×out.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out)
      : weight(name + ".weight", Tensor<T>({in, out})), bias(name + ".bias", Tensor<T>({out})) {}

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return add_rowwise(matmul(x, tape.param(weight)), tape.param(bias));
  }

  /// He-uniform weights, zero bias.
  void init_he_uniform(Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in_features()));
    for (auto& w : weight.value.storage()) w = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& b : bias.value.storage()) b = T(0);
  }

  void init_truncated_normal(Rng& rng, double stddev) {
    for (auto& w : weight.value.storage()) w = static_cast<T>(rng.truncated_normal(stddev));
    for (auto& b : bias.value.storage()) b = static_cast<T>(rng.truncated_normal(stddev));
  }

  void init_zero() {
    for (auto& w : weight.value.storage()) w = T(0);
    for (auto& b : bias.value.storage()) b = T(0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<T> weight;
  Parameter<T> bias;
};

}  // namespace latentflow
