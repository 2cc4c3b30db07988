#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/ops.hpp"

namespace latentflow {

namespace detail {
inline void check_labels(std::span<const std::size_t> labels, std::size_t classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " out of range for " + std::to_string(classes) + " classes");
    }
  }
}
}  // namespace detail

/// Per-row −log softmax(logits)[label] via log-sum-exp, N×1.
template <class T>
Var<T> cross_entropy_rows(const Var<T>& logits, std::span<const std::size_t> labels) {
  detail::check_labels(labels, logits.cols());
  return sub(logsumexp_rows(logits), pick(logits, labels));
}

/// Mean cross-entropy over the batch.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::size_t> labels) {
  return mean(cross_entropy_rows(logits, labels));
}

/// Cross-entropy of a single logit vector.
template <class T>
double cross_entropy(std::span<const T> logits, std::size_t label) {
  if (logits.empty()) throw ShapeError("cross_entropy: empty logits");
  if (label >= logits.size()) {
    throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) +
                    " classes");
  }
  double m = static_cast<double>(logits[0]);
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  double s = 0;
  for (T v : logits) s += std::exp(static_cast<double>(v) - m);
  return m + std::log(s) - static_cast<double>(logits[label]);
}

/// Index of the largest entry; ties go to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace latentflow
