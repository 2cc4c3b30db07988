#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/tensor.hpp"

namespace latentflow {

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

/// Labeled inputs scaled to [0, 1], one sample per row.
template <class T>
struct Dataset {
  Tensor<T> x;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  Split split = Split::train;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return x.cols(); }

  void validate() const {
    if (labels.empty()) throw DataError("dataset '" + provenance + "' is empty");
    if (x.rank() != 2 || x.rows() != labels.size()) {
      throw DataError("dataset '" + provenance + "': " + std::to_string(x.rows()) + " inputs but " +
                      std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= classes) {
        throw DataError("dataset '" + provenance + "': label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " out of range for " + std::to_string(classes) + " classes");
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] >= T(0) && x[i] <= T(1))) {
        throw DataError("dataset '" + provenance + "': input value outside [0,1] at flat index " + std::to_string(i));
      }
    }
  }

  Dataset select(std::span<const std::size_t> idx) const {
    Dataset out{x.gather_rows(idx), {}, classes, split, provenance};
    out.labels.reserve(idx.size());
    for (auto i : idx) out.labels.push_back(labels.at(i));
    return out;
  }

  template <class U>
  Dataset<U> cast() const {
    return Dataset<U>{x.template cast<U>(), labels, classes, split, provenance};
  }
};

}  // namespace latentflow
