#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "latentflow/core/error.hpp"
#include "latentflow/core/tensor.hpp"

namespace latentflow {

enum class Norm { l2, linf };

inline const char* norm_name(Norm p) { return p == Norm::l2 ? "l2" : "linf"; }

/// Scales `v` in place onto the ℓ2 ball of radius eps when it lies outside.
/// Vectors within a relative 1e-12 of the radius are left alone, which makes
/// the projection idempotent despite rounding in the rescale.
template <class T>
void project_l2_inplace(std::span<T> v, double eps) {
  if (eps < 0) throw Error("project_l2: eps must be >= 0");
  double sq = 0;
  for (T e : v) sq += static_cast<double>(e) * static_cast<double>(e);
  const double n = std::sqrt(sq);
  if (n <= eps * (1 + 1e-12)) return;
  const double f = eps / n;
  for (T& e : v) e = static_cast<T>(static_cast<double>(e) * f);
}

/// Component-wise clip of `v` into [−eps, eps].
template <class T>
void project_linf_inplace(std::span<T> v, double eps) {
  if (eps < 0) throw Error("project_linf: eps must be >= 0");
  const T lo = static_cast<T>(-eps), hi = static_cast<T>(eps);
  for (T& e : v) e = std::max(lo, std::min(hi, e));
}

template <class T>
void project_inplace(std::span<T> v, Norm p, double eps) {
  if (p == Norm::l2) project_l2_inplace(v, eps);
  else project_linf_inplace(v, eps);
}

template <class T>
Tensor<T> project_l2(Tensor<T> v, double eps) {
  project_l2_inplace(std::span<T>(v.storage()), eps);
  return v;
}

template <class T>
Tensor<T> project_linf(Tensor<T> v, double eps) {
  project_linf_inplace(std::span<T>(v.storage()), eps);
  return v;
}

/// Projects every row of a matrix independently.
template <class T>
void project_rows(Tensor<T>& m, Norm p, double eps) {
  for (std::size_t r = 0; r < m.rows(); ++r) project_inplace(m.row(r), p, eps);
}

template <class T>
double vector_norm(std::span<const T> v, Norm p) {
  double acc = 0;
  for (T e : v) {
    const double a = std::abs(static_cast<double>(e));
    if (p == Norm::l2) acc += a * a;
    else acc = std::max(acc, a);
  }
  return p == Norm::l2 ? std::sqrt(acc) : acc;
}

}  // namespace latentflow
