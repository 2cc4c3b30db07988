#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/ops.hpp"
#include "latentflow/core/tape.hpp"

namespace latentflow {

template <class T>
struct Evaluation {
  Tensor<T> value;
  std::vector<Tensor<T>> gradients;
};

/// Runs `program(tape, vars)` with every input as a gradient-tracked leaf
/// and returns the value with ∂value/∂inputs[i]. A non-scalar value needs
/// `seed` (the cotangent of the output).
template <class T, class Program>
  requires std::invocable<Program&, Tape<T>&, std::span<const Var<T>>>
Evaluation<T> evaluate_with_gradients(Program&& program, std::span<const Tensor<T>> inputs,
                                      std::optional<Tensor<T>> seed = std::nullopt, TapeOptions options = {}) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].all_finite()) throw NumericError("input " + std::to_string(i) + " is not finite");
  }
  options.grad_enabled = true;
  Tape<T> tape(options);
  std::vector<Var<T>> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.variable(in));
  Var<T> out = program(tape, std::span<const Var<T>>(vars));
  Evaluation<T> result{out.value(), {}};
  tape.backward(out, std::move(seed));
  for (const auto& v : vars) result.gradients.push_back(tape.grad(v));
  return result;
}

/// Evaluates `program` without recording backward closures.
template <class T, class Program>
Tensor<T> evaluate(Program&& program, std::span<const Tensor<T>> inputs) {
  Tape<T> tape(TapeOptions{.grad_enabled = false});
  std::vector<Var<T>> vars;
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  return program(tape, std::span<const Var<T>>(vars)).value();
}

struct CoordinateCheck {
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
};

struct CheckReport {
  std::vector<CoordinateCheck> coordinates;
  double max_relative_error = 0;
  std::size_t worst_index = 0;
  double tolerance = 0;
  bool passed = false;
};

struct CheckOptions {
  /// Denominator floor for the relative error |a-n| / max(|a|, |n|, floor),
  /// so coordinates with vanishing derivatives are compared absolutely.
  double scale_floor = 1e-6;
  /// Restrict the check to these coordinates (all when empty).
  std::vector<std::size_t> coordinates;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the reverse-mode gradient of a scalar program at `point`
/// against central differences with the given step.
template <class T, class Program>
CheckReport finite_difference_check(Program&& program, const Tensor<T>& point, double step, double tolerance,
                                    const CheckOptions& options = {}) {
  if (!(step > 0)) throw Error("finite_difference_check: step must be positive");
  auto single = [&](Tape<T>& tape, std::span<const Var<T>> v) { return program(tape, v[0]); };
  const std::vector<Tensor<T>> in{point};
  auto eval = evaluate_with_gradients<T>(single, std::span<const Tensor<T>>(in));
  if (eval.value.size() != 1) throw Error("finite_difference_check: program must be scalar-valued");
  const auto& grad = eval.gradients[0];

  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) coords[i] = i;
  }

  CheckReport report;
  report.tolerance = tolerance;
  for (auto i : coords) {
    if (i >= point.size()) throw Error("finite_difference_check: coordinate out of range");
    Tensor<T> plus = point, minus = point;
    plus[i] += static_cast<T>(step);
    minus[i] -= static_cast<T>(step);
    const std::vector<Tensor<T>> p{plus}, m{minus};
    const double fp = static_cast<double>(evaluate<T>(single, std::span<const Tensor<T>>(p))[0]);
    const double fm = static_cast<double>(evaluate<T>(single, std::span<const Tensor<T>>(m))[0]);
    const double numeric = (fp - fm) / (2.0 * step);
    if (!std::isfinite(numeric)) {
      throw NumericError("non-finite numeric derivative at coordinate " + std::to_string(i));
    }
    const double analytic = static_cast<double>(grad[i]);
    CoordinateCheck c{i, analytic, numeric, relative_error(analytic, numeric, options.scale_floor)};
    if (report.coordinates.empty() || c.relative_error > report.max_relative_error) {
      report.max_relative_error = c.relative_error;
      report.worst_index = i;
    }
    report.coordinates.push_back(c);
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace latentflow
