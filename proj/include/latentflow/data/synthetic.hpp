#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>

#include "latentflow/core/error.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/data/dataset.hpp"

namespace latentflow {

enum class SyntheticKind { gaussian_mixture, two_arcs, rings };

inline const char* synthetic_kind_name(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::gaussian_mixture: return "gaussian_mixture";
    case SyntheticKind::two_arcs: return "two_arcs";
    case SyntheticKind::rings: return "rings";
  }
  return "?";
}

/// Parameters of a 2-D toy problem. Points live in the unit square; labels
/// cycle through the classes so every split is balanced.
struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::gaussian_mixture;
  std::size_t classes = 4;
  double noise = 0.08;
  /// Gaussian mixture only: distance of the component means from the centre.
  double radius = 0.25;
  std::size_t train_size = 2000;
  std::size_t test_size = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic data: need at least 2 classes");
    if (kind == SyntheticKind::two_arcs && classes != 2) throw ConfigError("two_arcs has exactly 2 classes");
    if (!(noise >= 0) || !std::isfinite(noise)) throw ConfigError("synthetic data: noise must be finite and >= 0");
    if (!(radius > 0 && radius < 0.5)) throw ConfigError("synthetic data: radius must lie in (0, 0.5)");
    if (train_size == 0 || test_size == 0) throw ConfigError("synthetic data: sizes must be > 0");
  }
};

namespace detail {

inline double unit_clamp(double v) { return std::clamp(v, 0.0, 1.0); }

template <class T>
void synth_point(const SyntheticSpec& s, std::size_t label, Rng& rng, T* out) {
  constexpr double tau = 2 * std::numbers::pi;
  double x = 0, y = 0;
  switch (s.kind) {
    case SyntheticKind::gaussian_mixture: {
      const double a = tau * static_cast<double>(label) / static_cast<double>(s.classes);
      x = 0.5 + s.radius * std::cos(a) + s.noise * rng.normal();
      y = 0.5 + s.radius * std::sin(a) + s.noise * rng.normal();
      break;
    }
    case SyntheticKind::two_arcs: {
      // Interleaved half circles on [-1, 2] x [-0.5, 1], mapped into the square.
      const double t = std::numbers::pi * rng.uniform();
      double u = label == 0 ? std::cos(t) : 1 - std::cos(t);
      double v = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
      u += s.noise * rng.normal();
      v += s.noise * rng.normal();
      x = (u + 1.25) / 3.5;
      y = (v + 1.0) / 2.5;
      break;
    }
    case SyntheticKind::rings: {
      const double r = 0.45 * static_cast<double>(label + 1) / static_cast<double>(s.classes + 1);
      const double a = tau * rng.uniform();
      const double rr = r + s.noise * rng.normal();
      x = 0.5 + rr * std::cos(a);
      y = 0.5 + rr * std::sin(a);
      break;
    }
  }
  out[0] = static_cast<T>(unit_clamp(x));
  out[1] = static_cast<T>(unit_clamp(y));
}

}  // namespace detail

/// Deterministic in (spec, split): train and test draw from independent streams.
template <class T>
Dataset<T> make_synthetic(const SyntheticSpec& spec, Split split) {
  spec.validate();
  const std::size_t n = split == Split::train ? spec.train_size : spec.test_size;
  Rng rng = Rng::derive(spec.seed, split == Split::train ? 0x7121 : 0x7e57);
  Dataset<T> d{Tensor<T>({n, 2}), std::vector<std::size_t>(n), spec.classes, split,
               std::string(synthetic_kind_name(spec.kind)) + "(classes=" + std::to_string(spec.classes) +
                   ", seed=" + std::to_string(spec.seed) + ")/" + split_name(split)};
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = i % spec.classes;
    detail::synth_point(spec, d.labels[i], rng, d.x.row(i).data());
  }
  return d;
}

}  // namespace latentflow
