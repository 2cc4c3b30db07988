#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "latentflow/attacks/projection.hpp"
#include "latentflow/classify/loss.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/flow/model.hpp"

namespace latentflow {

enum class AttackKind { none, randomized_la, adversarial_la, pgd_image };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::randomized_la: return "randomized_la";
    case AttackKind::adversarial_la: return "adversarial_la";
    case AttackKind::pgd_image: return "pgd_image";
  }
  return "none";
}

/// One perturbation procedure with its budget. `truncate` selects the
/// norm-projected randomized attack; without it the Gaussian draw is used
/// as-is and no budget applies.
struct PerturbationSpec {
  AttackKind kind = AttackKind::none;
  Norm norm = Norm::l2;
  double epsilon = 0.0;
  double alpha = 0.0;
  std::size_t steps = 0;
  bool truncate = true;
  std::uint64_t seed = 0;

  bool latent() const { return kind == AttackKind::randomized_la || kind == AttackKind::adversarial_la; }
  bool iterative() const { return kind == AttackKind::adversarial_la || kind == AttackKind::pgd_image; }

  void validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("perturbation: epsilon must be finite and >= 0");
    if (iterative() && steps > 0 && !(alpha > 0)) throw ConfigError("perturbation: alpha must be > 0 for iterative attacks");
  }

  std::string describe() const {
    if (kind == AttackKind::none) return "none";
    std::ostringstream os;
    os << attack_kind_name(kind) << '[' << norm_name(norm) << ", eps=" << epsilon;
    if (iterative()) os << ", alpha=" << alpha << ", k=" << steps;
    if (kind == AttackKind::randomized_la && !truncate) os << ", untruncated";
    os << ']';
    return os.str();
  }
};

template <class T>
struct AttackResult {
  Tensor<T> x_tilde;
  std::optional<Tensor<T>> delta;  // latent Δ_z, latent kinds only
  std::vector<double> loss;         // classifier loss at x̃ (iterative kinds)
  std::vector<double> delta_norm;   // ‖Δ_z‖ for latent kinds, ‖x̃ − x‖ for pgd_image
  std::size_t skipped_steps = 0;    // per-row steps skipped for a vanishing gradient
  std::vector<std::size_t> failed_rows;
  std::vector<Tensor<T>> iterates;  // Δ⁰..Δᵏ when requested
};

/// Per-call controls. Row r uses the RNG stream derived from
/// (spec.seed, stream, sample_ids[r]); ids default to 0..N−1.
struct AttackOptions {
  std::uint64_t stream = 0;
  std::vector<std::size_t> sample_ids;
  /// When false, rows whose result is non-finite are reported in
  /// failed_rows (their x̃ is the clean input) instead of raising.
  bool throw_on_failure = true;
  bool record_iterates = false;
};

namespace detail {

inline std::vector<std::size_t> sample_ids(const AttackOptions& o, std::size_t n) {
  if (o.sample_ids.empty()) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return ids;
  }
  if (o.sample_ids.size() != n) throw ShapeError("attack: one sample id per row required");
  return o.sample_ids;
}

template <class T>
bool row_finite(std::span<const T> r) {
  return std::all_of(r.begin(), r.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
}

/// Δ⁰: uniform in the ℓ∞ box, or a Gaussian direction at a uniform radius for ℓ2.
template <class T>
void random_start(std::span<T> row, Norm p, double eps, Rng& rng) {
  if (p == Norm::linf) {
    for (T& v : row) v = static_cast<T>(rng.uniform(-eps, eps));
    return;
  }
  double sq = 0;
  for (T& v : row) {
    v = static_cast<T>(rng.normal());
    sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double radius = eps * rng.uniform();
  const double n = std::sqrt(sq);
  const double f = n > 0 ? radius / n : 0.0;
  for (T& v : row) v = static_cast<T>(static_cast<double>(v) * f);
}

template <class T>
void handle_failure(AttackResult<T>& res, const AttackOptions& opt, const std::vector<std::size_t>& ids,
                    std::size_t row, const Tensor<T>& clean, const char* what) {
  if (opt.throw_on_failure) {
    throw NumericError(std::string(what) + ": non-finite result for sample " + std::to_string(ids[row]));
  }
  res.failed_rows.push_back(row);
  auto dst = res.x_tilde.row(row);
  auto src = clean.row(row);
  std::copy(src.begin(), src.end(), dst.begin());
}

template <class T>
std::optional<Tensor<T>> flow_labels(const FlowModel<T>& flow, std::span<const std::size_t> labels) {
  if (!flow.conditional()) return std::nullopt;
  return one_hot<T>(labels, flow.label_width());
}

/// Shared k-step projected ascent on Δ around `base`. `decode` maps the
/// recorded base + Δ to the classifier input; `constrain` is applied to Δ
/// after every projection.
template <class T, class Clf, class Decode, class Constrain>
Tensor<T> projected_ascent(Clf& clf, const Tensor<T>& base, std::span<const std::size_t> labels,
                           const PerturbationSpec& spec, const AttackOptions& opt, const std::vector<std::size_t>& ids,
                           Decode decode, Constrain constrain, AttackResult<T>& res) {
  const std::size_t n = base.rows();
  Tensor<T> delta(base.shape());
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng = Rng::derive(spec.seed, opt.stream, ids[r]);
    random_start(delta.row(r), spec.norm, spec.epsilon, rng);
    project_inplace(delta.row(r), spec.norm, spec.epsilon);
  }
  constrain(delta);
  if (opt.record_iterates) res.iterates.push_back(delta);

  for (std::size_t step = 0; step < spec.steps; ++step) {
    Tape<T> tape(TapeOptions{.params_require_grad = false});
    Var<T> dv = tape.variable(delta);
    Var<T> input = decode(tape, add(tape.constant(base), dv));
    tape.backward(sum(cross_entropy_rows(clf.logits(tape, input), labels)));
    const Tensor<T>& g = tape.grad(dv);
    for (std::size_t r = 0; r < n; ++r) {
      auto gr = g.row(r);
      auto dr = delta.row(r);
      if (!row_finite(gr)) {
        if (opt.throw_on_failure) {
          throw NumericError("attack: non-finite gradient for sample " + std::to_string(ids[r]));
        }
        continue;  // reported when the final decode is checked
      }
      const double gn = vector_norm(gr, spec.norm);
      if (gn < 1e-12) {
        ++res.skipped_steps;
        continue;
      }
      for (std::size_t i = 0; i < dr.size(); ++i) {
        const double gi = static_cast<double>(gr[i]);
        const double s = spec.norm == Norm::l2 ? gi / gn : (gi > 0 ? 1.0 : (gi < 0 ? -1.0 : 0.0));
        dr[i] = static_cast<T>(static_cast<double>(dr[i]) + spec.alpha * s);
      }
      project_inplace(dr, spec.norm, spec.epsilon);
    }
    constrain(delta);
    if (opt.record_iterates) res.iterates.push_back(delta);
  }
  return delta;
}

template <class T, class Clf>
std::vector<double> row_losses(Clf& clf, const Tensor<T>& x, std::span<const std::size_t> labels) {
  Tape<T> tape(TapeOptions{.grad_enabled = false});
  auto l = cross_entropy_rows(clf.logits(tape, tape.constant(x)), labels).value();
  return std::vector<double>(l.storage().begin(), l.storage().end());
}

}  // namespace detail

/// Randomized latent attack: x̃ = F⁻¹(F(x) + Δ) with Δ = Π(ε·η), η ~ N(0, I),
/// or Δ = ε·η when the spec is untruncated.
template <class T>
AttackResult<T> randomized_la(FlowModel<T>& flow, const Tensor<T>& x, std::span<const std::size_t> labels,
                              const PerturbationSpec& spec, const AttackOptions& opt = {}) {
  if (spec.kind != AttackKind::randomized_la) throw ConfigError("randomized_la: spec kind mismatch");
  spec.validate();
  const std::size_t n = x.rows();
  const auto ids = detail::sample_ids(opt, n);
  auto cond = detail::flow_labels(flow, labels);
  AttackResult<T> res;
  Tensor<T> z = flow.encode(x, cond).z;
  Tensor<T> delta(z.shape());
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng = Rng::derive(spec.seed, opt.stream, ids[r]);
    auto dr = delta.row(r);
    for (T& v : dr) v = static_cast<T>(spec.epsilon * rng.normal());
    if (spec.truncate) project_inplace(dr, spec.norm, spec.epsilon);
  }
  Tensor<T> moved = z;
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += delta[i];
  res.x_tilde = flow.decode(moved, cond);
  for (std::size_t r = 0; r < n; ++r) {
    res.delta_norm.push_back(vector_norm(std::span<const T>(delta.row(r)), spec.norm));
    if (!detail::row_finite(std::span<const T>(res.x_tilde.row(r)))) {
      detail::handle_failure(res, opt, ids, r, x, "randomized_la");
    }
  }
  res.delta = std::move(delta);
  return res;
}

/// Adversarial latent attack: k steps of projected ascent on the
/// classifier loss with respect to Δ_z, differentiating through F⁻¹.
template <class T, class Clf>
AttackResult<T> adversarial_la(FlowModel<T>& flow, Clf& clf, const Tensor<T>& x, std::span<const std::size_t> labels,
                               const PerturbationSpec& spec, const AttackOptions& opt = {}) {
  if (spec.kind != AttackKind::adversarial_la) throw ConfigError("adversarial_la: spec kind mismatch");
  spec.validate();
  const std::size_t n = x.rows();
  const auto ids = detail::sample_ids(opt, n);
  auto cond = detail::flow_labels(flow, labels);
  AttackResult<T> res;
  Tensor<T> z = flow.encode(x, cond).z;
  auto decode = [&](Tape<T>& tape, const Var<T>& moved) {
    std::optional<Var<T>> lv;
    if (cond) lv = tape.constant(*cond);
    return flow.inverse(tape, moved, lv);
  };
  Tensor<T> delta = detail::projected_ascent(clf, z, labels, spec, opt, ids, decode, [](Tensor<T>&) {}, res);

  Tensor<T> moved = z;
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += delta[i];
  res.x_tilde = flow.decode(moved, cond);
  for (std::size_t r = 0; r < n; ++r) {
    res.delta_norm.push_back(vector_norm(std::span<const T>(delta.row(r)), spec.norm));
    if (!detail::row_finite(std::span<const T>(res.x_tilde.row(r)))) {
      detail::handle_failure(res, opt, ids, r, x, "adversarial_la");
    }
  }
  res.loss = detail::row_losses(clf, res.x_tilde, labels);
  res.delta = std::move(delta);
  return res;
}

/// Image-space PGD. Same iteration as adversarial_la with F = id; after
/// each ball projection, components of Δ that would leave [0, 1] are
/// moved to the boundary.
template <class T, class Clf>
AttackResult<T> pgd_image(Clf& clf, const Tensor<T>& x, std::span<const std::size_t> labels,
                          const PerturbationSpec& spec, const AttackOptions& opt = {}) {
  if (spec.kind != AttackKind::pgd_image) throw ConfigError("pgd_image: spec kind mismatch");
  spec.validate();
  const std::size_t n = x.rows();
  const auto ids = detail::sample_ids(opt, n);
  AttackResult<T> res;
  auto clip = [&](Tensor<T>& delta) {
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const T v = x[i] + delta[i];
      if (v > T(1)) delta[i] = T(1) - x[i];
      else if (v < T(0)) delta[i] = -x[i];
    }
  };
  auto decode = [](Tape<T>&, const Var<T>& moved) { return moved; };
  Tensor<T> delta = detail::projected_ascent(clf, x, labels, spec, opt, ids, decode, clip, res);

  res.x_tilde = x;
  for (std::size_t i = 0; i < delta.size(); ++i) res.x_tilde[i] = std::clamp(x[i] + delta[i], T(0), T(1));
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<T> d(x.cols());
    for (std::size_t c = 0; c < d.size(); ++c) d[c] = res.x_tilde(r, c) - x(r, c);
    res.delta_norm.push_back(vector_norm(std::span<const T>(d), spec.norm));
    if (!detail::row_finite(std::span<const T>(res.x_tilde.row(r)))) {
      detail::handle_failure(res, opt, ids, r, x, "pgd_image");
    }
  }
  res.loss = detail::row_losses(clf, res.x_tilde, labels);
  return res;
}

/// Applies `spec` to a batch. `flow` is required for latent kinds.
template <class T, class Clf>
AttackResult<T> perturb(const PerturbationSpec& spec, FlowModel<T>* flow, Clf& clf, const Tensor<T>& x,
                        std::span<const std::size_t> labels, const AttackOptions& opt = {}) {
  if (spec.latent() && flow == nullptr) {
    throw ConfigError(std::string(attack_kind_name(spec.kind)) + " requires a flow model");
  }
  switch (spec.kind) {
    case AttackKind::none: {
      AttackResult<T> res;
      res.x_tilde = x;
      res.delta_norm.assign(x.rows(), 0.0);
      return res;
    }
    case AttackKind::randomized_la: return randomized_la(*flow, x, labels, spec, opt);
    case AttackKind::adversarial_la: return adversarial_la(*flow, clf, x, labels, spec, opt);
    case AttackKind::pgd_image: return pgd_image(clf, x, labels, spec, opt);
  }
  throw ConfigError("unknown attack kind");
}

}  // namespace latentflow
