#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "latentflow/core/error.hpp"
#include "latentflow/core/linear.hpp"
#include "latentflow/core/ops.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/core/tape.hpp"

namespace latentflow {

enum class LayerKind : std::uint8_t { coupling = 1, permutation = 2, actnorm = 3, invlinear = 4 };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::coupling: return "coupling";
    case LayerKind::permutation: return "permutation";
    case LayerKind::actnorm: return "actnorm";
    case LayerKind::invlinear: return "invlinear";
  }
  return "unknown";
}

/// Output of one bijective layer on an N×C batch. `logdet` is N×1, or
/// empty for volume-preserving layers.
template <class T>
struct LayerOutput {
  Var<T> y;
  std::optional<Var<T>> logdet;
};

namespace detail {

template <class T>
void require_width(const char* layer, const Var<T>& x, std::size_t width) {
  if (x.shape().size() != 2 || x.cols() != width) {
    throw ShapeError(std::string(layer) + ": expected N x " + std::to_string(width) + " input, got " +
                     to_string(x.shape()));
  }
}

/// Constant N×1 column holding `value` in every row, tracked through a
/// 1×1 tensor so the gradient reaches `value`.
template <class T>
Var<T> broadcast_scalar_rows(Tape<T>& tape, const Var<T>& scalar, std::size_t rows) {
  return matmul(tape.constant(Tensor<T>({rows, 1}, T(1))), reshape(scalar, {1, 1}));
}

}  // namespace detail

/// Affine coupling: the first `split` coordinates pass through and
/// parameterize a scale s and shift t for the rest,
///   y₂ = x₂ ⊙ exp(s(x₁ ⊕ label)) + t(x₁ ⊕ label).
/// The subnet is linear → ReLU → linear; its output is split with s first,
/// then t. Raw scales are soft-clamped as clamp·tanh(s/clamp).
template <class T>
class CouplingLayer {
 public:
  static constexpr LayerKind kind = LayerKind::coupling;

  CouplingLayer() = default;
  CouplingLayer(std::size_t dim, std::size_t split, std::size_t hidden, std::size_t label_width = 0,
                double scale_clamp = 2.0, std::string name = "coupling")
      : dim_(dim), split_(split), label_width_(label_width), scale_clamp_(scale_clamp) {
    if (split < 1 || split >= dim) {
      throw ShapeError("coupling split must satisfy 1 <= c < C (c=" + std::to_string(split) +
                       ", C=" + std::to_string(dim) + ")");
    }
    if (hidden == 0) throw ShapeError("coupling hidden width must be positive");
    if (!(scale_clamp > 0)) throw Error("coupling scale clamp must be positive");
    hidden_layer_ = Linear<T>(name + ".hidden", split + label_width, hidden);
    output_layer_ = Linear<T>(name + ".out", hidden, 2 * (dim - split));
  }

  std::size_t dim() const { return dim_; }
  std::size_t split() const { return split_; }
  std::size_t hidden() const { return hidden_layer_.out_features(); }
  std::size_t label_width() const { return label_width_; }
  double scale_clamp() const { return scale_clamp_; }
  bool conditional() const { return label_width_ > 0; }

  Linear<T>& hidden_layer() { return hidden_layer_; }
  Linear<T>& output_layer() { return output_layer_; }

  /// He-uniform hidden layer; zero output layer so the coupling starts as
  /// the identity.
  void init(Rng& rng) {
    hidden_layer_.init_he_uniform(rng);
    output_layer_.init_zero();
  }

  /// Clamped scale and shift for the conditioning half, each N×(C−c).
  std::pair<Var<T>, Var<T>> scale_shift(Tape<T>& tape, const Var<T>& x1, const std::optional<Var<T>>& label) {
    Var<T> in = x1;
    if (conditional()) {
      if (!label) throw ShapeError("conditional coupling requires a label");
      detail::require_width("coupling label", *label, label_width_);
      in = concat_cols(x1, *label);
    } else if (label) {
      throw ShapeError("unconditional coupling given a label");
    }
    Var<T> h = relu(hidden_layer_(tape, in));
    Var<T> st = output_layer_(tape, h);
    const std::size_t w = dim_ - split_;
    const T clamp = static_cast<T>(scale_clamp_);
    Var<T> s = scale(tanh(scale(slice_cols(st, 0, w), T(1) / clamp)), clamp);
    Var<T> t = slice_cols(st, w, 2 * w);
    return {s, t};
  }

  LayerOutput<T> forward(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>& label) {
    detail::require_width("coupling", x, dim_);
    Var<T> x1 = slice_cols(x, 0, split_);
    Var<T> x2 = slice_cols(x, split_, dim_);
    auto [s, t] = scale_shift(tape, x1, label);
    Var<T> y2 = add(mul(x2, exp(s)), t);
    return {concat_cols(x1, y2), sum_cols(s)};
  }

  Var<T> inverse(Tape<T>& tape, const Var<T>& y, const std::optional<Var<T>>& label) {
    detail::require_width("coupling", y, dim_);
    Var<T> y1 = slice_cols(y, 0, split_);
    Var<T> y2 = slice_cols(y, split_, dim_);
    auto [s, t] = scale_shift(tape, y1, label);
    Var<T> x2 = mul(sub(y2, t), exp(neg(s)));
    return concat_cols(y1, x2);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    hidden_layer_.collect(out);
    output_layer_.collect(out);
  }

 private:
  std::size_t dim_ = 0;
  std::size_t split_ = 0;
  std::size_t label_width_ = 0;
  double scale_clamp_ = 2.0;
  Linear<T> hidden_layer_;
  Linear<T> output_layer_;
};

/// Fixed coordinate permutation, y[:, i] = x[:, perm[i]].
template <class T>
class PermutationLayer {
 public:
  static constexpr LayerKind kind = LayerKind::permutation;

  PermutationLayer() = default;
  explicit PermutationLayer(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
    std::vector<bool> seen(perm_.size(), false);
    for (auto p : perm_) {
      if (p >= perm_.size() || seen[p]) throw Error("permutation layer: not a bijection");
      seen[p] = true;
    }
    inverse_.resize(perm_.size());
    for (std::size_t i = 0; i < perm_.size(); ++i) inverse_[perm_[i]] = i;
  }
  static PermutationLayer random(std::size_t dim, Rng& rng) { return PermutationLayer(rng.permutation(dim)); }

  std::size_t dim() const { return perm_.size(); }
  const std::vector<std::size_t>& permutation() const { return perm_; }

  LayerOutput<T> forward(Tape<T>&, const Var<T>& x, const std::optional<Var<T>>&) {
    detail::require_width("permutation", x, dim());
    return {permute_cols<T>(x, perm_), std::nullopt};
  }

  Var<T> inverse(Tape<T>&, const Var<T>& y, const std::optional<Var<T>>&) {
    detail::require_width("permutation", y, dim());
    return permute_cols<T>(y, inverse_);
  }

  void collect(std::vector<Parameter<T>*>&) {}

 private:
  std::vector<std::size_t> perm_;
  std::vector<std::size_t> inverse_;
};

/// Per-coordinate affine map y = x ⊙ exp(log_scale) + bias with
/// data-dependent initialization.
template <class T>
class ActNormLayer {
 public:
  static constexpr LayerKind kind = LayerKind::actnorm;

  ActNormLayer() = default;
  explicit ActNormLayer(std::size_t dim, std::string name = "actnorm")
      : log_scale_(name + ".log_scale", Tensor<T>({dim})), bias_(name + ".bias", Tensor<T>({dim})) {}

  std::size_t dim() const { return bias_.value.size(); }
  bool initialized() const { return initialized_; }
  void set_initialized(bool v) { initialized_ = v; }

  Parameter<T>& log_scale() { return log_scale_; }
  Parameter<T>& bias() { return bias_; }
  T scale_at(std::size_t i) const { return std::exp(log_scale_.value[i]); }

  void set(std::span<const T> scale, std::span<const T> bias) {
    if (scale.size() != dim() || bias.size() != dim()) throw ShapeError("actnorm: parameter width mismatch");
    for (std::size_t i = 0; i < dim(); ++i) {
      if (!(scale[i] > 0)) throw Error("actnorm: scale must be strictly positive");
      log_scale_.value[i] = std::log(scale[i]);
      bias_.value[i] = bias[i];
    }
    initialized_ = true;
  }

  /// Standardizes the batch: scale = 1/std, bias = −mean/std, using the
  /// population (1/N) statistics so the transformed batch has mean 0 and
  /// variance 1.
  void initialize(const Tensor<T>& batch) {
    if (batch.rank() != 2 || batch.cols() != dim()) throw ShapeError("actnorm initialize: batch width mismatch");
    const std::size_t n = batch.rows();
    if (n < 2) throw DataError("actnorm initialize: need at least 2 samples");
    for (std::size_t c = 0; c < dim(); ++c) {
      double mean = 0;
      for (std::size_t r = 0; r < n; ++r) mean += batch(r, c);
      mean /= static_cast<double>(n);
      double var = 0;
      for (std::size_t r = 0; r < n; ++r) var += (batch(r, c) - mean) * (batch(r, c) - mean);
      var /= static_cast<double>(n);
      if (!(var > 0)) throw DataError("actnorm initialize: zero variance in coordinate " + std::to_string(c));
      const double sd = std::sqrt(var);
      log_scale_.value[c] = static_cast<T>(-std::log(sd));
      bias_.value[c] = static_cast<T>(-mean / sd);
    }
    initialized_ = true;
  }

  LayerOutput<T> forward(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>&) {
    detail::require_width("actnorm", x, dim());
    Var<T> ls = tape.param(log_scale_);
    Var<T> y = add_rowwise(mul_rowwise(x, exp(ls)), tape.param(bias_));
    return {y, detail::broadcast_scalar_rows(tape, sum(ls), x.rows())};
  }

  Var<T> inverse(Tape<T>& tape, const Var<T>& y, const std::optional<Var<T>>&) {
    detail::require_width("actnorm", y, dim());
    Var<T> ls = tape.param(log_scale_);
    return mul_rowwise(add_rowwise(y, neg(tape.param(bias_))), exp(neg(ls)));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&log_scale_);
    out.push_back(&bias_);
  }

 private:
  Parameter<T> log_scale_;
  Parameter<T> bias_;
  bool initialized_ = false;
};

/// Invertible linear mixing y = W x with W = P·L·U stored in factored
/// form: a fixed permutation P, unit-lower L, and upper U whose diagonal
/// is sign ⊙ exp(log_diag). Invertible for any parameter values.
template <class T>
class InvLinearLayer {
 public:
  static constexpr LayerKind kind = LayerKind::invlinear;

  InvLinearLayer() = default;
  explicit InvLinearLayer(std::size_t dim, std::string name = "invlinear")
      : perm_(identity_perm(dim)),
        sign_(dim, T(1)),
        lower_(name + ".lower", Tensor<T>({dim, dim})),
        upper_(name + ".upper", Tensor<T>({dim, dim})),
        log_diag_(name + ".log_diag", Tensor<T>({dim})) {}

  /// Factorizes an arbitrary nonsingular W with partial pivoting.
  static InvLinearLayer from_matrix(const Tensor<T>& w, std::string name = "invlinear") {
    const std::size_t n = w.dim(0);
    if (w.rank() != 2 || w.dim(1) != n) throw ShapeError("invlinear: square matrix required");
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) m(i, j) = static_cast<double>(w(i, j));
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    const Eigen::MatrixXd packed = lu.matrixLU();
    // lu: P_e · W = L · U, so W = P_eᵀ · L · U
    const Eigen::MatrixXd p = lu.permutationP().transpose().toDenseMatrix().template cast<double>();
    InvLinearLayer layer(n, std::move(name));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (p(i, j) != 0.0) layer.perm_[i] = j;
        if (j < i) layer.lower_.value(i, j) = static_cast<T>(packed(i, j));
        if (j > i) layer.upper_.value(i, j) = static_cast<T>(packed(i, j));
      }
      const double d = packed(i, i);
      if (d == 0.0) throw NumericError("invlinear: singular matrix");
      layer.sign_[i] = d < 0 ? T(-1) : T(1);
      layer.log_diag_.value[i] = static_cast<T>(std::log(std::abs(d)));
    }
    return layer;
  }

  /// Random rotation (QR of a Gaussian matrix), then factorized.
  static InvLinearLayer random_orthogonal(std::size_t dim, Rng& rng, std::string name = "invlinear") {
    Eigen::MatrixXd g(dim, dim);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ();
    Tensor<T> w({dim, dim});
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) w(i, j) = static_cast<T>(q(i, j));
    return from_matrix(w, std::move(name));
  }

  std::size_t dim() const { return perm_.size(); }
  const std::vector<std::size_t>& row_permutation() const { return perm_; }
  const std::vector<T>& diag_sign() const { return sign_; }
  Parameter<T>& lower() { return lower_; }
  Parameter<T>& upper() { return upper_; }
  Parameter<T>& log_diag() { return log_diag_; }

  void set_structure(std::vector<std::size_t> perm, std::vector<T> sign) {
    if (perm.size() != dim() || sign.size() != dim()) throw ShapeError("invlinear: structure width mismatch");
    perm_ = std::move(perm);
    sign_ = std::move(sign);
  }

  /// Reconstructed W = P·L·U as a plain matrix.
  Tensor<T> weight() const {
    const std::size_t n = dim();
    Tensor<T> lu({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t k = 0; k <= std::min(i, j); ++k) s += l_at(i, k) * u_at(k, j);
        lu(i, j) = s;
      }
    Tensor<T> w({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w(i, j) = lu(perm_[i], j);
    return w;
  }

  T log_abs_det() const {
    T s = 0;
    for (std::size_t i = 0; i < dim(); ++i) s += log_diag_.value[i];
    return s;
  }

  LayerOutput<T> forward(Tape<T>& tape, const Var<T>& x, const std::optional<Var<T>>&) {
    detail::require_width("invlinear", x, dim());
    const std::size_t n = dim();
    Tensor<T> lower_mask({n, n}), upper_mask({n, n}), eye = Tensor<T>::eye(n), pmat({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      pmat(i, perm_[i]) = T(1);
      for (std::size_t j = 0; j < n; ++j) {
        if (j < i) lower_mask(i, j) = T(1);
        if (j > i) upper_mask(i, j) = T(1);
      }
    }
    Var<T> ld = tape.param(log_diag_);
    Var<T> l = add(mul(tape.param(lower_), tape.constant(lower_mask)), tape.constant(eye));
    Var<T> diag_row = reshape(mul(exp(ld), tape.constant(Tensor<T>({n}, sign_))), {1, n});
    Var<T> diag = mul(matmul(tape.constant(Tensor<T>({n, 1}, T(1))), diag_row), tape.constant(eye));
    Var<T> u = add(mul(tape.param(upper_), tape.constant(upper_mask)), diag);
    Var<T> w = matmul(tape.constant(pmat), matmul(l, u));
    Var<T> y = matmul(x, transpose(w));
    return {y, detail::broadcast_scalar_rows(tape, sum(ld), x.rows())};
  }

  /// Differentiable in the input only; W⁻¹ enters as a constant.
  Var<T> inverse(Tape<T>& tape, const Var<T>& y, const std::optional<Var<T>>&) {
    detail::require_width("invlinear", y, dim());
    return matmul(y, tape.constant(inverse_weight_transposed()));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&lower_);
    out.push_back(&upper_);
    out.push_back(&log_diag_);
  }

 private:
  static std::vector<std::size_t> identity_perm(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return p;
  }

  T l_at(std::size_t i, std::size_t j) const { return i == j ? T(1) : (j < i ? lower_.value(i, j) : T(0)); }
  T u_at(std::size_t i, std::size_t j) const {
    if (i == j) return sign_[i] * std::exp(log_diag_.value[i]);
    return j > i ? upper_.value(i, j) : T(0);
  }

  // (W⁻¹)ᵀ via W⁻¹ = U⁻¹ L⁻¹ Pᵀ with triangular substitution.
  Tensor<T> inverse_weight_transposed() const {
    const std::size_t n = dim();
    Tensor<T> inv({n, n});  // inv = W⁻¹
    std::vector<T> col(n);
    for (std::size_t e = 0; e < n; ++e) {
      // solve P L U x = e_e; the right-hand side of L U x is e at perm[e]
      for (std::size_t i = 0; i < n; ++i) col[i] = i == perm_[e] ? T(1) : T(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < i; ++k) col[i] -= l_at(i, k) * col[k];
      for (std::size_t i = n; i-- > 0;) {
        for (std::size_t k = i + 1; k < n; ++k) col[i] -= u_at(i, k) * col[k];
        col[i] /= u_at(i, i);
      }
      for (std::size_t i = 0; i < n; ++i) inv(i, e) = col[i];
    }
    Tensor<T> t({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) t(i, j) = inv(j, i);
    return t;
  }

  std::vector<std::size_t> perm_;
  std::vector<T> sign_;
  Parameter<T> lower_;
  Parameter<T> upper_;
  Parameter<T> log_diag_;
};

}  // namespace latentflow
