#pragma once

// Differentiable primitives over Var. Every binary elementwise primitive
// requires identical shapes; the only broadcast is the explicit
// row-vector form (add_rowwise / mul_rowwise). Reductions run left to
// right so results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/core/tape.hpp"
#include "latentflow/core/tensor.hpp"

namespace latentflow {

namespace detail {

template <class T>
void require_same_shape(std::string_view op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ (implicit broadcasting is not supported)");
  }
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands recorded on different tapes");
}

template <class T>
void require_matrix(std::string_view op, const Var<T>& a) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(a.shape()));
  }
}

template <class T, class F, class D>
Var<T> unary(std::string_view name, const Var<T>& a, F f, D dfdx) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(name, std::move(y), {a}, [a, dfdx](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(a);
    Tensor<T> gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * dfdx(xv[i]);
    tape.accumulate(a, gx);
  });
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g);
    Tensor<T> ng(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
    tape.accumulate(b, ng);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(a);
    const auto& yv = tape.value(b);
    if (tape.requires_grad(a)) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * yv[i];
      tape.accumulate(a, ga);
    }
    if (tape.requires_grad(b)) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * xv[i];
      tape.accumulate(b, gb);
    }
  });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return detail::unary<T>("neg", a, [](T x) { return -x; }, [](T) { return T(-1); });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  return detail::unary<T>("scale", a, [c](T x) { return c * x; }, [c](T) { return c; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return detail::unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T) { return T(1); });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T x) {
        const T t = std::tanh(x);
        return T(1) - t * t;
      });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

/// Subgradient convention at 0: derivative +1.
template <class T>
Var<T> abs(const Var<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); }, [](T x) { return x >= T(0) ? T(1) : T(-1); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

/// Forward-only: sign has no useful derivative, so recording it on a
/// gradient-tracked input raises UnsupportedPrimitive.
template <class T>
Var<T> sign(const Var<T>& a) {
  if (a.requires_grad()) throw UnsupportedPrimitive("sign");
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
  return a.tape().constant(std::move(y));
}

/// Sum of all elements, shape [1].
template <class T>
Var<T> sum(const Var<T>& a) {
  const auto& x = a.value();
  T s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  return a.tape().record("sum", Tensor<T>::scalar(s), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, Tensor<T>(tape.value(a).shape(), g[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Row sums of an N×D matrix, shape N×1.
template <class T>
Var<T> sum_cols(const Var<T>& a) {
  detail::require_matrix("sum_cols", a);
  const auto& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> y({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < d; ++c) s += x(r, c);
    y[r] = s;
  }
  return a.tape().record("sum_cols", std::move(y), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    const auto& shape = tape.value(a).shape();
    Tensor<T> gx(shape);
    const std::size_t d = gx.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx(r, c) = g[r];
    tape.accumulate(a, gx);
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix("transpose", a);
  const auto& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> y({d, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) y(c, r) = x(r, c);
  return a.tape().record("transpose", std::move(y), {a}, [a, n, d](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> gx({n, d});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gx(r, c) = g(c, r);
    tape.accumulate(a, gx);
  });
}

namespace detail {

// out(M×N) = a(M×K) · b(K×N), accumulation over k in index order.
template <class T>
void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::fill(out.storage().begin(), out.storage().end(), T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const auto& x = a.value();
  const auto& w = b.value();
  if (x.cols() != w.rows()) {
    throw ShapeError("matmul: inner extents differ, " + to_string(x.shape()) + " x " + to_string(w.shape()));
  }
  Tensor<T> out({x.rows(), w.cols()});
  detail::gemm(x, w, out);
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(a);
    const auto& wv = tape.value(b);
    const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
    if (tape.requires_grad(a)) {
      // dA = G · Bᵀ
      Tensor<T> ga({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += g(i, j) * wv(p, j);
          ga(i, p) = s;
        }
      tape.accumulate(a, ga);
    }
    if (tape.requires_grad(b)) {
      // dB = Aᵀ · G
      Tensor<T> gb({k, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = xv(i, p);
          for (std::size_t j = 0; j < n; ++j) gb(p, j) += av * g(i, j);
        }
      tape.accumulate(b, gb);
    }
  });
}

namespace detail {

template <class T>
std::size_t rowvec_width(std::string_view op, const Var<T>& a, const Var<T>& v) {
  require_matrix(op, a);
  const auto& vs = v.shape();
  const std::size_t d = a.value().cols();
  const bool ok = (vs.size() == 1 && vs[0] == d) || (vs.size() == 2 && vs[0] == 1 && vs[1] == d);
  if (!ok) {
    throw ShapeError(std::string(op) + ": row vector of width " + std::to_string(d) + " expected, got " +
                     to_string(vs));
  }
  return d;
}

}  // namespace detail

/// a(N×D) + v broadcast over rows; v has shape [D] or [1,D].
template <class T>
Var<T> add_rowwise(const Var<T>& a, const Var<T>& v) {
  detail::require_same_tape(a, v);
  const std::size_t d = detail::rowvec_width("add_rowwise", a, v);
  const auto& x = a.value();
  const auto& b = v.value();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = x(r, c) + b[c];
  return a.tape().record("add_rowwise", std::move(out), {a, v}, [a, v, d](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g);
    if (tape.requires_grad(v)) {
      Tensor<T> gv(tape.value(v).shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gv[c] += g(r, c);
      tape.accumulate(v, gv);
    }
  });
}

/// a(N×D) ⊙ v broadcast over rows.
template <class T>
Var<T> mul_rowwise(const Var<T>& a, const Var<T>& v) {
  detail::require_same_tape(a, v);
  const std::size_t d = detail::rowvec_width("mul_rowwise", a, v);
  const auto& x = a.value();
  const auto& s = v.value();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = x(r, c) * s[c];
  return a.tape().record("mul_rowwise", std::move(out), {a, v}, [a, v, d](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(a);
    const auto& sv = tape.value(v);
    if (tape.requires_grad(a)) {
      Tensor<T> ga(xv.shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) ga(r, c) = g(r, c) * sv[c];
      tape.accumulate(a, ga);
    }
    if (tape.requires_grad(v)) {
      Tensor<T> gv(sv.shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gv[c] += g(r, c) * xv(r, c);
      tape.accumulate(v, gv);
    }
  });
}

/// Columns [begin, end) of an N×D matrix.
template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end) {
  detail::require_matrix("slice_cols", a);
  const auto& x = a.value();
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for width " + std::to_string(x.cols()));
  }
  const std::size_t n = x.rows(), w = end - begin;
  Tensor<T> out({n, w});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = x(r, begin + c);
  return a.tape().record("slice_cols", std::move(out), {a}, [a, begin, w](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> gx(tape.value(a).shape());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) gx(r, begin + c) = g(r, c);
    tape.accumulate(a, gx);
  });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_matrix("concat_cols", a);
  detail::require_matrix("concat_cols", b);
  const auto& x = a.value();
  const auto& y = b.value();
  if (x.rows() != y.rows()) throw ShapeError("concat_cols: row counts differ");
  const std::size_t n = x.rows(), wa = x.cols(), wb = y.cols();
  Tensor<T> out({n, wa + wb});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < wa; ++c) out(r, c) = x(r, c);
    for (std::size_t c = 0; c < wb; ++c) out(r, wa + c) = y(r, c);
  }
  return a.tape().record("concat_cols", std::move(out), {a, b}, [a, b, wa, wb](Tape<T>& tape, const Tensor<T>& g) {
    const std::size_t n = g.rows();
    if (tape.requires_grad(a)) {
      Tensor<T> ga({n, wa});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < wa; ++c) ga(r, c) = g(r, c);
      tape.accumulate(a, ga);
    }
    if (tape.requires_grad(b)) {
      Tensor<T> gb({n, wb});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < wb; ++c) gb(r, c) = g(r, wa + c);
      tape.accumulate(b, gb);
    }
  });
}

/// out[:, i] = a[:, perm[i]].
template <class T>
Var<T> permute_cols(const Var<T>& a, std::span<const std::size_t> perm) {
  detail::require_matrix("permute_cols", a);
  const auto& x = a.value();
  if (perm.size() != x.cols()) throw ShapeError("permute_cols: permutation length differs from width");
  std::vector<std::size_t> p(perm.begin(), perm.end());
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < p.size(); ++c) out(r, c) = x(r, p[c]);
  return a.tape().record("permute_cols", std::move(out), {a}, [a, p](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> gx(g.shape());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < p.size(); ++c) gx(r, p[c]) += g(r, c);
    tape.accumulate(a, gx);
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  const auto& x = a.value();
  Tensor<T> y = x.reshaped(shape);
  return a.tape().record("reshape", std::move(y), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(a, g.reshaped(tape.value(a).shape()));
  });
}

/// Row-wise log-sum-exp of an N×K matrix, shape N×1, max-shifted.
template <class T>
Var<T> logsumexp_rows(const Var<T>& a) {
  detail::require_matrix("logsumexp_rows", a);
  const auto& x = a.value();
  const std::size_t n = x.rows(), k = x.cols();
  Tensor<T> out({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    T m = x(r, 0);
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, x(r, c));
    T s = 0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(x(r, c) - m);
    out[r] = m + std::log(s);
  }
  Tensor<T> lse = out;
  return a.tape().record("logsumexp_rows", std::move(out), {a}, [a, lse](Tape<T>& tape, const Tensor<T>& g) {
    const auto& xv = tape.value(a);
    Tensor<T> gx(xv.shape());
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < xv.cols(); ++c) gx(r, c) = g[r] * std::exp(xv(r, c) - lse[r]);
    tape.accumulate(a, gx);
  });
}

/// out[r] = a(r, index[r]), shape N×1.
template <class T>
Var<T> pick(const Var<T>& a, std::span<const std::size_t> index) {
  detail::require_matrix("pick", a);
  const auto& x = a.value();
  if (index.size() != x.rows()) throw ShapeError("pick: one index per row required");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor<T> out({x.rows(), 1});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (idx[r] >= x.cols()) throw ShapeError("pick: index out of range");
    out[r] = x(r, idx[r]);
  }
  return a.tape().record("pick", std::move(out), {a}, [a, idx](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> gx(tape.value(a).shape());
    for (std::size_t r = 0; r < idx.size(); ++r) gx(r, idx[r]) = g[r];
    tape.accumulate(a, gx);
  });
}

/// 2-D convolution. x: [N, Cin, H, W], w: [Cout, Cin, KH, KW], b: [Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, w);
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || b.value().size() != ws[0] || stride == 0) {
    throw ShapeError("conv2d: incompatible shapes " + to_string(xs) + " and " + to_string(ws));
  }
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const std::size_t cout = ws[0], kh = ws[2], kw = ws[3];
  if (h + 2 * pad < kh || wd + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;

  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  Tensor<T> out({n, cout, oh, ow});
  auto xat = [&](std::size_t in, std::size_t c, std::ptrdiff_t i, std::ptrdiff_t j) -> T {
    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(h) || j >= static_cast<std::ptrdiff_t>(wd)) return T(0);
    return xv[((in * cin + c) * h + i) * wd + j];
  };
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T s = bv[o];
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                const auto ii = static_cast<std::ptrdiff_t>(i * stride + p) - static_cast<std::ptrdiff_t>(pad);
                const auto jj = static_cast<std::ptrdiff_t>(j * stride + q) - static_cast<std::ptrdiff_t>(pad);
                s += wv[((o * cin + c) * kh + p) * kw + q] * xat(in, c, ii, jj);
              }
          out[((in * cout + o) * oh + i) * ow + j] = s;
        }

  return x.tape().record(
      "conv2d", std::move(out), {x, w, b},
      [x, w, b, stride, pad, n, cin, h, wd, cout, kh, kw, oh, ow](Tape<T>& tape, const Tensor<T>& g) {
        const auto& xv = tape.value(x);
        const auto& wv = tape.value(w);
        Tensor<T> gx(xv.shape()), gw(wv.shape()), gb(tape.value(b).shape());
        for (std::size_t in = 0; in < n; ++in)
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const T go = g[((in * cout + o) * oh + i) * ow + j];
                gb[o] += go;
                for (std::size_t c = 0; c < cin; ++c)
                  for (std::size_t p = 0; p < kh; ++p)
                    for (std::size_t q = 0; q < kw; ++q) {
                      const auto ii = static_cast<std::ptrdiff_t>(i * stride + p) - static_cast<std::ptrdiff_t>(pad);
                      const auto jj = static_cast<std::ptrdiff_t>(j * stride + q) - static_cast<std::ptrdiff_t>(pad);
                      if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) ||
                          jj >= static_cast<std::ptrdiff_t>(wd))
                        continue;
                      const std::size_t xi = ((in * cin + c) * h + ii) * wd + jj;
                      const std::size_t wi = ((o * cin + c) * kh + p) * kw + q;
                      gw[wi] += go * xv[xi];
                      gx[xi] += go * wv[wi];
                    }
              }
        tape.accumulate(x, gx);
        tape.accumulate(w, gw);
        tape.accumulate(b, gb);
      });
}

/// Non-overlapping k×k average pooling of [N, C, H, W]; H and W must be
/// divisible by k.
template <class T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0) {
    throw ShapeError("avg_pool2d: input " + to_string(xs) + " not divisible by kernel");
  }
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], oh = h / k, ow = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  const auto& xv = x.value();
  Tensor<T> out({n, c, oh, ow});
  for (std::size_t b = 0; b < n * c; ++b)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T s = 0;
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t q = 0; q < k; ++q) s += xv[(b * h + i * k + p) * w + j * k + q];
        out[(b * oh + i) * ow + j] = s * inv;
      }
  return x.tape().record("avg_pool2d", std::move(out), {x}, [x, n, c, h, w, oh, ow, k, inv](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> gx(tape.value(x).shape());
    for (std::size_t b = 0; b < n * c; ++b)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const T go = g[(b * oh + i) * ow + j] * inv;
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t q = 0; q < k; ++q) gx[(b * h + i * k + p) * w + j * k + q] += go;
        }
    tape.accumulate(x, gx);
  });
}

/// Applies a primitive by name; used by interpreters that build programs
/// from text. Unknown names raise UnsupportedPrimitive.
template <class T>
Var<T> apply_primitive(std::string_view name, std::span<const Var<T>> args) {
  auto need = [&](std::size_t n) {
    if (args.size() != n) {
      throw Error("primitive '" + std::string(name) + "' takes " + std::to_string(n) + " operand(s)");
    }
  };
  if (name == "add") return need(2), add(args[0], args[1]);
  if (name == "sub") return need(2), sub(args[0], args[1]);
  if (name == "mul") return need(2), mul(args[0], args[1]);
  if (name == "matmul") return need(2), matmul(args[0], args[1]);
  if (name == "add_rowwise") return need(2), add_rowwise(args[0], args[1]);
  if (name == "mul_rowwise") return need(2), mul_rowwise(args[0], args[1]);
  if (name == "concat_cols") return need(2), concat_cols(args[0], args[1]);
  if (name == "neg") return need(1), neg(args[0]);
  if (name == "exp") return need(1), exp(args[0]);
  if (name == "log") return need(1), log(args[0]);
  if (name == "tanh") return need(1), tanh(args[0]);
  if (name == "relu") return need(1), relu(args[0]);
  if (name == "abs") return need(1), abs(args[0]);
  if (name == "square") return need(1), square(args[0]);
  if (name == "sum") return need(1), sum(args[0]);
  if (name == "mean") return need(1), mean(args[0]);
  if (name == "sum_cols") return need(1), sum_cols(args[0]);
  if (name == "transpose") return need(1), transpose(args[0]);
  if (name == "logsumexp_rows") return need(1), logsumexp_rows(args[0]);
  if (name == "sign") return need(1), sign(args[0]);
  throw UnsupportedPrimitive(std::string(name));
}

}  // namespace latentflow
