#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "latentflow/attacks/attacks.hpp"
#include "latentflow/classify/classifier.hpp"
#include "latentflow/classify/loss.hpp"
#include "latentflow/core/error.hpp"
#include "latentflow/core/tensor.hpp"
#include "latentflow/data/dataset.hpp"
#include "latentflow/flow/model.hpp"

namespace latentflow {

/// Percentage of rows whose argmax logit (ties to the lowest class) equals
/// the label. `clf` needs `Tensor<T> logits(const Tensor<T>&)`.
template <class T, class Clf>
double accuracy(Clf& clf, const Tensor<T>& x, std::span<const std::size_t> labels, std::size_t batch = 1000) {
  if (labels.empty()) throw DataError("accuracy: empty dataset");
  if (x.rows() != labels.size()) throw ShapeError("accuracy: inputs and labels differ in count");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < labels.size(); start += batch) {
    const std::size_t end = std::min(labels.size(), start + batch);
    const Tensor<T> l = clf.logits(x.slice_rows(start, end));
    for (std::size_t r = 0; r < l.rows(); ++r)
      if (argmax(l.row(r)) == labels[start + r]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

template <class T, class Clf>
double accuracy(Clf& clf, const Dataset<T>& data, std::size_t batch = 1000) {
  return accuracy(clf, data.x, std::span<const std::size_t>(data.labels), batch);
}

struct PerturbationStats {
  double mean_l2 = 0;
  double mean_linf = 0;
  std::size_t count = 0;
};

/// Mean ℓ2 and ℓ∞ size of x̃ − x over paired rows. Per-pair norms are summed
/// in sorted order so the result does not depend on the order of pairs.
template <class T>
PerturbationStats perturbation_stats(const Tensor<T>& x, const Tensor<T>& x_tilde) {
  if (x.shape() != x_tilde.shape()) {
    throw ShapeError("perturbation_stats: shapes " + to_string(x.shape()) + " and " + to_string(x_tilde.shape()) +
                     " differ");
  }
  if (x.size() == 0) throw DataError("perturbation_stats: no pairs");
  const std::size_t n = x.rows();
  std::vector<double> l2(n), linf(n);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0, mx = 0;
    auto a = x.row(r), b = x_tilde.row(r);
    for (std::size_t c = 0; c < a.size(); ++c) {
      const double d = static_cast<double>(b[c]) - static_cast<double>(a[c]);
      sq += d * d;
      mx = std::max(mx, std::abs(d));
    }
    l2[r] = std::sqrt(sq);
    linf[r] = mx;
  }
  auto mean = [n](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    double s = 0;
    for (double e : v) s += e;
    return s / static_cast<double>(n);
  };
  return {mean(l2), mean(linf), n};
}

struct RobustnessReport {
  std::string attack;
  double clean_acc = 0;
  double attacked_acc = 0;
  double drop = 0;
  std::size_t evaluated = 0;
  std::size_t failed = 0;  // rows excluded because the attack failed on them
  PerturbationStats size{};
};

/// Clean and attacked accuracy on the same rows. Rows where the attack
/// produces a non-finite result are dropped from both numbers and counted.
template <class T, class Clf>
RobustnessReport robustness_eval(Clf& clf, const PerturbationSpec& attack, FlowModel<T>* flow, const Tensor<T>& x,
                                 std::span<const std::size_t> labels, std::size_t batch = 1000) {
  attack.validate();
  if (labels.empty()) throw DataError("robustness_eval: empty dataset");
  if (x.rows() != labels.size()) throw ShapeError("robustness_eval: inputs and labels differ in count");
  if (attack.latent() && flow == nullptr) {
    throw ConfigError(std::string("robustness_eval: ") + attack_kind_name(attack.kind) + " requires a flow model");
  }
  RobustnessReport rep;
  rep.attack = attack.describe();
  std::vector<std::size_t> kept;
  kept.reserve(labels.size());
  Tensor<T> attacked(x.shape());
  for (std::size_t start = 0; start < labels.size(); start += batch) {
    const std::size_t end = std::min(labels.size(), start + batch);
    AttackOptions opt;
    opt.throw_on_failure = false;
    opt.sample_ids.resize(end - start);
    for (std::size_t i = start; i < end; ++i) opt.sample_ids[i - start] = i;
    auto res = perturb(attack, flow, clf, x.slice_rows(start, end), labels.subspan(start, end - start), opt);
    std::vector<bool> failed(end - start, false);
    for (auto r : res.failed_rows) failed[r] = true;
    for (std::size_t r = 0; r < end - start; ++r) {
      auto src = res.x_tilde.row(r);
      std::copy(src.begin(), src.end(), attacked.row(start + r).begin());
      if (failed[r]) ++rep.failed;
      else kept.push_back(start + r);
    }
  }
  if (kept.empty()) throw NumericError("robustness_eval: the attack failed on every row");
  const Tensor<T> xk = x.gather_rows(kept), ak = attacked.gather_rows(kept);
  std::vector<std::size_t> yk;
  yk.reserve(kept.size());
  for (auto i : kept) yk.push_back(labels[i]);
  rep.evaluated = kept.size();
  rep.clean_acc = accuracy(clf, xk, std::span<const std::size_t>(yk), batch);
  rep.attacked_acc = accuracy(clf, ak, std::span<const std::size_t>(yk), batch);
  rep.drop = rep.clean_acc - rep.attacked_acc;
  rep.size = perturbation_stats(xk, ak);
  return rep;
}

template <class T, class Clf>
RobustnessReport robustness_eval(Clf& clf, const PerturbationSpec& attack, FlowModel<T>* flow,
                                 const Dataset<T>& data, std::size_t batch = 1000) {
  return robustness_eval(clf, attack, flow, data.x, std::span<const std::size_t>(data.labels), batch);
}

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// Column means and the unbiased (N−1) covariance of the rows of `features`.
template <class T>
GaussianSummary gaussian_summary(const Tensor<T>& features) {
  const std::size_t n = features.rows(), d = features.cols();
  if (features.rank() != 2 || n < 2) throw DataError("gaussian_summary: need at least 2 rows, got " + std::to_string(n));
  Eigen::MatrixXd m(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) m(r, c) = static_cast<double>(features(r, c));
  GaussianSummary s;
  s.count = n;
  s.mean = m.colwise().mean().transpose();
  const Eigen::MatrixXd centered = m.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
  return s;
}

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError(std::string("frechet_distance: eigendecomposition of ") + what + " failed");
  return es;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const auto es = eig(m, "covariance");
  const Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ‖m_a − m_b‖² + Tr(C_a + C_b − 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2}).
/// Tr((C_a C_b)^{1/2}) equals the trace of the symmetric form, whose square
/// root comes from an eigendecomposition with negative eigenvalues set to 0.
inline double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim()) {
    throw ShapeError("frechet_distance: dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()) +
                     " differ");
  }
  if (a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
    throw ShapeError("frechet_distance: covariance does not match mean length");
  }
  const Eigen::MatrixXd sa = detail::psd_sqrt(a.cov);
  const Eigen::MatrixXd mid = sa * b.cov * sa;
  const double cross = detail::eig(mid, "C_a^1/2 C_b C_a^1/2").eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * cross;
  return std::max(0.0, d);
}

/// Maps a batch of inputs to fixed-length feature rows.
template <class T>
struct FeatureExtractor {
  std::string label;
  std::function<Tensor<T>(const Tensor<T>&)> map;

  Tensor<T> operator()(const Tensor<T>& x, std::size_t batch = 1000) const {
    if (x.rows() == 0) throw DataError("feature extractor '" + label + "': no inputs");
    Tensor<T> first = map(x.slice_rows(0, std::min(x.rows(), batch)));
    const std::size_t width = first.cols();
    std::vector<T> out(first.storage().begin(), first.storage().end());
    for (std::size_t start = batch; start < x.rows(); start += batch) {
      Tensor<T> f = map(x.slice_rows(start, std::min(x.rows(), start + batch)));
      if (f.cols() != width) throw ShapeError("feature extractor '" + label + "': output width changed");
      out.insert(out.end(), f.storage().begin(), f.storage().end());
    }
    return Tensor<T>({x.rows(), width}, std::move(out));
  }
};

/// Penultimate activations of a trained classifier. The classifier must
/// outlive the extractor.
template <class T>
FeatureExtractor<T> classifier_features(Classifier<T>& clf) {
  return {"classifier-feature Fréchet distance", [&clf](const Tensor<T>& x) { return clf.features(x); }};
}

struct FrechetReport {
  std::string label;
  double distance = 0;
  std::size_t count_a = 0, count_b = 0, dim = 0;
};

template <class T>
FrechetReport feature_frechet(const FeatureExtractor<T>& fx, const Tensor<T>& a, const Tensor<T>& b) {
  const auto sa = gaussian_summary(fx(a)), sb = gaussian_summary(fx(b));
  return {fx.label, frechet_distance(sa, sb), sa.count, sb.count, sa.dim()};
}

}  // namespace latentflow
