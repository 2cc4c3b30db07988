#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentflow/attacks/attacks.hpp"
#include "latentflow/classify/classifier.hpp"
#include "latentflow/classify/loss.hpp"
#include "latentflow/classify/optim.hpp"
#include "latentflow/classify/schedule.hpp"
#include "latentflow/data/dataset.hpp"
#include "latentflow/flow/model.hpp"

namespace latentflow {

struct TrainPhase {
  PerturbationSpec perturbation{};
  std::size_t epochs = 1;
};

struct ClassifierTrainingConfig {
  std::size_t batch_size = 100;
  OptimizerConfig optimizer{};
  LrSchedule schedule{.kind = ScheduleKind::constant, .base = 1e-3};
  std::uint64_t seed = 0;
  /// Compare one random gradient coordinate per epoch against a
  /// double-precision central difference.
  bool gradient_spot_check = true;
  double spot_check_tolerance = 1e-3;
  std::size_t eval_batch_size = 1000;
  /// Evaluate on the test split every this many epochs (and after the
  /// last one); 0 evaluates only after the last epoch.
  std::size_t test_eval_interval = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t phase = 0;
  std::string perturbation;
  double lr = 0;
  double train_acc = 0;   // on the (perturbed) samples actually trained on
  double train_loss = 0;
  std::optional<double> test_acc;  // clean test data
  std::optional<double> test_loss;
  double grad_check_error = 0;
  bool grad_check_passed = true;
  std::size_t attack_skipped_steps = 0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::size_t> phase_start;  // first epoch index of each phase
  std::size_t grad_check_failures = 0;
};

struct EvalSummary {
  double accuracy = 0;  // percent
  double loss = 0;      // mean cross-entropy
  std::size_t count = 0;
};

/// Accuracy (argmax, ties to the lowest class) and mean loss in batches.
template <class T>
EvalSummary evaluate_classifier(Classifier<T>& clf, const Tensor<T>& x, std::span<const std::size_t> labels,
                                std::size_t batch = 1000) {
  if (labels.empty()) throw DataError("evaluate: empty dataset");
  if (x.rows() != labels.size()) throw ShapeError("evaluate: inputs and labels differ in count");
  EvalSummary s;
  std::size_t correct = 0;
  double loss = 0;
  for (std::size_t start = 0; start < labels.size(); start += batch) {
    const std::size_t end = std::min(labels.size(), start + batch);
    auto xb = x.slice_rows(start, end);
    auto yb = labels.subspan(start, end - start);
    const auto l = clf.logits(xb);
    for (std::size_t r = 0; r < l.rows(); ++r) {
      if (argmax(l.row(r)) == yb[r]) ++correct;
      loss += cross_entropy(l.row(r), yb[r]);
    }
  }
  s.count = labels.size();
  s.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(s.count);
  s.loss = loss / static_cast<double>(s.count);
  return s;
}

template <class T>
EvalSummary evaluate_classifier(Classifier<T>& clf, const Dataset<T>& data, std::size_t batch = 1000) {
  return evaluate_classifier(clf, data.x, std::span<const std::size_t>(data.labels), batch);
}

namespace detail {

template <class T>
double batch_loss(Classifier<T>& clf, const Tensor<T>& x, std::span<const std::size_t> labels) {
  Tape<T> tape(TapeOptions{.grad_enabled = false});
  return static_cast<double>(cross_entropy(clf.logits(tape, tape.constant(x)), labels).value()[0]);
}

/// Relative error between one analytic gradient coordinate and a central
/// difference computed on a double-precision copy of the classifier.
template <class T>
double spot_check(Classifier<T>& clf, const Tensor<T>& x, std::span<const std::size_t> labels, Rng& rng) {
  auto params = clf.parameters();
  const std::size_t pi = rng.below(params.size());
  const std::size_t ci = rng.below(params[pi]->value.size());
  const double analytic = static_cast<double>(params[pi]->grad[ci]);

  auto ref = clf.template cast<double>();
  const auto xd = x.template cast<double>();
  auto* p = ref.parameters()[pi];
  const double orig = p->value[ci];
  auto rel = [&](double h) {
    p->value[ci] = orig + h;
    const double fp = batch_loss(ref, xd, labels);
    p->value[ci] = orig - h;
    const double fm = batch_loss(ref, xd, labels);
    p->value[ci] = orig;
    const double numeric = (fp - fm) / (2 * h);
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  };
  // A ReLU kink inside [θ−h, θ+h] biases the difference; a smaller step
  // removes that artifact but not a genuine gradient error.
  const double first = rel(1e-6);
  return first <= 1e-4 ? first : std::min(first, rel(1e-8));
}

}  // namespace detail

/// Minibatch training over a list of phases. In each minibatch every
/// sample is replaced by its perturbation under the active phase; attack
/// randomness is keyed by (seed, epoch, sample index), so batch order does
/// not change the perturbations.
template <class T>
TrainingHistory train_classifier(Classifier<T>& clf, FlowModel<T>* flow, const Dataset<T>& train,
                                 const Dataset<T>* test, const std::vector<TrainPhase>& phases,
                                 const ClassifierTrainingConfig& config) {
  if (phases.empty()) throw ConfigError("train_classifier: at least one phase required");
  for (std::size_t p = 0; p < phases.size(); ++p) {
    if (phases[p].epochs == 0) throw ConfigError("train_classifier: phase " + std::to_string(p) + " has zero epochs");
    phases[p].perturbation.validate();
    if (phases[p].perturbation.latent() && flow == nullptr) {
      throw ConfigError("train_classifier: phase " + std::to_string(p) + " uses " +
                        attack_kind_name(phases[p].perturbation.kind) + " but no flow was given");
    }
  }
  if (config.batch_size == 0) throw ConfigError("train_classifier: batch size must be > 0");
  if (train.dim() != clf.input_dim()) throw ShapeError("train_classifier: data width differs from classifier input");
  config.schedule.validate();

  Rng rng(config.seed);
  Optimizer<T> opt(config.optimizer);
  auto params = clf.parameters();
  TrainingHistory history;
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0, epoch = 0, total_epochs = 0;
  for (const auto& ph : phases) total_epochs += ph.epochs;

  for (std::size_t p = 0; p < phases.size(); ++p) {
    const PerturbationSpec& spec = phases[p].perturbation;
    history.phase_start.push_back(epoch);
    for (std::size_t e = 0; e < phases[p].epochs; ++e, ++epoch) {
      rng.shuffle(order.begin(), order.end());
      EpochRecord rec;
      rec.epoch = epoch;
      rec.phase = p;
      rec.perturbation = spec.describe();
      rec.lr = config.schedule.rate(step, epoch);
      std::size_t correct = 0;
      double loss_sum = 0;
      AttackOptions attack_opt;
      attack_opt.stream = Rng::derive(config.seed, epoch).next_u64();

      for (std::size_t start = 0; start < n; start += config.batch_size) {
        const std::size_t end = std::min(n, start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        Tensor<T> xb = train.x.gather_rows(idx);
        std::vector<std::size_t> yb;
        yb.reserve(idx.size());
        for (auto i : idx) yb.push_back(train.labels[i]);

        if (spec.kind != AttackKind::none) {
          attack_opt.sample_ids.assign(idx.begin(), idx.end());
          auto res = perturb(spec, flow, clf, xb, yb, attack_opt);
          rec.attack_skipped_steps += res.skipped_steps;
          xb = std::move(res.x_tilde);
        }

        zero_grad<T>(params);
        Tape<T> tape;
        Var<T> logits = clf.logits(tape, tape.constant(xb));
        Var<T> loss = cross_entropy(logits, std::span<const std::size_t>(yb));
        const double lv = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(lv)) throw NumericError("train_classifier: non-finite loss at epoch " + std::to_string(epoch));
        for (std::size_t r = 0; r < yb.size(); ++r)
          if (argmax(logits.value().row(r)) == yb[r]) ++correct;
        loss_sum += lv * static_cast<double>(yb.size());
        tape.backward(loss);

        if (config.gradient_spot_check && start == 0) {
          Rng check_rng = Rng::derive(config.seed, epoch, 0x5eed);
          rec.grad_check_error = detail::spot_check(clf, xb, yb, check_rng);
          rec.grad_check_passed = rec.grad_check_error <= config.spot_check_tolerance;
          if (!rec.grad_check_passed) ++history.grad_check_failures;
        }
        opt.step(params, config.schedule.rate(step, epoch));
        ++step;
      }
      rec.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
      rec.train_loss = loss_sum / static_cast<double>(n);
      const bool last = epoch + 1 == total_epochs;
      const bool due = config.test_eval_interval > 0 && (epoch + 1) % config.test_eval_interval == 0;
      if (test && (last || due)) {
        auto s = evaluate_classifier(clf, *test, config.eval_batch_size);
        rec.test_acc = s.accuracy;
        rec.test_loss = s.loss;
      }
      history.epochs.push_back(std::move(rec));
    }
  }
  return history;
}

}  // namespace latentflow
