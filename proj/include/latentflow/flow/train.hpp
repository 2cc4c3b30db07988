#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "latentflow/classify/optim.hpp"
#include "latentflow/classify/schedule.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/flow/model.hpp"

namespace latentflow {

struct FlowTrainingConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 100;
  OptimizerConfig optimizer{};
  LrSchedule schedule{.kind = ScheduleKind::constant, .base = 1e-3};
  /// Global gradient-norm clip; 0 disables.
  double max_grad_norm = 0.0;
  std::uint64_t seed = 0;
};

struct FlowTrainingHistory {
  std::vector<double> epoch_nll;  // mean training NLL per epoch, nats/sample
};

/// Maximum-likelihood training: minimizes the mean negative
/// log-likelihood over shuffled minibatches. Actnorm layers are
/// initialized from the first minibatch.
template <class T>
FlowTrainingHistory train_flow(FlowModel<T>& model, const Tensor<T>& data, const FlowTrainingConfig& config,
                               const std::optional<Tensor<T>>& labels = std::nullopt) {
  if (data.rank() != 2 || data.cols() != model.dim()) throw ShapeError("train_flow: data width mismatch");
  if (config.batch_size == 0 || config.epochs == 0) throw ConfigError("train_flow: epochs and batch size must be > 0");
  config.schedule.validate();
  const std::size_t n = data.rows();
  Rng rng(config.seed);
  Optimizer<T> opt(config.optimizer);
  auto params = model.parameters();
  FlowTrainingHistory history;
  std::size_t step = 0;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor<T> batch = data.gather_rows(idx);
      std::optional<Tensor<T>> batch_labels;
      if (labels) batch_labels = labels->gather_rows(idx);
      if (step == 0) model.initialize_actnorm(batch, batch_labels);

      zero_grad<T>(params);
      Tape<T> tape;
      std::optional<Var<T>> lv;
      if (batch_labels) lv = tape.constant(*batch_labels);
      Var<T> loss = model.nll(tape, tape.constant(batch), lv);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw NumericError("train_flow: non-finite NLL at epoch " + std::to_string(epoch));
      total += value * static_cast<double>(end - start);
      tape.backward(loss);

      if (config.max_grad_norm > 0) {
        double sq = 0;
        for (auto* p : params)
          for (T g : p->grad.storage()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > config.max_grad_norm) {
          const T f = static_cast<T>(config.max_grad_norm / norm);
          for (auto* p : params)
            for (T& g : p->grad.storage()) g *= f;
        }
      }
      opt.step(params, config.schedule.rate(step, epoch));
      ++step;
    }
    history.epoch_nll.push_back(total / static_cast<double>(n));
  }
  return history;
}

}  // namespace latentflow
