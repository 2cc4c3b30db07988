#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "latentflow/classify/train.hpp"
#include "latentflow/flow/model.hpp"
#include "test_support.hpp"

namespace lf = latentflow;
using lf::Tape;
using lf::Tensor;
using lf::Var;

namespace {

lf::Dataset<double> blobs(std::size_t n, std::size_t classes, double spread, std::uint64_t seed) {
  lf::Rng rng(seed);
  lf::Dataset<double> d;
  d.x = Tensor<double>({n, 2});
  d.classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    const double angle = 2 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    d.x(i, 0) = std::clamp(0.5 + 0.3 * std::cos(angle) + rng.normal(0, spread), 0.0, 1.0);
    d.x(i, 1) = std::clamp(0.5 + 0.3 * std::sin(angle) + rng.normal(0, spread), 0.0, 1.0);
    d.labels.push_back(c);
  }
  d.provenance = "blobs";
  return d;
}

lf::ClassifierSpec small_mlp(std::size_t classes = 2) {
  return {.kind = lf::ClassifierKind::mlp, .input_dim = 2, .classes = classes, .hidden = {16, 16}};
}

// ---------------- losses ----------------

TEST(CrossEntropy, UniformLogits) {
  std::vector<double> l(10, 0.7);
  EXPECT_NEAR(lf::cross_entropy<double>(l, 3), std::log(10.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrect) {
  std::vector<double> l(5, 0.0);
  l[2] = 50;
  EXPECT_NEAR(lf::cross_entropy<double>(l, 2), 0.0, 1e-20);
  EXPECT_GE(lf::cross_entropy<double>(l, 2), 0.0);
}

TEST(CrossEntropy, TwoClassByHand) {
  std::vector<double> l{1.0, 0.0};
  EXPECT_NEAR(lf::cross_entropy<double>(l, 0), std::log(1 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(lf::cross_entropy<double>(l, 0), 0.3133, 1e-4);
}

TEST(CrossEntropy, LabelOutOfRange) {
  std::vector<double> l{1.0, 0.0};
  EXPECT_THROW(lf::cross_entropy<double>(l, 2), lf::DataError);
  Tape<double> tape;
  std::vector<std::size_t> y{0, 2};
  EXPECT_THROW(lf::cross_entropy(tape.constant(Tensor<double>({2, 2})), y), lf::DataError);
}

TEST(CrossEntropy, TapeVersionMatchesScalarAndHasSoftmaxGradient) {
  lf::Rng rng(1);
  auto logits = lf_test::normal_tensor(rng, {6, 4}, 3.0);
  std::vector<std::size_t> y{0, 1, 2, 3, 1, 0};
  Tape<double> tape;
  auto lv = tape.variable(logits);
  auto loss = lf::cross_entropy(lv, y);
  double expect = 0;
  for (std::size_t r = 0; r < 6; ++r) expect += lf::cross_entropy<double>(logits.row(r), y[r]);
  EXPECT_NEAR(loss.value()[0], expect / 6, 1e-14);
  tape.backward(loss);
  const auto& g = tape.grad(lv);
  for (std::size_t r = 0; r < 6; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 4; ++c) z += std::exp(logits(r, c));
    for (std::size_t c = 0; c < 4; ++c) {
      const double soft = std::exp(logits(r, c)) / z;
      EXPECT_NEAR(g(r, c), (soft - (c == y[r] ? 1.0 : 0.0)) / 6, 1e-14);
    }
  }
}

TEST(CrossEntropy, GradientWrtClassifierParametersMatchesFiniteDifferences) {
  lf::Rng rng(2);
  lf::Classifier<double> clf(small_mlp(3));
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {20, 2}, 0, 1);
  std::vector<std::size_t> y(20);
  for (std::size_t i = 0; i < 20; ++i) y[i] = rng.below(3);
  auto params = clf.parameters();
  {
    Tape<double> tape;
    tape.backward(lf::cross_entropy(clf.logits(tape, tape.constant(x)), y));
  }
  for (int k = 0; k < 50; ++k) {
    auto* p = params[rng.below(params.size())];
    const std::size_t i = rng.below(p->value.size());
    const double orig = p->value[i], h = 1e-5;
    p->value[i] = orig + h;
    const double fp = lf::detail::batch_loss(clf, x, y);
    p->value[i] = orig - h;
    const double fm = lf::detail::batch_loss(clf, x, y);
    p->value[i] = orig;
    EXPECT_LE(lf_test::rel_err(p->grad[i], (fp - fm) / (2 * h), 1e-4), 1e-5) << p->name << "[" << i << "]";
  }
}

// ---------------- schedules ----------------

TEST(Schedule, ExponentialDecay) {
  lf::LrSchedule s{.kind = lf::ScheduleKind::exponential, .base = 0.001, .decay_rate = 0.1, .decay_interval = 10000};
  EXPECT_DOUBLE_EQ(lf::schedule_rate(s, 0, 0), 0.001);
  EXPECT_NEAR(lf::schedule_rate(s, 10000, 3), 0.0001, 1e-18);
}

TEST(Schedule, Milestones) {
  lf::LrSchedule s{.kind = lf::ScheduleKind::milestones, .base = 0.1, .milestones = {60, 120, 160}, .factor = 0.2};
  EXPECT_DOUBLE_EQ(lf::schedule_rate(s, 12345, 59), 0.1);
  EXPECT_NEAR(lf::schedule_rate(s, 0, 60), 0.02, 1e-17);
  EXPECT_NEAR(lf::schedule_rate(s, 0, 199), 0.1 * 0.2 * 0.2 * 0.2, 1e-17);
}

TEST(Schedule, LinearWarmup) {
  lf::LrSchedule s{.kind = lf::ScheduleKind::linear_warmup, .base = 0.0005, .warmup_steps = 500000};
  EXPECT_NEAR(lf::schedule_rate(s, 250000, 0), 0.00025, 1e-18);
  EXPECT_DOUBLE_EQ(lf::schedule_rate(s, 500000, 0), 0.0005);
  EXPECT_DOUBLE_EQ(lf::schedule_rate(s, 900000, 0), 0.0005);
  EXPECT_GT(lf::schedule_rate(s, 0, 0), 0.0);
}

TEST(Schedule, RatesStayPositive) {
  lf::LrSchedule e{.kind = lf::ScheduleKind::exponential, .base = 1.0, .decay_rate = 0.1, .decay_interval = 10};
  for (std::size_t step = 0; step < 3000; step += 7) EXPECT_GT(e.rate(step, 0), 0.0);
  lf::LrSchedule bad{.kind = lf::ScheduleKind::constant, .base = 0.0};
  EXPECT_THROW(bad.validate(), lf::ConfigError);
}

// ---------------- optimizers ----------------

lf::Parameter<double> scalar_param(double v, double g) {
  lf::Parameter<double> p("theta", Tensor<double>::vector({v}));
  p.grad[0] = g;
  return p;
}

TEST(Optimizer, VanillaSgd) {
  auto p = scalar_param(2.0, 3.0);
  lf::Optimizer<double> opt({.kind = lf::OptimizerKind::sgd_momentum_nesterov, .momentum = 0.0});
  std::vector<lf::Parameter<double>*> ps{&p};
  opt.step(ps, 0.1);
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 - 0.1 * 3.0);
}

TEST(Optimizer, NesterovTwoStepHandTrace) {
  auto p = scalar_param(0.0, 1.0);
  lf::Optimizer<double> opt({.kind = lf::OptimizerKind::sgd_momentum_nesterov, .momentum = 0.9, .nesterov = true});
  std::vector<lf::Parameter<double>*> ps{&p};
  const double lr = 0.1;
  // b1 = 1, d1 = 1 + 0.9·1 = 1.9
  opt.step(ps, lr);
  EXPECT_NEAR(p.value[0], -lr * 1.9, 1e-15);
  // b2 = 0.9·1 + 1 = 1.9, d2 = 1 + 0.9·1.9 = 2.71
  opt.step(ps, lr);
  EXPECT_NEAR(p.value[0], -lr * (1.9 + 2.71), 1e-15);
}

TEST(Optimizer, WeightDecayIsAdditiveGradientTerm) {
  auto p = scalar_param(1.0, 0.0);
  lf::Optimizer<double> opt({.kind = lf::OptimizerKind::sgd_momentum_nesterov, .weight_decay = 0.1, .momentum = 0.0});
  std::vector<lf::Parameter<double>*> ps{&p};
  opt.step(ps, 0.5);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.5 * 0.1);
}

TEST(Optimizer, AdamConstantGradientStepsApproachRate) {
  auto p = scalar_param(0.0, 0.37);
  lf::Optimizer<double> opt({.kind = lf::OptimizerKind::adam});
  std::vector<lf::Parameter<double>*> ps{&p};
  double prev = 0;
  for (int i = 0; i < 200; ++i) {
    opt.step(ps, 1e-3);
    const double stepsize = prev - p.value[0];
    EXPECT_NEAR(stepsize, 1e-3, 1e-9);
    prev = p.value[0];
  }
}

TEST(Optimizer, NonFiniteUpdateLeavesParametersUntouched) {
  auto a = scalar_param(1.0, 1.0);
  auto b = scalar_param(2.0, std::numeric_limits<double>::quiet_NaN());
  lf::Optimizer<double> opt({.kind = lf::OptimizerKind::adam});
  std::vector<lf::Parameter<double>*> ps{&a, &b};
  EXPECT_THROW(opt.step(ps, 1e-3), lf::NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 2.0);
  EXPECT_THROW(lf::Optimizer<double>({.momentum = 1.5}), lf::ConfigError);
}

TEST(Optimizer, OneSmallStepDecreasesSingleSampleLoss) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    lf::Rng rng(100 + seed);
    lf::Classifier<double> clf(small_mlp(3));
    clf.init(rng);
    auto x = lf_test::random_tensor(rng, {1, 2}, 0, 1);
    std::vector<std::size_t> y{rng.below(3)};
    auto params = clf.parameters();
    const double before = lf::detail::batch_loss(clf, x, y);
    lf::zero_grad<double>(params);
    Tape<double> tape;
    tape.backward(lf::cross_entropy(clf.logits(tape, tape.constant(x)), y));
    lf::Optimizer<double> opt({.kind = lf::OptimizerKind::sgd_momentum_nesterov, .momentum = 0.0});
    opt.step(params, 1e-4);
    EXPECT_LT(lf::detail::batch_loss(clf, x, y), before) << seed;
  }
}

// ---------------- classifiers ----------------

TEST(Classifier, LeNetShapesAndGradient) {
  lf::ClassifierSpec spec{.kind = lf::ClassifierKind::lenet, .input_dim = 784, .classes = 10};
  lf::Classifier<double> clf(spec);
  lf::Rng rng(3);
  clf.init(rng);
  EXPECT_EQ(clf.feature_dim(), 84u);
  auto x = lf_test::random_tensor(rng, {2, 784}, 0, 1);
  auto l = clf.logits(x);
  EXPECT_EQ(l.rows(), 2u);
  EXPECT_EQ(l.cols(), 10u);

  std::vector<std::size_t> y{3, 7};
  auto params = clf.parameters();
  {
    Tape<double> tape;
    tape.backward(lf::cross_entropy(clf.logits(tape, tape.constant(x)), y));
  }
  for (int k = 0; k < 10; ++k) {
    auto* p = params[k % 4];  // convolution weights and biases
    const std::size_t i = rng.below(p->value.size());
    const double orig = p->value[i], h = 1e-5;
    p->value[i] = orig + h;
    const double fp = lf::detail::batch_loss(clf, x, y);
    p->value[i] = orig - h;
    const double fm = lf::detail::batch_loss(clf, x, y);
    p->value[i] = orig;
    EXPECT_LE(lf_test::rel_err(p->grad[i], (fp - fm) / (2 * h), 1e-4), 1e-5) << p->name;
  }
}

TEST(Classifier, RejectsBadShapes) {
  EXPECT_THROW(lf::Classifier<double>({.classes = 1}), lf::ConfigError);
  EXPECT_THROW(lf::Classifier<double>({.kind = lf::ClassifierKind::lenet, .input_dim = 100, .classes = 10}),
               lf::ConfigError);
  lf::Classifier<double> clf(small_mlp());
  EXPECT_THROW(clf.logits(Tensor<double>({3, 5})), lf::ShapeError);
}

TEST(Classifier, ArgmaxTiesGoToLowestIndex) {
  std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(lf::argmax<double>(v), 1u);
}

// ---------------- training ----------------

/// Perceptron fit used only to confirm that the toy data is separable.
bool perceptron_separates(const lf::Dataset<double>& d) {
  double w[3] = {0, 0, 0};
  for (int epoch = 0; epoch < 1000; ++epoch) {
    bool clean = true;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double s = d.labels[i] ? 1.0 : -1.0;
      if (s * (w[0] * d.x(i, 0) + w[1] * d.x(i, 1) + w[2]) <= 0) {
        w[0] += s * d.x(i, 0);
        w[1] += s * d.x(i, 1);
        w[2] += s;
        clean = false;
      }
    }
    if (clean) return true;
  }
  return false;
}

TEST(Training, SeparableToyDataReachesFullTrainAccuracy) {
  auto d = blobs(200, 2, 0.05, 4);
  ASSERT_TRUE(perceptron_separates(d));
  lf::Classifier<double> clf(small_mlp());
  lf::Rng rng(5);
  clf.init(rng);
  lf::ClassifierTrainingConfig cfg{.batch_size = 20, .schedule = {.kind = lf::ScheduleKind::constant, .base = 1e-2}};
  auto h = lf::train_classifier<double>(clf, nullptr, d, nullptr, {{.epochs = 50}}, cfg);
  EXPECT_EQ(lf::evaluate_classifier(clf, d).accuracy, 100.0);
  EXPECT_EQ(h.epochs.size(), 50u);
  EXPECT_EQ(h.grad_check_failures, 0u);
}

TEST(Training, KindNoneMatchesPlainLoopBitForBit) {
  auto d = blobs(60, 3, 0.1, 6);
  lf::ClassifierTrainingConfig cfg{.batch_size = 16, .optimizer = {.kind = lf::OptimizerKind::sgd_momentum_nesterov},
                                   .schedule = {.kind = lf::ScheduleKind::constant, .base = 0.05}, .seed = 9};
  lf::Rng r1(7), r2(7);
  lf::Classifier<double> a(small_mlp(3)), b(small_mlp(3));
  a.init(r1);
  b.init(r2);
  lf::train_classifier<double>(a, nullptr, d, nullptr, {{.epochs = 5}}, cfg);

  // the same loop written out without any perturbation code
  lf::Rng rng(cfg.seed);
  lf::Optimizer<double> opt(cfg.optimizer);
  auto params = b.parameters();
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < 5; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < d.size(); s += 16) {
      std::span<const std::size_t> idx(order.data() + s, std::min(d.size(), s + 16) - s);
      auto batch = d.select(idx);
      lf::zero_grad<double>(params);
      Tape<double> tape;
      tape.backward(lf::cross_entropy(b.logits(tape, tape.constant(batch.x)), batch.labels));
      opt.step(params, 0.05);
    }
  }
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
}

TEST(Training, MultiPhasePlanRecordsTwoHundredEpochs) {
  auto d = blobs(12, 2, 0.1, 8);
  lf::Rng rng(9);
  lf::FlowModel<double> flow = lf::build_flow<double>({.dim = 2, .blocks = 2, .hidden = 4}, rng);
  lf::Classifier<double> clf({.input_dim = 2, .classes = 2, .hidden = {4}});
  clf.init(rng);
  std::vector<lf::TrainPhase> phases{
      {{.kind = lf::AttackKind::adversarial_la, .norm = lf::Norm::l2, .epsilon = 2.0, .alpha = 1.5, .steps = 2}, 130},
      {{.kind = lf::AttackKind::randomized_la, .norm = lf::Norm::linf, .epsilon = 0.25}, 40},
      {{.kind = lf::AttackKind::randomized_la, .norm = lf::Norm::l2, .epsilon = 10.0}, 30},
  };
  lf::ClassifierTrainingConfig cfg{.batch_size = 12, .gradient_spot_check = false};
  auto h = lf::train_classifier(clf, &flow, d, &d, phases, cfg);
  ASSERT_EQ(h.epochs.size(), 200u);
  EXPECT_EQ(h.phase_start, (std::vector<std::size_t>{0, 130, 170}));
  for (std::size_t e = 0; e < 200; ++e) {
    const std::size_t want = e < 130 ? 0 : (e < 170 ? 1 : 2);
    EXPECT_EQ(h.epochs[e].phase, want);
    EXPECT_EQ(h.epochs[e].epoch, e);
    EXPECT_EQ(h.epochs[e].perturbation, phases[want].perturbation.describe());
    EXPECT_TRUE(h.epochs[e].test_acc.has_value());
  }
}

TEST(Training, LatentPhaseWithoutFlowIsRejected) {
  auto d = blobs(10, 2, 0.1, 10);
  lf::Classifier<double> clf(small_mlp());
  std::vector<lf::TrainPhase> phases{{{.kind = lf::AttackKind::randomized_la, .epsilon = 0.1}, 1}};
  EXPECT_THROW(lf::train_classifier<double>(clf, nullptr, d, nullptr, phases, {}), lf::ConfigError);
  EXPECT_THROW(lf::train_classifier<double>(clf, nullptr, d, nullptr, {}, {}), lf::ConfigError);
  EXPECT_THROW(lf::train_classifier<double>(clf, nullptr, d, nullptr, {{.epochs = 0}}, {}), lf::ConfigError);
}

TEST(Training, DeterministicUnderSeedWithAttacks) {
  auto d = blobs(40, 2, 0.1, 11);
  auto run = [&] {
    lf::Rng rng(12);
    auto flow = lf::build_flow<double>({.dim = 2, .blocks = 2, .hidden = 8}, rng);
    lf::Classifier<double> clf(small_mlp());
    clf.init(rng);
    std::vector<lf::TrainPhase> phases{
        {{.kind = lf::AttackKind::adversarial_la, .norm = lf::Norm::linf, .epsilon = 0.2, .alpha = 0.1, .steps = 2}, 2},
        {{.kind = lf::AttackKind::pgd_image, .norm = lf::Norm::linf, .epsilon = 0.05, .alpha = 0.02, .steps = 2}, 2}};
    lf::train_classifier(clf, &flow, d, &d, phases, {.batch_size = 8, .seed = 3});
    std::vector<Tensor<double>> out;
    for (auto* p : clf.parameters()) out.push_back(p->value);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, SinglePrecisionSpotChecksPass) {
  auto d = blobs(100, 3, 0.08, 13).cast<float>();
  lf::Classifier<float> clf({.input_dim = 2, .classes = 3, .hidden = {32}});
  lf::Rng rng(14);
  clf.init(rng);
  auto h = lf::train_classifier<float>(clf, nullptr, d, nullptr, {{.epochs = 20}}, {.batch_size = 25});
  EXPECT_EQ(h.grad_check_failures, 0u);
  for (const auto& e : h.epochs) EXPECT_LE(e.grad_check_error, 1e-3);
}

}  // namespace
