#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "latentflow/attacks/attacks.hpp"
#include "latentflow/classify/train.hpp"
#include "latentflow/flow/train.hpp"
#include "test_support.hpp"

namespace lf = latentflow;
using lf::Tape;
using lf::Tensor;
using lf::Var;

namespace {

/// logits = x·Wᵀ, W given as K×D.
struct LinearClf {
  Tensor<double> w_t;  // D×K
  explicit LinearClf(const Tensor<double>& w) : w_t({w.cols(), w.rows()}) {
    for (std::size_t k = 0; k < w.rows(); ++k)
      for (std::size_t d = 0; d < w.cols(); ++d) w_t(d, k) = w(k, d);
  }
  Var<double> logits(Tape<double>& tape, const Var<double>& x) { return lf::matmul(x, tape.constant(w_t)); }
};

/// Two logits (0, ‖x − x*‖²); with label 0 the loss grows with the distance to x*.
struct QuadraticClf {
  Tensor<double> neg_target;
  Var<double> logits(Tape<double>& tape, const Var<double>& x) {
    auto d = lf::add_rowwise(x, tape.constant(neg_target));
    auto q = lf::sum_cols(lf::square(d));
    return lf::concat_cols(tape.constant(Tensor<double>({x.rows(), 1})), q);
  }
};

lf::FlowModel<double> random_flow(std::size_t dim, std::uint64_t seed, double spread = 0.2) {
  lf::Rng rng(seed);
  auto m = lf::build_flow<double>({.dim = dim, .blocks = 4, .hidden = 8, .actnorm = true, .invlinear = true}, rng);
  for (auto* p : m.parameters())
    for (auto& v : p->value.storage()) v = rng.normal(0, spread);
  return m;
}

std::vector<std::size_t> labels_for(std::size_t n, std::size_t k, lf::Rng& rng) {
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng.below(k);
  return y;
}

// ---------------- projections ----------------

TEST(Projection, L2Examples) {
  auto inside = lf::project_l2(Tensor<double>::vector({3.0, 4.0}), 10.0);
  EXPECT_EQ(inside[0], 3.0);
  EXPECT_EQ(inside[1], 4.0);
  auto unit = lf::project_l2(Tensor<double>::vector({3.0, 4.0}), 1.0);
  EXPECT_NEAR(unit[0], 0.6, 1e-15);
  EXPECT_NEAR(unit[1], 0.8, 1e-15);
  EXPECT_THROW(lf::project_l2(Tensor<double>::vector({1.0}), -1.0), lf::Error);
}

TEST(Projection, LinfExamples) {
  auto c = lf::project_linf(Tensor<double>::vector({0.5, -0.7}), 0.25);
  EXPECT_EQ(c[0], 0.25);
  EXPECT_EQ(c[1], -0.25);
  auto in = Tensor<double>::vector({0.1, -0.2});
  EXPECT_EQ(lf::project_linf(in, 0.25), in);
}

TEST(Projection, IdempotentAndWithinBudget) {
  lf::Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    auto v = lf_test::normal_tensor(rng, {1 + rng.below(20)}, 3.0);
    const double eps = rng.uniform(0, 4);
    auto a = lf::project_l2(v, eps);
    EXPECT_EQ(lf::project_l2(a, eps), a);
    EXPECT_LE(lf::norm_l2<double>(a.storage()), eps + 1e-12);
    auto b = lf::project_linf(v, eps);
    EXPECT_EQ(lf::project_linf(b, eps), b);
    EXPECT_LE(lf::norm_linf<double>(b.storage()), eps);
  }
}

// ---------------- randomized latent attack ----------------

TEST(RandomizedLA, ZeroBudgetReturnsInput) {
  auto flow = random_flow(4, 2);
  lf::Rng rng(3);
  auto x = lf_test::random_tensor(rng, {50, 4}, 0, 1);
  std::vector<std::size_t> y(50, 0);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    auto res = lf::randomized_la(flow, x, y, {.kind = lf::AttackKind::randomized_la, .norm = p, .epsilon = 0.0});
    EXPECT_LE(lf::max_abs_diff(res.x_tilde, x), 1e-9);
  }
}

TEST(RandomizedLA, LinfBudgetHoldsInLatentSpace) {
  auto flow = random_flow(4, 4);
  lf::Rng rng(5);
  auto x = lf_test::random_tensor(rng, {200, 4}, 0, 1);
  std::vector<std::size_t> y(200, 0);
  lf::PerturbationSpec spec{.kind = lf::AttackKind::randomized_la, .norm = lf::Norm::linf, .epsilon = 0.3, .seed = 6};
  auto res = lf::randomized_la(flow, x, y, spec);
  auto dz = flow.encode(res.x_tilde).z;
  auto z = flow.encode(x).z;
  for (std::size_t i = 0; i < dz.size(); ++i) EXPECT_LE(std::abs(dz[i] - z[i]), 0.3 + 1e-6);
  for (double n : res.delta_norm) EXPECT_LE(n, 0.3);
}

TEST(RandomizedLA, IdentityFlowMatchesReferenceGenerator) {
  lf::FlowModel<double> id(2);
  auto x = Tensor<double>::matrix(1, 2, {0.4, 0.6});
  std::vector<std::size_t> y{0};
  lf::PerturbationSpec spec{.kind = lf::AttackKind::randomized_la, .norm = lf::Norm::l2, .epsilon = 0.1, .seed = 42};
  auto res = lf::randomized_la(id, x, y, spec);

  lf::Rng ref = lf::Rng::derive(42, 0, 0);
  const double e0 = 0.1 * ref.normal(), e1 = 0.1 * ref.normal();
  auto want = lf::project_l2(Tensor<double>::vector({e0, e1}), 0.1);
  EXPECT_EQ(res.x_tilde[0], 0.4 + want[0]);
  EXPECT_EQ(res.x_tilde[1], 0.6 + want[1]);

  spec.truncate = false;
  auto raw = lf::randomized_la(id, x, y, spec);
  EXPECT_EQ(raw.x_tilde[0], 0.4 + e0);
  EXPECT_EQ(raw.x_tilde[1], 0.6 + e1);
}

TEST(RandomizedLA, DeterministicAndBatchOrderIndependent) {
  auto flow = random_flow(3, 7);
  lf::Rng rng(8);
  auto x = lf_test::random_tensor(rng, {10, 3}, 0, 1);
  std::vector<std::size_t> y(10, 0);
  lf::PerturbationSpec spec{.kind = lf::AttackKind::randomized_la, .epsilon = 0.5, .seed = 9};
  auto a = lf::randomized_la(flow, x, y, spec);
  auto b = lf::randomized_la(flow, x, y, spec);
  EXPECT_EQ(a.x_tilde, b.x_tilde);
  // row 7 alone, addressed by its sample id, gets the same perturbation
  std::vector<std::size_t> one{7};
  lf::AttackOptions opt;
  opt.sample_ids = {7};
  auto single = lf::randomized_la(flow, x.gather_rows(one), std::vector<std::size_t>{0}, spec, opt);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(single.x_tilde(0, c), a.x_tilde(7, c));
}

// ---------------- adversarial latent attack ----------------

TEST(AdversarialLA, ZeroStepsGiveProjectedRandomStart) {
  auto flow = random_flow(3, 10);
  lf::Classifier<double> clf({.input_dim = 3, .classes = 3, .hidden = {8}});
  lf::Rng rng(11);
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {40, 3}, 0, 1);
  auto y = labels_for(40, 3, rng);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    lf::PerturbationSpec spec{.kind = lf::AttackKind::adversarial_la, .norm = p, .epsilon = 0.4, .alpha = 0.1,
                              .steps = 0, .seed = 12};
    lf::AttackOptions opt;
    opt.record_iterates = true;
    auto res = lf::adversarial_la(flow, clf, x, y, spec, opt);
    ASSERT_EQ(res.iterates.size(), 1u);
    EXPECT_EQ(*res.delta, res.iterates[0]);
    for (double n : res.delta_norm) EXPECT_LE(n, 0.4 + 1e-12);
  }
}

TEST(AdversarialLA, ZeroBudgetReturnsInput) {
  auto flow = random_flow(3, 13);
  lf::Classifier<double> clf({.input_dim = 3, .classes = 2, .hidden = {8}});
  lf::Rng rng(14);
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {30, 3}, 0, 1);
  auto y = labels_for(30, 2, rng);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    lf::PerturbationSpec spec{.kind = lf::AttackKind::adversarial_la, .norm = p, .epsilon = 0.0, .alpha = 0.5, .steps = 3};
    auto res = lf::adversarial_la(flow, clf, x, y, spec);
    EXPECT_LE(lf::max_abs_diff(res.x_tilde, x), 1e-9);
  }
}

TEST(AdversarialLA, IdentityFlowReducesToImagePgdBitForBit) {
  lf::FlowModel<double> id(4);
  lf::Classifier<double> clf({.input_dim = 4, .classes = 3, .hidden = {16}});
  lf::Rng rng(15);
  clf.init(rng);
  const double eps = 0.1;
  auto x = lf_test::random_tensor(rng, {64, 4}, eps, 1 - eps);  // ball stays inside [0, 1]
  auto y = labels_for(64, 3, rng);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    lf::PerturbationSpec a{.kind = lf::AttackKind::adversarial_la, .norm = p, .epsilon = eps, .alpha = 0.03,
                           .steps = 5, .seed = 16};
    lf::PerturbationSpec b = a;
    b.kind = lf::AttackKind::pgd_image;
    lf::AttackOptions opt;
    opt.record_iterates = true;
    auto ra = lf::adversarial_la(id, clf, x, y, a, opt);
    auto rb = lf::pgd_image(clf, x, y, b, opt);
    ASSERT_EQ(ra.iterates.size(), rb.iterates.size());
    for (std::size_t j = 0; j < ra.iterates.size(); ++j) EXPECT_EQ(ra.iterates[j], rb.iterates[j]) << j;
    EXPECT_EQ(ra.x_tilde, rb.x_tilde);
    EXPECT_EQ(ra.loss, rb.loss);
  }
}

TEST(AdversarialLA, SignStepOnLinearClassifier) {
  // 2 classes, 2 dims; for label 0 the loss gradient is p₁·(w₁ − w₀), so its
  // sign is sign(w₁ − w₀) componentwise.
  auto w = Tensor<double>::matrix(2, 2, {1.0, -2.0, -0.5, 0.5});
  LinearClf clf(w);
  lf::FlowModel<double> id(2);
  const double eps = 0.2;
  auto x = Tensor<double>::matrix(1, 2, {0.3, 0.7});
  std::vector<std::size_t> y{0};
  const double s0 = (w(1, 0) - w(0, 0)) > 0 ? 1.0 : -1.0;
  const double s1 = (w(1, 1) - w(0, 1)) > 0 ? 1.0 : -1.0;

  // α = 2ε lands on the corner x + ε·sign(∇L) from any start in the box
  lf::PerturbationSpec spec{.kind = lf::AttackKind::adversarial_la, .norm = lf::Norm::linf, .epsilon = eps,
                            .alpha = 2 * eps, .steps = 1, .seed = 3};
  auto res = lf::adversarial_la(id, clf, x, y, spec);
  EXPECT_EQ(res.x_tilde(0, 0), 0.3 + eps * s0);
  EXPECT_EQ(res.x_tilde(0, 1), 0.7 + eps * s1);

  // α = ε from the reference random start
  spec.alpha = eps;
  auto r2 = lf::adversarial_la(id, clf, x, y, spec);
  lf::Rng ref = lf::Rng::derive(3, 0, 0);
  const double d0 = ref.uniform(-eps, eps), d1 = ref.uniform(-eps, eps);
  EXPECT_EQ((*r2.delta)(0, 0), std::clamp(d0 + eps * s0, -eps, eps));
  EXPECT_EQ((*r2.delta)(0, 1), std::clamp(d1 + eps * s1, -eps, eps));
}

TEST(AdversarialLA, BudgetHoldsOverRandomInvocations) {
  auto flow = random_flow(3, 17);
  lf::Classifier<double> clf({.input_dim = 3, .classes = 3, .hidden = {8}});
  lf::Rng rng(18);
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {1000, 3}, 0, 1);
  auto y = labels_for(1000, 3, rng);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    const double eps = 0.5;
    lf::PerturbationSpec spec{.kind = lf::AttackKind::adversarial_la, .norm = p, .epsilon = eps, .alpha = 0.3,
                              .steps = 3, .seed = 19};
    auto res = lf::adversarial_la(flow, clf, x, y, spec);
    for (std::size_t r = 0; r < 1000; ++r) {
      EXPECT_LE(lf::vector_norm(std::span<const double>(res.delta->row(r)), p), eps + 1e-6);
    }
  }
}

TEST(AdversarialLA, MoreStepsFindHigherLoss) {
  // a flow and classifier trained on a 3-class mixture
  lf::Rng rng(20);
  lf::Dataset<double> d;
  d.x = Tensor<double>({600, 2});
  d.classes = 3;
  for (std::size_t i = 0; i < 600; ++i) {
    const std::size_t c = i % 3;
    const double a = 2 * std::numbers::pi * static_cast<double>(c) / 3;
    d.x(i, 0) = std::clamp(0.5 + 0.25 * std::cos(a) + rng.normal(0, 0.08), 0.0, 1.0);
    d.x(i, 1) = std::clamp(0.5 + 0.25 * std::sin(a) + rng.normal(0, 0.08), 0.0, 1.0);
    d.labels.push_back(c);
  }
  auto flow = lf::build_flow<double>({.dim = 2, .blocks = 4, .hidden = 16, .actnorm = true}, rng);
  lf::train_flow(flow, d.x, {.epochs = 20, .batch_size = 100, .schedule = {.base = 3e-3}, .seed = 1});
  lf::Classifier<double> clf({.input_dim = 2, .classes = 3, .hidden = {16, 16}});
  clf.init(rng);
  lf::train_classifier<double>(clf, nullptr, d, nullptr, {{.epochs = 20}},
                               {.batch_size = 50, .schedule = {.base = 1e-2}, .gradient_spot_check = false});

  auto sub = d.select(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19,
                                               20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 32, 33, 34, 35, 36, 37});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
      lf::PerturbationSpec spec{.kind = lf::AttackKind::adversarial_la, .norm = p, .epsilon = 0.5, .alpha = 0.25,
                                .steps = 0, .seed = seed};
      auto r0 = lf::adversarial_la(flow, clf, sub.x, sub.labels, spec);
      spec.steps = 3;
      auto r3 = lf::adversarial_la(flow, clf, sub.x, sub.labels, spec);
      double m0 = 0, m3 = 0;
      for (std::size_t i = 0; i < sub.size(); ++i) {
        m0 += r0.loss[i];
        m3 += r3.loss[i];
      }
      EXPECT_GE(m3, m0) << "seed " << seed << " " << lf::norm_name(p);
    }
  }
}

TEST(AdversarialLA, ConditionalFlowUsesLabels) {
  lf::Rng rng(21);
  auto flow = lf::build_flow<double>({.dim = 2, .label_width = 2, .blocks = 2, .hidden = 4}, rng);
  for (auto* p : flow.parameters())
    for (auto& v : p->value.storage()) v = rng.normal(0, 0.2);
  lf::Classifier<double> clf({.input_dim = 2, .classes = 2, .hidden = {4}});
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {5, 2}, 0, 1);
  std::vector<std::size_t> y{0, 1, 1, 0, 1};
  auto res = lf::adversarial_la(flow, clf, x, y,
                                {.kind = lf::AttackKind::adversarial_la, .epsilon = 0.0, .alpha = 0.1, .steps = 1});
  EXPECT_LE(lf::max_abs_diff(res.x_tilde, x), 1e-9);
}

TEST(AdversarialLA, NonFiniteDecodeIsReportedOrRaised) {
  lf::FlowModel<double> flow(1);
  auto& a = flow.add(lf::ActNormLayer<double>(1));
  a.log_scale().value[0] = -750;  // inverse multiplies by e^750, which overflows
  LinearClf clf(Tensor<double>::matrix(2, 1, {1.0, -1.0}));
  auto x = Tensor<double>::matrix(2, 1, {0.0, 0.0});
  std::vector<std::size_t> y{0, 1};
  lf::PerturbationSpec spec{.kind = lf::AttackKind::randomized_la, .epsilon = 5.0, .seed = 1};
  EXPECT_THROW(lf::randomized_la(flow, x, y, spec), lf::NumericError);
  lf::AttackOptions opt;
  opt.throw_on_failure = false;
  auto res = lf::randomized_la(flow, x, y, spec, opt);
  EXPECT_EQ(res.failed_rows.size(), 2u);
  EXPECT_EQ(res.x_tilde, x);
}

// ---------------- image-space PGD ----------------

TEST(PgdImage, ZeroBudgetZeroStepsIsIdentity) {
  LinearClf clf(Tensor<double>::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  lf::Rng rng(22);
  auto x = lf_test::random_tensor(rng, {10, 2}, 0, 1);
  std::vector<std::size_t> y(10, 1);
  auto res = lf::pgd_image(clf, x, y, {.kind = lf::AttackKind::pgd_image, .norm = lf::Norm::linf});
  EXPECT_EQ(res.x_tilde, x);
}

TEST(PgdImage, IteratesStayInBallAndUnitBox) {
  lf::Classifier<double> clf({.input_dim = 3, .classes = 3, .hidden = {8}});
  lf::Rng rng(23);
  clf.init(rng);
  auto x = lf_test::random_tensor(rng, {1000, 3}, 0, 1);
  auto y = labels_for(1000, 3, rng);
  for (auto p : {lf::Norm::l2, lf::Norm::linf}) {
    const double eps = 0.3;
    lf::AttackOptions opt;
    opt.record_iterates = true;
    auto res = lf::pgd_image(clf, x, y,
                             {.kind = lf::AttackKind::pgd_image, .norm = p, .epsilon = eps, .alpha = 0.2, .steps = 4,
                              .seed = 24},
                             opt);
    for (const auto& it : res.iterates) {
      for (std::size_t r = 0; r < 1000; ++r) {
        EXPECT_LE(lf::vector_norm(std::span<const double>(it.row(r)), p), eps + 1e-6);
        for (std::size_t c = 0; c < 3; ++c) {
          EXPECT_GE(x(r, c) + it(r, c), -1e-15);
          EXPECT_LE(x(r, c) + it(r, c), 1 + 1e-15);
        }
      }
    }
    for (double v : res.x_tilde.storage()) EXPECT_TRUE(v >= 0 && v <= 1);
    for (double n : res.delta_norm) EXPECT_LE(n, eps + 1e-6);
  }
}

TEST(PgdImage, SingleL2StepOnQuadraticMovesAwayFromTarget) {
  QuadraticClf clf{Tensor<double>::vector({-0.3, -0.4})};
  auto x = Tensor<double>::matrix(1, 2, {0.5, 0.5});
  std::vector<std::size_t> y{0};
  const double eps = 0.2, alpha = 0.05;
  int unprojected = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    lf::PerturbationSpec spec{.kind = lf::AttackKind::pgd_image, .norm = lf::Norm::l2, .epsilon = eps, .alpha = alpha,
                              .steps = 1, .seed = seed};
    lf::AttackOptions opt;
    opt.record_iterates = true;
    auto res = lf::pgd_image(clf, x, y, spec, opt);
    const auto& d0 = res.iterates[0];
    // gradient ∝ (x + Δ⁰ − x*), so the step is α along that unit vector
    const double u0 = 0.5 + d0[0] - 0.3, u1 = 0.5 + d0[1] - 0.4;
    const double un = std::hypot(u0, u1);
    auto want = lf::project_l2(Tensor<double>::vector({d0[0] + alpha * u0 / un, d0[1] + alpha * u1 / un}), eps);
    EXPECT_NEAR(res.iterates[1][0], want[0], 1e-15);
    EXPECT_NEAR(res.iterates[1][1], want[1], 1e-15);
    if (std::hypot(d0[0] + alpha * u0 / un, d0[1] + alpha * u1 / un) <= eps) {
      ++unprojected;
      const double before = un;
      const double after = std::hypot(res.x_tilde[0] - 0.3, res.x_tilde[1] - 0.4);
      EXPECT_NEAR(after - before, alpha, 1e-12);
    }
  }
  EXPECT_GT(unprojected, 10);
}

TEST(Perturb, DispatchAndValidation) {
  LinearClf clf(Tensor<double>::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  auto x = Tensor<double>::matrix(1, 2, {0.5, 0.5});
  std::vector<std::size_t> y{0};
  auto none = lf::perturb<double>({}, nullptr, clf, x, y);
  EXPECT_EQ(none.x_tilde, x);
  EXPECT_THROW(lf::perturb<double>({.kind = lf::AttackKind::randomized_la, .epsilon = 1}, nullptr, clf, x, y),
               lf::ConfigError);
  EXPECT_THROW(lf::perturb<double>({.kind = lf::AttackKind::pgd_image, .epsilon = -1}, nullptr, clf, x, y),
               lf::ConfigError);
  EXPECT_THROW(lf::perturb<double>({.kind = lf::AttackKind::pgd_image, .epsilon = 1, .steps = 2}, nullptr, clf, x, y),
               lf::ConfigError);
}

}  // namespace
