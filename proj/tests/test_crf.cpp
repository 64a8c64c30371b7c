#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "cruseg/crf.hpp"
#include "crf_oracles.hpp"

using namespace cruseg;
using namespace cruseg::testing;

TEST(Kernels, MatchDefinitionSymmetricUnitDiagonal) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const auto roi = rng.image(7, 5);
    const auto c = random_params(rng);
    const auto k = build_kernels<double>(roi, c);
    const std::size_t N = roi.size();
    for (std::size_t p = 0; p < N; ++p)
      for (std::size_t q = 0; q < N; ++q) {
        EXPECT_NEAR((*k.bilateral)(p, q), k1(roi, p, q, c), 1e-15);
        EXPECT_NEAR((*k.spatial)(p, q), k2(roi, p, q, c), 1e-15);
        EXPECT_EQ((*k.bilateral)(p, q), (*k.bilateral)(q, p));
        EXPECT_EQ((*k.spatial)(p, q), (*k.spatial)(q, p));
      }
    for (std::size_t p = 0; p < N; ++p) {
      EXPECT_EQ((*k.bilateral)(p, p), 1.0);
      EXPECT_EQ((*k.spatial)(p, p), 1.0);
    }
  }
}

TEST(Kernels, RejectOutOfRangeIntensityAndBadParams) {
  GrayImage roi(2, 2, 0.5);
  roi(1, 1) = 1.5;
  EXPECT_THROW(build_kernels<double>(roi, CrfParams{}), std::invalid_argument);
  CrfParams bad;
  bad.theta_beta = 0;
  EXPECT_THROW(build_kernels<double>(GrayImage(2, 2, 0.5), bad), std::invalid_argument);
}

TEST(MeanField, MatchesDoubleLoopOracleOn8x8) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto roi = rng.image(8, 8);
    const auto c = random_params(rng);
    const auto q = random_simplex(rng, 64);
    std::vector<double> u(128);
    for (auto& v : u) v = rng.uniform(-5, 0);
    Tape<double> tape(false);
    const auto got = mean_field_step(tape, as_tensor(q, 8, 8), as_tensor(u, 8, 8), kernels_for(roi, c),
                                     CrfWeights<double>::from(c, false));
    const auto want = mean_field_oracle(roi, c, q, u);
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(got.q.data()[i], want[i], 1e-10);
  }
}

TEST(MeanField, HandExpandedTwoByTwo) {
  // Pixels 0 1 / 2 3 with hand-set symmetric kernels and Potts mu.
  auto bil = std::make_shared<DenseKernel<double>>();
  auto spa = std::make_shared<DenseKernel<double>>();
  bil->size = spa->size = 4;
  bil->values = {1, .5, .2, .1, .5, 1, .3, .4, .2, .3, 1, .6, .1, .4, .6, 1};
  spa->values = {1, .7, .7, .3, .7, 1, .3, .7, .7, .3, 1, .7, .3, .7, .7, 1};
  auto k = std::make_shared<const PairwiseKernels<double>>(PairwiseKernels<double>{2, 2, bil, spa});
  const double w1 = 0.8, w2 = 0.3;
  const std::vector<double> q = {0.9, 0.2, 0.6, 0.3, 0.1, 0.8, 0.4, 0.7};
  const std::vector<double> u = {-0.1, -1.2, -0.5, -0.9, -2.4, -0.4, -1.0, -0.5};
  CrfParams c;
  c.omega1 = w1;
  c.omega2 = w2;
  Tape<double> tape(false);
  const auto got = mean_field_step(tape, as_tensor(q, 2, 2), as_tensor(u, 2, 2), {k},
                                   CrfWeights<double>::from(c, false));

  // msg_p(l) written out term by term.
  auto w = [&](double b, double s) { return w1 * b + w2 * s; };
  const double m0[4] = {w(.5, .7) * q[1] + w(.2, .7) * q[2] + w(.1, .3) * q[3],
                        w(.5, .7) * q[0] + w(.3, .3) * q[2] + w(.4, .7) * q[3],
                        w(.2, .7) * q[0] + w(.3, .3) * q[1] + w(.6, .7) * q[3],
                        w(.1, .3) * q[0] + w(.4, .7) * q[1] + w(.6, .7) * q[2]};
  const double m1[4] = {w(.5, .7) * q[5] + w(.2, .7) * q[6] + w(.1, .3) * q[7],
                        w(.5, .7) * q[4] + w(.3, .3) * q[6] + w(.4, .7) * q[7],
                        w(.2, .7) * q[4] + w(.3, .3) * q[5] + w(.6, .7) * q[7],
                        w(.1, .3) * q[4] + w(.4, .7) * q[5] + w(.6, .7) * q[6]};
  for (int p = 0; p < 4; ++p) {
    // Potts: label 0 pays for label-1 neighbours and vice versa.
    const double a = u[p] - m1[p];
    const double b = u[4 + p] - m0[p];
    EXPECT_NEAR(got.q.data()[p], 1.0 / (1.0 + std::exp(b - a)), 1e-12);
    EXPECT_NEAR(got.q.data()[4 + p], 1.0 / (1.0 + std::exp(a - b)), 1e-12);
  }
}

TEST(MeanField, PairwiseOffGivesSoftmaxOfUnary) {
  Rng rng(3);
  CrfParams c;
  c.omega1 = c.omega2 = 0;
  const auto roi = rng.image(5, 4);
  std::vector<double> u(40);
  for (auto& v : u) v = rng.uniform(-4, 0);
  Tape<double> tape(false);
  const auto ut = as_tensor(u, 5, 4);
  const auto expect = softmax_channels(tape, ut);
  for (int trial = 0; trial < 3; ++trial) {
    const auto q = random_simplex(rng, 20);
    const auto got = mean_field_step(tape, as_tensor(q, 5, 4), ut, kernels_for(roi, c),
                                     CrfWeights<double>::from(c, false));
    for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(got.q.data()[i], expect.data()[i], 1e-15);
  }
}

TEST(MeanField, SinglePixelHasNoNeighbours) {
  Rng rng(4);
  const GrayImage roi(1, 1, 0.3);
  const auto c = random_params(rng);
  const std::vector<double> u = {-0.2, -1.7};
  Tape<double> tape(false);
  const auto got = mean_field_step(tape, as_tensor({0.3, 0.7}, 1, 1), as_tensor(u, 1, 1), kernels_for(roi, c),
                                   CrfWeights<double>::from(c, false));
  const double z = std::exp(-0.2) + std::exp(-1.7);
  EXPECT_NEAR(got.q.data()[0], std::exp(-0.2) / z, 1e-15);
}

TEST(MeanField, SimplexAndUnaryShiftInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto roi = rng.image(6, 5);
    auto c = random_params(rng);
    c.omega1 *= 20;
    c.omega2 *= 20;
    const auto q = random_simplex(rng, 30);
    std::vector<double> u(60), shifted(60);
    for (auto& v : u) v = rng.uniform(-30, 30);
    for (std::size_t p = 0; p < 30; ++p) {
      const double k = rng.uniform(-50, 50);
      shifted[p] = u[p] + k;
      shifted[30 + p] = u[30 + p] + k;
    }
    Tape<double> tape(false);
    const auto ks = kernels_for(roi, c);
    const auto w = CrfWeights<double>::from(c, false);
    const auto a = mean_field_step(tape, as_tensor(q, 6, 5), as_tensor(u, 6, 5), ks, w).q;
    const auto b = mean_field_step(tape, as_tensor(q, 6, 5), as_tensor(shifted, 6, 5), ks, w).q;
    for (std::size_t p = 0; p < 30; ++p) {
      EXPECT_GE(a.data()[p], 0.0);
      EXPECT_GE(a.data()[30 + p], 0.0);
      EXPECT_NEAR(a.data()[p] + a.data()[30 + p], 1.0, 1e-6);
      EXPECT_NEAR(a.data()[p], b.data()[p], 1e-9);
      EXPECT_NEAR(a.data()[30 + p], b.data()[30 + p], 1e-9);
    }
  }
}

TEST(CrfForward, ZeroCompatibilityIsAFixedPoint) {
  Rng rng(6);
  CrfParams c;
  c.mu = {0, 0, 0, 0};
  const auto roi = rng.image(4, 4);
  auto logits = rng.tensor(Shape{1, 2, 4, 4}, -3, 3);
  Tape<double> tape(false);
  const auto unary = softmax_channels(tape, logits);
  for (int T : {1, 2, 5, 9}) {
    const auto out = crf_forward(tape, unary, kernels_for(roi, c), CrfWeights<double>::from(c, false), T);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(out.q.data()[i], unary.data()[i], 1e-12);
  }
}

TEST(CrfForward, IdentityWhenPairwiseOff) {
  Rng rng(7);
  CrfParams c;
  c.omega1 = c.omega2 = 0;
  const auto roi = rng.image(3, 3);
  Tape<double> tape(false);
  const auto unary = softmax_channels(tape, rng.tensor(Shape{1, 2, 3, 3}, -2, 2));
  const auto out = crf_forward(tape, unary, kernels_for(roi, c), CrfWeights<double>::from(c, false), 1);
  for (std::size_t i = 0; i < 18; ++i) EXPECT_NEAR(out.q.data()[i], unary.data()[i], 1e-12);
}

TEST(CrfForward, OutputsValidSimplexForRandomInputs) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = random_params(rng);
    const auto roi = rng.image(6, 6);
    Tape<double> tape(false);
    const auto unary = softmax_channels(tape, rng.tensor(Shape{1, 2, 6, 6}, -8, 8));
    const auto out = crf_forward(tape, unary, kernels_for(roi, c), CrfWeights<double>::from(c, false), 5);
    for (std::size_t p = 0; p < 36; ++p) {
      EXPECT_NEAR(out.q.data()[p] + out.q.data()[36 + p], 1.0, 1e-12);
      EXPECT_NEAR(std::exp(out.log_q.data()[p]), out.q.data()[p], 1e-12);
    }
  }
}

TEST(CrfLoss, ReducesToUnetLossWhenPairwiseOff) {
  Rng rng(9);
  CrfParams c;
  c.omega1 = c.omega2 = 0;
  const auto roi = rng.image(5, 5);
  std::vector<Mask> m{rng.mask(5, 5)};
  Tape<double> tape(false);
  const auto unary = softmax_channels(tape, rng.tensor(Shape{1, 2, 5, 5}, -3, 3));
  const auto out = crf_forward(tape, unary, kernels_for(roi, c), CrfWeights<double>::from(c, false), 1);
  const double g = crf_loss(tape, out.q, std::span<const Mask>(m)).item();
  const double f = cross_entropy(tape, unary, std::span<const Mask>(m)).item();
  EXPECT_NEAR(g, f, 1e-9);
}

TEST(CrfLoss, PerfectMarginalsCostNothing) {
  Mask m(2, 2);
  m(0, 1) = 1;
  Tensor<double> q(Shape{1, 2, 2, 2});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) q.at(0, m(x, y), y, x) = 1.0;
  Tape<double> tape(false);
  std::vector<Mask> ms{m};
  EXPECT_NEAR(crf_loss(tape, q, std::span<const Mask>(ms)).item(), 0.0, 1e-12);
  std::vector<Mask> bad{Mask(2, 2, 3)};
  EXPECT_THROW(crf_loss(tape, q, std::span<const Mask>(bad)), std::invalid_argument);
}

TEST(TotalLoss, EndpointsAndWeighting) {
  Tape<double> tape(false);
  const auto f = Tensor<double>::scalar(1.0);
  const auto g = Tensor<double>::scalar(2.0);
  EXPECT_EQ(total_loss(tape, f, g, 0.0).item(), 1.0);
  EXPECT_EQ(total_loss(tape, f, g, 1.0).item(), 2.0);
  EXPECT_NEAR(total_loss(tape, f, g, 0.67).item(), 1.67, 1e-12);
  EXPECT_THROW(total_loss(tape, f, g, -0.01), std::invalid_argument);
  EXPECT_THROW(total_loss(tape, f, g, 1.01), std::invalid_argument);
}

TEST(ExactPartition, ClosedForms) {
  DenseCrf one;
  one.pixels = 1;
  one.unary = {0.0, 0.0};
  one.coupling = {1.0};
  EXPECT_NEAR(exact_log_partition(one), std::numbers::ln2, 1e-15);

  for (std::size_t n : {2u, 5u, 9u}) {
    DenseCrf z;
    z.pixels = n;
    z.unary.assign(2 * n, 0.0);
    z.coupling.assign(n * n, 0.0);
    EXPECT_NEAR(exact_log_partition(z), n * std::numbers::ln2, 1e-12);
  }
}

TEST(ExactPartition, RejectsLargeInstances) {
  DenseCrf big;
  big.pixels = 17;
  big.unary.assign(34, 0.0);
  big.coupling.assign(17 * 17, 0.0);
  EXPECT_THROW(exact_log_partition(big), std::invalid_argument);
}

TEST(ExactPartition, AgreesWithIndependentEnumeration) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = 1 + rng.index(4), h = 1 + rng.index(3);
    const auto roi = rng.image(w, h);
    auto c = random_params(rng);
    c.mu = {rng.uniform(0, 1), rng.uniform(0, 2), 0, rng.uniform(0, 1)};
    c.mu[2] = c.mu[1];
    std::vector<double> u(2 * roi.size());
    for (auto& v : u) v = rng.uniform(-3, 0);
    const double a = exact_log_partition(u, build_kernels<double>(roi, c), c);
    std::vector<double> coupling(roi.size() * roi.size());
    for (std::size_t p = 0; p < roi.size(); ++p)
      for (std::size_t q = 0; q < roi.size(); ++q)
        coupling[p * roi.size() + q] = c.omega1 * k1(roi, p, q, c) + c.omega2 * k2(roi, p, q, c);
    EXPECT_NEAR(a, recursive_log_partition(u, coupling, c.mu, roi.size()), 1e-12);
  }
}

TEST(ExactPartition, MeanFieldBoundNeverExceedsLogZ) {
  Rng rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t w = 1 + rng.index(4), h = 1 + rng.index(3);
    const auto roi = rng.image(w, h);
    auto c = random_params(rng);
    c.mu[2] = c.mu[1];
    const std::size_t N = roi.size();
    std::vector<double> u(2 * N);
    for (auto& v : u) v = rng.uniform(-3, 0);
    const auto crf = DenseCrf::from(u, build_kernels<double>(roi, c), c);
    const double log_z = exact_log_partition(crf);
    // Any factorized Q, including the mean-field iterates, gives a lower bound.
    Tape<double> tape(false);
    const auto out = crf_refine(tape, as_tensor(u, w, h), kernels_for(roi, c), CrfWeights<double>::from(c, false),
                                1 + static_cast<int>(rng.index(10)));
    std::vector<double> q(out.q.data().begin(), out.q.data().end());
    EXPECT_LE(mean_field_lower_bound(crf, q), log_z + 1e-12);
    EXPECT_LE(mean_field_lower_bound(crf, random_simplex(rng, N)), log_z + 1e-12);
  }
}

TEST(ExactPartition, WeakCouplingMarginalsMatchMeanField) {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const auto roi = rng.image(2, 1);
    CrfParams c;
    c.mu = {rng.uniform(0, 1), rng.uniform(0, 1), 0, rng.uniform(0, 1)};
    c.mu[2] = c.mu[1];
    c.omega1 = rng.uniform(0, 0.05);
    c.omega2 = rng.uniform(0, 0.05);
    std::vector<double> u(4);
    for (auto& v : u) v = rng.uniform(-3, 0);
    const auto crf = DenseCrf::from(u, build_kernels<double>(roi, c), c);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) ASSERT_LE(std::abs(crf.phi(0, 1, a, b)), 0.1);
    const auto exact = exact_marginals(crf);
    Tape<double> tape(false);
    const auto mf = crf_refine(tape, as_tensor(u, 2, 1), kernels_for(roi, c), CrfWeights<double>::from(c, false), 200);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mf.q.data()[i], exact[i], 1e-3);
  }
}
