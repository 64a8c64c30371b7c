#include <gtest/gtest.h>

#include "cruseg/pipeline.hpp"
#include "support.hpp"

using namespace cruseg;
using cruseg::testing::Rng;

namespace {

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; }

std::size_t expected_count(const NetworkConfig& c) {
  const auto& ch = c.base_channels;
  const std::size_t k = c.kernel_size;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t in = i == 0 ? 1 : ch[i - 1];
    n += conv_params(in, ch[i], k) + conv_params(ch[i], ch[i], k);
    if (c.residual_enabled) n += in * ch[i];
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const std::size_t in = ch[3 - j], out = ch[2 - j];
    n += conv_params(in, out, k) + conv_params(2 * out, out, k);
    if (c.residual_enabled) n += in * out * 4;
  }
  return n + conv_params(ch[0], 2, 1) + 4 + 2;
}

}  // namespace

TEST(Network, BlockShapesFollowTheContractingAndExpandingPath) {
  auto net = build_network<double>(NetworkConfig{}, 1);
  Tape<double> tape(false);
  std::vector<Shape> trace;
  Rng rng(1);
  const auto out = forward_logits(tape, net, rng.tensor(Shape{2, 1, 40, 40}, 0, 1), {}, &trace);
  const std::vector<Shape> want = {{2, 16, 40, 40}, {2, 32, 20, 20}, {2, 64, 10, 10}, {2, 128, 5, 5},
                                   {2, 64, 10, 10}, {2, 32, 20, 20}, {2, 16, 40, 40}};
  EXPECT_EQ(trace, want);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 40, 40}));
}

TEST(Network, ParameterCountMatchesClosedForm) {
  for (bool residual : {true, false}) {
    for (std::size_t k : {3u, 7u}) {
      NetworkConfig c;
      c.residual_enabled = residual;
      c.kernel_size = k;
      EXPECT_EQ(build_network<float>(c, 3).parameter_count(), expected_count(c)) << residual << " k=" << k;
    }
  }
  NetworkConfig c;
  EXPECT_EQ(build_network<float>(c, 3).parameter_count(), 540808u);
}

TEST(Network, OutputIsAPerPixelDistribution) {
  auto net = build_network<double>(NetworkConfig{}, 2);
  Tape<double> tape(false);
  Rng rng(2);
  const auto p = forward(tape, net, rng.tensor(Shape{1, 1, 40, 40}, 0, 1));
  for (std::size_t i = 0; i < 1600; ++i) {
    EXPECT_GE(p.data()[i], 0.0);
    EXPECT_NEAR(p.data()[i] + p.data()[1600 + i], 1.0, 1e-12);
  }
}

TEST(Network, ZeroShortcutsReduceToThePlainPath) {
  NetworkConfig with;
  NetworkConfig without;
  without.residual_enabled = false;
  auto a = build_network<double>(with, 9);
  const auto b = build_network<double>(without, 9);
  for (auto& d : a.down) std::fill(d.shortcut.ptr(), d.shortcut.ptr() + d.shortcut.numel(), 0.0);
  for (auto& u : a.up) std::fill(u.shortcut.ptr(), u.shortcut.ptr() + u.shortcut.numel(), 0.0);
  Tape<double> tape(false);
  Rng rng(9);
  const auto x = rng.tensor(Shape{1, 1, 40, 40}, 0, 1);
  const auto pa = forward_logits(tape, a, x);
  const auto pb = forward_logits(tape, b, x);
  for (std::size_t i = 0; i < pa.numel(); ++i) ASSERT_NEAR(pa.data()[i], pb.data()[i], 1e-9);
}

TEST(Network, ResidualBlockIsPlainPathPlusProjection) {
  NetworkConfig c;
  const auto net = build_network<double>(c, 4);
  Rng rng(4);
  Tape<double> tape(false);
  const auto x = rng.tensor(Shape{1, 16, 40, 40}, -1, 1);
  const auto& blk = net.down[1];
  auto plain = blk;
  plain.shortcut = Tensor<double>{};
  const auto full = residual_block_down(tape, x, blk);
  const auto f = residual_block_down(tape, x, plain);
  // Projection oracle: 1x1 conv then 2x2 max.
  for (std::size_t o = 0; o < 32; ++o)
    for (std::size_t y = 0; y < 20; ++y)
      for (std::size_t xx = 0; xx < 20; ++xx) {
        double best = -1e300;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            double s = 0;
            for (std::size_t i = 0; i < 16; ++i)
              s += blk.shortcut.at(o, i, 0, 0) * x.at(0, i, 2 * y + dy, 2 * xx + dx);
            best = std::max(best, s);
          }
        ASSERT_NEAR(full.at(0, o, y, xx), f.at(0, o, y, xx) + best, 1e-10);
      }
}

TEST(Network, SameSeedSameWeights) {
  const auto a = build_network<float>(NetworkConfig{}, 17);
  const auto b = build_network<float>(NetworkConfig{}, 17);
  const auto c = build_network<float>(NetworkConfig{}, 18);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pc[i].tensor.data().begin()))
      any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Network, LargeKernelVariantRuns) {
  NetworkConfig c;
  c.kernel_size = 7;
  auto net = build_network<float>(c, 1);
  Tape<float> tape(false);
  Rng rng(7);
  EXPECT_EQ(forward(tape, net, rng.tensor<float>(Shape{1, 1, 40, 40}, 0, 1)).shape(), (Shape{1, 2, 40, 40}));
}

TEST(Network, ValidationNamesTheField) {
  auto expect_msg = [](NetworkConfig c, const std::string& field) {
    try {
      c.validate();
      ADD_FAILURE() << "accepted bad " << field;
    } catch (const std::invalid_argument& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  NetworkConfig c;
  c.kernel_size = 5;
  expect_msg(c, "kernel_size");
  c = {};
  c.dropout_rate = 1.0;
  expect_msg(c, "dropout_rate");
  c = {};
  c.input_size = 42;
  expect_msg(c, "input_size");
  c = {};
  c.base_channels[2] = 0;
  expect_msg(c, "base_channels");
  c = {};
  c.lambda = 1.5;
  expect_msg(c, "lambda");
  c = {};
  c.crf.theta_beta = -1;
  expect_msg(c, "theta_beta");
}

TEST(Network, WrongInputExtentIsRejected) {
  auto net = build_network<float>(NetworkConfig{}, 1);
  Tape<float> tape(false);
  EXPECT_THROW(forward(tape, net, Tensor<float>(Shape{1, 1, 32, 32})), std::invalid_argument);
  EXPECT_THROW(forward(tape, net, Tensor<float>(Shape{1, 2, 40, 40})), std::invalid_argument);
}

TEST(Pipeline, CrfOffPassesUnaryThrough) {
  NetworkConfig c;
  c.use_crf = false;
  auto net = build_network<double>(c, 5);
  Rng rng(5);
  std::vector<GrayImage> rois{rng.image(40, 40)};
  Tape<double> tape(false);
  const auto out = run_pipeline(tape, net, std::span<const GrayImage>(rois));
  EXPECT_FALSE(out.crf_applied);
  EXPECT_TRUE(out.refined.same_storage(out.unary_prob));
  std::vector<Mask> m{rng.mask(40, 40)};
  const auto terms = composite_loss(tape, out, std::span<const Mask>(m), 0.67);
  EXPECT_EQ(terms.total.item(), terms.unet.item());
}

TEST(Pipeline, CompositeLossMixesTerms) {
  NetworkConfig c;
  c.crf.omega1 = c.crf.omega2 = 0.05;
  auto net = build_network<double>(c, 6);
  Rng rng(6);
  std::vector<GrayImage> rois{rng.image(40, 40)};
  std::vector<Mask> m{rng.mask(40, 40)};
  Tape<double> tape(false);
  const auto out = run_pipeline(tape, net, std::span<const GrayImage>(rois));
  EXPECT_TRUE(out.crf_applied);
  const auto t = composite_loss(tape, out, std::span<const Mask>(m), 0.67);
  EXPECT_NEAR(t.total.item(), 0.33 * t.unet.item() + 0.67 * t.crf.item(), 1e-9 * t.total.item());
  // Log-domain terms agree with clamped cross-entropy of unsaturated probabilities.
  ASSERT_GT(*std::min_element(out.refined.data().begin(), out.refined.data().end()), 1e-12);
  EXPECT_NEAR(t.unet.item(), cross_entropy(tape, out.unary_prob, std::span<const Mask>(m)).item(), 1e-8);
  EXPECT_NEAR(t.crf.item(), crf_loss(tape, out.refined, std::span<const Mask>(m)).item(), 1e-8);
}
