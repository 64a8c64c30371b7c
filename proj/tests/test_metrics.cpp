#include <gtest/gtest.h>

#include "cruseg/metrics.hpp"
#include "support.hpp"

using namespace cruseg;
using cruseg::testing::Rng;

namespace {

Mask from_rows(const std::vector<std::string>& rows) {
  Mask m(rows[0].size(), rows.size());
  for (std::size_t y = 0; y < rows.size(); ++y)
    for (std::size_t x = 0; x < rows[y].size(); ++x) m(x, y) = rows[y][x] == '#';
  return m;
}

double shoelace(const Polygon& p) {
  double a = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u.x * v.y - v.x * u.y;
  }
  return std::abs(a) / 2;
}

}  // namespace

TEST(Dice, ClosedFormExamples) {
  const auto a = from_rows({"##..", "##..", "....", "...."});
  EXPECT_EQ(dice_index(a, a), 1.0);
  EXPECT_EQ(dice_index(a, from_rows({"....", "....", "..##", "..##"})), 0.0);
  // |P| = 4, |T| = 2, overlap 1: 2 / 6.
  EXPECT_EQ(dice_index(a, from_rows({"....", ".#..", ".#..", "...."})), 1.0 / 3.0);
  EXPECT_EQ(dice_index(Mask(3, 3), Mask(3, 3)), 1.0);
  EXPECT_EQ(dice_index(Mask(3, 3), from_rows({"#..", "...", "..."})), 0.0);
  EXPECT_THROW(dice_index(Mask(3, 3), Mask(3, 4)), std::invalid_argument);
}

TEST(Dice, SymmetricAndBounded) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto p = rng.mask(9, 6, rng.uniform()), t = rng.mask(9, 6, rng.uniform());
    const double d = dice_index(p, t);
    EXPECT_EQ(d, dice_index(t, p));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Summary, TwoSampleFixture) {
  EvalReport r;
  r.samples.push_back(score_sample("a", from_rows({"##", "##"}), from_rows({"##", "##"})));
  // |P| = 3, |T| = 2, overlap 2: 4 / 5.
  r.samples.push_back(score_sample("b", from_rows({"##", "#."}), from_rows({"##", ".."})));
  summarize(r);
  EXPECT_EQ(r.samples[1].dice, 0.8);
  EXPECT_DOUBLE_EQ(r.mean, 0.9);
  EXPECT_NEAR(r.stddev, std::sqrt(0.02), 1e-15);
  EXPECT_NEAR(r.stddev, 0.1414213562, 1e-10);
  EXPECT_EQ(r.histogram.size(), kHistogramBins);
  EXPECT_EQ(r.histogram[16], 1u);
  EXPECT_EQ(r.histogram[19], 1u);
  ASSERT_EQ(r.cdf.size(), 2u);
  EXPECT_EQ(r.cdf[0], std::make_pair(0.8, 0.5));
  EXPECT_EQ(r.cdf[1], std::make_pair(1.0, 1.0));
}

TEST(Summary, HistogramAndCdfInvariants) {
  Rng rng(2);
  std::vector<double> v(137);
  for (auto& x : v) x = rng.coin() ? rng.uniform() : std::round(rng.uniform() * 4) / 4;
  const auto h = dice_histogram(v);
  std::size_t total = 0;
  for (auto c : h) total += c;
  EXPECT_EQ(total, v.size());
  const auto cdf = empirical_cdf(v);
  EXPECT_EQ(cdf.back().second, 1.0);
  for (std::size_t i = 1; i < cdf.size(); ++i) {
    EXPECT_LT(cdf[i - 1].first, cdf[i].first);
    EXPECT_LT(cdf[i - 1].second, cdf[i].second);
  }
  EXPECT_EQ(sample_stddev({0.5}), 0.0);
  EXPECT_EQ(mean_of({}), 0.0);
}

TEST(Contours, SinglePixelIsADiamond) {
  const auto c = mask_contours(from_rows({"...", ".#.", "..."}));
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].size(), 4u);
  EXPECT_DOUBLE_EQ(shoelace(c[0]), 0.5);
  for (const auto& p : c[0]) EXPECT_DOUBLE_EQ(std::abs(p.x - 1) + std::abs(p.y - 1), 0.5);
}

TEST(Contours, RectangleAreaLosesCorners) {
  Mask m(10, 8);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 1; x < 8; ++x) m(x, y) = 1;
  const auto c = mask_contours(m);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_DOUBLE_EQ(shoelace(c[0]), 28 - 0.5);
}

TEST(Contours, ComponentsHolesAndSaddles) {
  EXPECT_EQ(mask_contours(from_rows({"##...", "##...", ".....", "...##"})).size(), 2u);
  EXPECT_EQ(mask_contours(from_rows({"#####", "#...#", "#...#", "#####"})).size(), 2u);
  EXPECT_EQ(mask_contours(from_rows({"#.", ".#"})).size(), 2u);
  EXPECT_TRUE(mask_contours(Mask(4, 4)).empty());
  const auto full = mask_contours(Mask(3, 3, 1));
  ASSERT_EQ(full.size(), 1u);
  EXPECT_DOUBLE_EQ(shoelace(full[0]), 9 - 0.5);
}
