#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mlda/core.hpp"

using namespace mlda;

namespace {

BinaryMask random_mask(std::mt19937& rng, int h, int w, double p) {
  std::bernoulli_distribution fg(p);
  BinaryMask m(h, w);
  for (auto& v : m.data) v = fg(rng) ? 1 : 0;
  return m;
}

PredictedMask random_probs(std::mt19937& rng, int h, int w) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  PredictedMask p(h, w);
  for (auto& v : p.probs) v = u(rng);
  return p;
}

// pixel-counting oracle
struct Counts {
  int tp = 0, fp = 0, fn = 0, tn = 0;
};

Counts count(const PredictedMask& p, const BinaryMask& y, double thr) {
  Counts c;
  for (int r = 0; r < y.height; ++r)
    for (int col = 0; col < y.width; ++col) {
      const bool pp = p.probs[r * y.width + col] >= thr;
      const bool yy = y.at(r, col) == 1;
      if (pp && yy) ++c.tp;
      else if (pp) ++c.fp;
      else if (yy) ++c.fn;
      else ++c.tn;
    }
  return c;
}

}  // namespace

TEST(Dice, IdentityIsOne) {
  std::mt19937 rng(1);
  auto y = random_mask(rng, 16, 16, 0.3);
  EXPECT_DOUBLE_EQ(dice_coefficient(PredictedMask::from_binary(y), y), 1.0);
}

TEST(Dice, DisjointIsZero) {
  BinaryMask y(4, 4);
  PredictedMask p(4, 4, 1.f);
  EXPECT_DOUBLE_EQ(dice_coefficient(p, y), 0.0);
}

TEST(Dice, BothEmptyIsOne) {
  EXPECT_DOUBLE_EQ(dice_coefficient(PredictedMask(5, 5, 0.f), BinaryMask(5, 5)), 1.0);
}

TEST(Dice, AllOnesAgainstFourForeground) {
  BinaryMask y(4, 4);
  y.at(0, 0) = y.at(1, 2) = y.at(3, 3) = y.at(2, 1) = 1;
  const double want = 2.0 * 4 / (16 + 4);
  EXPECT_NEAR(dice_coefficient(PredictedMask(4, 4, 1.f), y), want, 1e-15);
  EXPECT_NEAR(want, 0.4, 1e-15);
}

TEST(Dice, ShapeMismatchNamesShapes) {
  try {
    dice_coefficient(PredictedMask(4, 5), BinaryMask(4, 4));
    FAIL();
  } catch (const ShapeMismatch& e) {
    EXPECT_NE(std::string(e.what()).find("4x5"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("4x4"), std::string::npos) << e.what();
  }
}

TEST(Dice, SymmetricAfterThreshold) {
  std::mt19937 rng(2);
  for (int i = 0; i < 200; ++i) {
    auto a = random_mask(rng, 8, 8, 0.4), b = random_mask(rng, 8, 8, 0.4);
    EXPECT_DOUBLE_EQ(dice_coefficient(PredictedMask::from_binary(a), b),
                     dice_coefficient(PredictedMask::from_binary(b), a));
  }
}

TEST(Accuracy, IdentityAndComplement) {
  std::mt19937 rng(3);
  auto y = random_mask(rng, 8, 8, 0.5);
  BinaryMask inv = y;
  for (auto& v : inv.data) v = 1 - v;
  EXPECT_DOUBLE_EQ(pixel_accuracy(PredictedMask::from_binary(y), y), 1.0);
  EXPECT_DOUBLE_EQ(pixel_accuracy(PredictedMask::from_binary(inv), y), 0.0);
}

TEST(Accuracy, TwelveOfSixteen) {
  BinaryMask y(4, 4);
  PredictedMask p(4, 4, 0.f);
  for (int i = 0; i < 4; ++i) p.probs[i] = 0.9f;  // 4 false positives
  EXPECT_DOUBLE_EQ(pixel_accuracy(p, y), 0.75);
}

TEST(Metrics, MatchCountingOracleOnRandomMasks) {
  std::mt19937 rng(1234);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto y = random_mask(rng, 8, 8, density(rng));
    const auto p = random_probs(rng, 8, 8);
    const auto c = count(p, y, 0.5);
    const double dice = c.tp + c.fp + c.fn == 0 ? 1.0 : 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
    const double acc = double(c.tp + c.tn) / 64.0;
    ASSERT_EQ(dice_coefficient(p, y), dice) << "case " << i;
    ASSERT_EQ(pixel_accuracy(p, y), acc) << "case " << i;
  }
}

TEST(Metrics, RangeProperty) {
  std::mt19937 rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto y = random_mask(rng, 6, 7, 0.3);
    const auto p = random_probs(rng, 6, 7);
    for (double thr : {0.1, 0.5, 0.9}) {
      const double d = dice_coefficient(p, y, thr), a = pixel_accuracy(p, y, thr);
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
}

TEST(Bce, KnownValues) {
  const float p = 0.8f, y = 1.f;
  EXPECT_NEAR(binary_cross_entropy({&p, 1}, {&y, 1}), -std::log(0.8), 1e-6);
  EXPECT_NEAR(-std::log(0.8), 0.2231, 1e-4);
  std::vector<float> half(10, 0.5f), t{0, 1, 0, 1, 1, 1, 0, 0, 0, 1};
  EXPECT_NEAR(binary_cross_entropy(half, t), std::log(2.0), 1e-12);
}

TEST(Bce, PerfectPredictionNearZero) {
  std::vector<float> t{0, 1, 1, 0};
  const double l = binary_cross_entropy(t, t, 1e-7);
  EXPECT_NEAR(l, -std::log(1.0 - 1e-7), 1e-9);
  EXPECT_LT(l, 1e-6);
}

TEST(Bce, NonNegativeProperty) {
  std::mt19937 rng(6);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int i = 0; i < 200; ++i) {
    std::vector<float> p(16), y(16);
    for (auto& v : p) v = u(rng);
    for (auto& v : y) v = u(rng) < 0.5f ? 0.f : 1.f;
    EXPECT_GE(binary_cross_entropy(p, y), 0.0);
  }
}

TEST(Bce, Errors) {
  std::vector<float> a{0.5f, 0.5f}, b{1.f};
  EXPECT_THROW(binary_cross_entropy(a, b), ShapeMismatch);
  std::vector<float> nan{std::nanf(""), 0.5f}, y{1.f, 0.f};
  EXPECT_THROW(binary_cross_entropy(nan, y), std::invalid_argument);
  EXPECT_THROW(binary_cross_entropy(a, y, 0.7), std::invalid_argument);
}

TEST(Aggregate, KnownValues) {
  auto one = aggregate_runs(std::vector<Metrics>{{0.8, 0.9, 10}});
  EXPECT_DOUBLE_EQ(one.dice_mean, 0.8);
  EXPECT_DOUBLE_EQ(one.dice_std, 0.0);
  EXPECT_EQ(one.n_runs, 1);

  auto two = aggregate_runs(std::vector<Metrics>{{0.8, 0.9, 10}, {0.9, 0.7, 10}});
  EXPECT_NEAR(two.dice_mean, 0.85, 1e-15);
  EXPECT_NEAR(two.dice_std, std::sqrt(2 * 0.05 * 0.05 / 1.0), 1e-12);
  EXPECT_NEAR(two.dice_std, 0.0707, 1e-4);
  EXPECT_NEAR(two.acc_mean, 0.8, 1e-15);

  auto flat = aggregate_runs(std::vector<Metrics>{{0.5, 0.5, 1}, {0.5, 0.5, 1}, {0.5, 0.5, 1}});
  EXPECT_DOUBLE_EQ(flat.dice_mean, 0.5);
  EXPECT_DOUBLE_EQ(flat.dice_std, 0.0);
  EXPECT_THROW(aggregate_runs(std::vector<Metrics>{}), std::invalid_argument);
}

TEST(Aggregate, MatchesTwoPassOracle) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int n = 2; n < 12; ++n) {
    std::vector<Metrics> runs;
    for (int i = 0; i < n; ++i) runs.push_back({u(rng), u(rng), 1});
    double m = 0;
    for (const auto& r : runs) m += r.dice;
    m /= n;
    double ss = 0;
    for (const auto& r : runs) ss += (r.dice - m) * (r.dice - m);
    const auto a = aggregate_runs(runs);
    EXPECT_NEAR(a.dice_mean, m, 1e-12);
    EXPECT_NEAR(a.dice_std, std::sqrt(ss / (n - 1)), 1e-12);
  }
}

TEST(Sample, ValidateRejectsBrokenInvariants) {
  Sample s;
  s.image = Image(3, 4, 4);
  s.mask = BinaryMask(4, 4);
  s.id = "S_00000";
  EXPECT_NO_THROW(s.validate());
  s.mask.data[3] = 2;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.mask.data[3] = 1;
  s.image.data[0] = 1.5f;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.image.data[0] = 0.f;
  s.mask = BinaryMask(4, 5);
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Domain, StringRoundTrip) {
  EXPECT_EQ(domain_from_string(to_string(Domain::S)), Domain::S);
  EXPECT_EQ(domain_from_string(to_string(Domain::T)), Domain::T);
  EXPECT_THROW(domain_from_string("X"), std::invalid_argument);
}
