#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dndt/gradcheck.hpp"
#include "dndt/losses.hpp"
#include "dndt/rng.hpp"
#include "dndt/tensor.hpp"

using dndt::ad::GradCheckInput;
using dndt::ad::Tape;
using dndt::ad::Tensor;
using dndt::loss::LossConfig;
using dndt::loss::Particle;

namespace {

std::vector<double> random_vec(std::size_t n, dndt::rng::Stream& rs,
                               double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rs.uniform(lo, hi);
  return v;
}

double dice_oracle(const std::vector<double>& p, const std::vector<double>& r,
                   double eps) {
  double inter = 0, sp = 0, sr = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * r[i];
    sp += p[i];
    sr += r[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sr + eps);
}

double bce_oracle(const std::vector<double>& p, const std::vector<double>& r) {
  std::size_t bg = 0;
  for (double x : r)
    if (x < 0.5) ++bg;
  double beta = std::clamp(static_cast<double>(bg) / p.size(), 0.05, 0.95);
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    acc += beta * r[i] * std::log(std::max(p[i], 1e-7)) +
           (1 - beta) * (1 - r[i]) * std::log(std::max(1 - p[i], 1e-7));
  return -acc / p.size();
}

std::vector<double> softmax_oracle(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) total += out[i] = std::exp(v[i] - m);
  for (auto& x : out) x /= total;
  return out;
}

// Expected coordinate under the symmetric unit grid.
std::pair<double, double> coord_oracle(const std::vector<double>& prob, int K) {
  double x = 0, y = 0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      x += prob[i * K + j] * (2.0 * j + 1.0 - K) / K;
      y += prob[i * K + j] * (2.0 * i + 1.0 - K) / K;
    }
  return {x, y};
}

double kl(const std::vector<double>& p, const std::vector<double>& m) {
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) acc += p[i] * std::log(p[i] / m[i]);
  return acc;
}

double jsd_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

std::vector<double> random_distribution(std::size_t n, dndt::rng::Stream& rs) {
  std::vector<double> v(n);
  double total = 0;
  for (auto& x : v) total += x = rs.uniform(0.0, 1.0) + 1e-4;
  for (auto& x : v) x /= total;
  return v;
}

}  // namespace

// ---------------------------------------------------------------- Dice

TEST(Dice, IdenticalBinaryMasksScoreZero) {
  Tape<double> tape;
  std::vector<double> m = {0, 1, 1, 0, 1, 0};
  auto p = tape.leaf({6}, m);
  auto r = tape.constant({6}, m);
  EXPECT_NEAR(dndt::loss::dice_loss(p, r).value()[0], 0.0, 1e-6);
}

TEST(Dice, BothEmptyIsPerfectMatch) {
  Tape<double> tape;
  auto p = tape.leaf({4}, std::vector<double>(4, 0.0));
  auto r = tape.constant({4}, std::vector<double>(4, 0.0));
  // eps in numerator and denominator makes 0/0 resolve to a score of 1
  EXPECT_DOUBLE_EQ(dndt::loss::dice_loss(p, r).value()[0], 0.0);
}

TEST(Dice, DisjointMasksApproachOne) {
  Tape<double> tape;
  const double eps = 1e-6;
  auto p = tape.leaf({4}, std::vector<double>{1, 0, 0, 0});
  auto r = tape.constant({4}, std::vector<double>{0, 1, 0, 0});
  EXPECT_DOUBLE_EQ(dndt::loss::dice_loss(p, r, eps).value()[0],
                   1.0 - eps / (2.0 + eps));
}

TEST(Dice, MatchesClosedFormOnSoftMaps) {
  dndt::rng::Stream rs(71);
  for (int trial = 0; trial < 5; ++trial) {
    auto pv = random_vec(24, rs, 0.0, 1.0);
    auto rv = random_vec(24, rs, 0.0, 1.0);
    Tape<double> tape;
    auto p = tape.leaf({24}, pv);
    auto r = tape.constant({24}, rv);
    EXPECT_NEAR(dndt::loss::dice_loss(p, r).value()[0],
                dice_oracle(pv, rv, 1e-6), 1e-12);
  }
}

TEST(Dice, RejectsOutOfRangeValues) {
  Tape<double> tape;
  auto p = tape.leaf({2}, std::vector<double>{-0.1, 0.5});
  auto r = tape.constant({2}, std::vector<double>{0.0, 1.0});
  EXPECT_THROW(dndt::loss::dice_loss(p, r), dndt::NumericError);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(72);
  auto pv = random_vec(16, rs, 0.1, 0.9);
  auto rv = random_vec(16, rs, 0.0, 1.0);
  auto report = dndt::ad::grad_check(
      [&rv](Tape<double>& t, const Tensor<double>& x) {
        auto r = t.constant({16}, rv);
        return dndt::loss::dice_loss(x, r);
      },
      {16}, pv);
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

// ---------------------------------------------------------------- BCE

TEST(BalancedBce, MatchesDirectSumOracle) {
  dndt::rng::Stream rs(73);
  for (int trial = 0; trial < 5; ++trial) {
    auto pv = random_vec(40, rs, 0.02, 0.98);
    std::vector<double> rv(40);
    for (auto& x : rv) x = rs.uniform() < 0.3 ? 1.0 : 0.0;
    Tape<double> tape;
    auto p = tape.leaf({40}, pv);
    auto r = tape.constant({40}, rv);
    EXPECT_NEAR(dndt::loss::balanced_bce(p, r).value()[0], bce_oracle(pv, rv),
                1e-6);
  }
}

TEST(BalancedBce, ExtremePredictionsStayFinite) {
  Tape<double> tape;
  auto p = tape.leaf({4}, std::vector<double>{0.0, 1.0, 0.0, 1.0});
  auto r = tape.constant({4}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  double v = dndt::loss::balanced_bce(p, r).value()[0];
  EXPECT_TRUE(std::isfinite(v));
  // the log clamp caps each term at -log(1e-7)
  EXPECT_LE(v, -std::log(1e-7) + 1e-9);
}

TEST(BalancedBce, ClassWeightIsClamped) {
  Tape<double> tape;
  // all-foreground reference: raw background fraction 0 must clamp to 0.05
  std::vector<double> pv = {0.6, 0.7, 0.8, 0.9};
  std::vector<double> rv(4, 1.0);
  auto p = tape.leaf({4}, pv);
  auto r = tape.constant({4}, rv);
  double expected = 0;
  for (int i = 0; i < 4; ++i) expected += 0.05 * std::log(pv[i]);
  expected = -expected / 4;
  EXPECT_NEAR(dndt::loss::balanced_bce(p, r).value()[0], expected, 1e-12);
}

TEST(BalancedBce, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(74);
  auto pv = random_vec(20, rs, 0.1, 0.9);
  std::vector<double> rv(20);
  for (auto& x : rv) x = rs.uniform() < 0.4 ? 1.0 : 0.0;
  auto report = dndt::ad::grad_check(
      [&rv](Tape<double>& t, const Tensor<double>& x) {
        auto r = t.constant({20}, rv);
        return dndt::loss::balanced_bce(x, r);
      },
      {20}, pv);
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

TEST(DenoLoss, IsDicePlusWeightedBce) {
  dndt::rng::Stream rs(75);
  auto pv = random_vec(30, rs, 0.05, 0.95);
  std::vector<double> rv(30);
  for (auto& x : rv) x = rs.uniform() < 0.5 ? 1.0 : 0.0;
  LossConfig cfg;
  cfg.delta = 0.7;
  Tape<double> tape;
  auto p = tape.leaf({30}, pv);
  auto r = tape.constant({30}, rv);
  double expected = dice_oracle(pv, rv, cfg.eps) + cfg.delta * bce_oracle(pv, rv);
  EXPECT_NEAR(dndt::loss::deno_loss(p, r, cfg).value()[0], expected, 1e-9);
}

// ---------------------------------------------------------------- DSNT

TEST(Dsnt, CenterDeltaMapsToOrigin) {
  Tape<double> tape;
  for (int K : {3, 5, 7}) {
    std::vector<double> h(static_cast<std::size_t>(K) * K, 0.0);
    h[(K / 2) * K + K / 2] = 1.0;
    auto c = dndt::loss::dsnt(tape.leaf({K, K}, h));
    EXPECT_NEAR(c.value()[0], 0.0, 1e-12);
    EXPECT_NEAR(c.value()[1], 0.0, 1e-12);
  }
}

TEST(Dsnt, CornerDeltaMatchesGridFormula) {
  Tape<double> tape;
  std::vector<double> h(9, 0.0);
  h[0] = 1.0;  // delta at (row 0, col 0) of a 3x3 map
  auto c = dndt::loss::dsnt(tape.leaf({3, 3}, h));
  EXPECT_NEAR(c.value()[0], -2.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.value()[1], -2.0 / 3.0, 1e-12);
}

TEST(Dsnt, UniformMapIsCentered) {
  Tape<double> tape;
  const int K = 7;
  std::vector<double> h(static_cast<std::size_t>(K) * K, 1.0 / (K * K));
  auto c = dndt::loss::dsnt(tape.leaf({K, K}, h));
  EXPECT_NEAR(c.value()[0], 0.0, 1e-12);
  EXPECT_NEAR(c.value()[1], 0.0, 1e-12);
}

TEST(Dsnt, RejectsNonDistributions) {
  Tape<double> tape;
  std::vector<double> not_normalized(9, 1.0);
  EXPECT_THROW(dndt::loss::dsnt(tape.leaf({3, 3}, not_normalized)),
               dndt::NumericError);
  std::vector<double> negative(9, 0.0);
  negative[0] = 1.5;
  negative[1] = -0.5;
  EXPECT_THROW(dndt::loss::dsnt(tape.leaf({3, 3}, negative)),
               dndt::NumericError);
  EXPECT_THROW(dndt::loss::dsnt(tape.leaf({2, 3}, std::vector<double>(6, 0.0))),
               dndt::ShapeError);
}

TEST(Dsnt, BackwardIsTheGridItself) {
  // d(coords)/d(h[i,j]) = (X[j], Y[i]) exactly; verify both rows via
  // one-hot upstream gradients.
  const int K = 5;
  dndt::rng::Stream rs(76);
  auto prob = random_distribution(static_cast<std::size_t>(K) * K, rs);
  for (int axis = 0; axis < 2; ++axis) {
    Tape<double> tape;
    auto h = tape.leaf({K, K}, prob, true);
    auto c = dndt::loss::dsnt(h);
    std::vector<double> sel = {axis == 0 ? 1.0 : 0.0, axis == 1 ? 1.0 : 0.0};
    auto picked = dndt::ad::sum(dndt::ad::mul(c, tape.constant({2}, sel)));
    tape.backward(picked);
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < K; ++j) {
        double expect = axis == 0 ? (2.0 * j + 1.0 - K) / K
                                  : (2.0 * i + 1.0 - K) / K;
        EXPECT_DOUBLE_EQ(h.grad()[i * K + j], expect);
      }
  }
}

TEST(Dsnt, GradientThroughSoftmaxMatchesFiniteDifferences) {
  dndt::rng::Stream rs(77);
  auto logits = random_vec(49, rs, -1.0, 1.0);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        auto c = dndt::loss::dsnt(dndt::ad::softmax2d(x));
        return dndt::ad::sum(dndt::ad::mul(c, c));
      },
      {7, 7}, logits);
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

TEST(Dsnt, PixelMappingRoundTrips) {
  const int K = 7, origin = 13;
  for (double px = origin - 0.4; px < origin + K; px += 0.37) {
    double c = dndt::loss::pixel_to_dsnt(px, origin, K);
    EXPECT_NEAR(dndt::loss::dsnt_to_pixel(c, origin, K), px, 1e-12);
  }
  // a delta at window cell j recovers the cell's pixel-center exactly
  Tape<double> tape;
  std::vector<double> h(static_cast<std::size_t>(K) * K, 0.0);
  h[2 * K + 5] = 1.0;
  auto c = dndt::loss::dsnt(tape.leaf({K, K}, h));
  EXPECT_NEAR(dndt::loss::dsnt_to_pixel(c.value()[0], origin, K), origin + 5,
              1e-9);
  EXPECT_NEAR(dndt::loss::dsnt_to_pixel(c.value()[1], origin, K), origin + 2,
              1e-9);
}

// ------------------------------------------------------- Gaussian target

TEST(GaussianTarget, NormalizedAndSymmetric) {
  auto g = dndt::loss::gaussian_target(7, 3.0, 3.0, 1.0);
  double total = std::accumulate(g.begin(), g.end(), 0.0);
  EXPECT_NEAR(total, 1.0, 1e-9);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      EXPECT_DOUBLE_EQ(g[i * 7 + j], g[j * 7 + i]);          // transpose
      EXPECT_DOUBLE_EQ(g[i * 7 + j], g[(6 - i) * 7 + (6 - j)]);  // point
    }
  EXPECT_GT(g[3 * 7 + 3], g[3 * 7 + 4]);
}

TEST(GaussianTarget, RejectsBadArguments) {
  EXPECT_THROW(dndt::loss::gaussian_target(4, 1.0, 1.0, 1.0), dndt::UsageError);
  EXPECT_THROW(dndt::loss::gaussian_target(7, -0.5, 3.0, 1.0), dndt::UsageError);
  EXPECT_THROW(dndt::loss::gaussian_target(7, 3.0, 6.5, 1.0), dndt::UsageError);
}

TEST(GaussianTarget, DsntRecoversInteriorCentersWithin005Px) {
  // Truncation to the window biases the expectation near the border; for
  // centers at least 2 px inside a 7x7 window the recovery must be sharp.
  const int K = 7;
  Tape<double> tape;
  double worst = 0.0;
  for (double cy = 2.0; cy <= K - 3.0; cy += 0.25)
    for (double cx = 2.0; cx <= K - 3.0; cx += 0.25) {
      auto g = dndt::loss::gaussian_target(K, cx, cy, 1.0);
      auto c = dndt::loss::dsnt(tape.leaf({K, K}, g));
      double rx = dndt::loss::dsnt_to_pixel(c.value()[0], 0, K);
      double ry = dndt::loss::dsnt_to_pixel(c.value()[1], 0, K);
      worst = std::max({worst, std::fabs(rx - cx), std::fabs(ry - cy)});
    }
  EXPECT_LT(worst, 0.05) << "worst round-trip error " << worst;
}

// ---------------------------------------------------------------- JSD

TEST(Jsd, IdenticalDistributionsScoreExactlyZero) {
  dndt::rng::Stream rs(78);
  auto p = random_distribution(25, rs);
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(dndt::loss::jsd(tape.leaf({5, 5}, p), p).value()[0], 0.0);
}

TEST(Jsd, DisjointDeltasScoreExactlyLog2) {
  Tape<double> tape;
  std::vector<double> p(9, 0.0), q(9, 0.0);
  p[0] = 1.0;
  q[8] = 1.0;
  EXPECT_DOUBLE_EQ(dndt::loss::jsd(tape.leaf({3, 3}, p), q).value()[0],
                   std::log(2.0));
}

TEST(Jsd, MatchesKlDecompositionOracle) {
  dndt::rng::Stream rs(79);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_distribution(16, rs);
    auto q = random_distribution(16, rs);
    Tape<double> tape;
    EXPECT_NEAR(dndt::loss::jsd(tape.leaf({4, 4}, p), q).value()[0],
                jsd_oracle(p, q), 1e-8);
  }
}

TEST(Jsd, StaysWithinTheoreticalBounds) {
  dndt::rng::Stream rs(80);
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = random_distribution(9, rs);
    auto q = random_distribution(9, rs);
    Tape<double> tape;
    double v = dndt::loss::jsd(tape.leaf({3, 3}, p), q).value()[0];
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, std::log(2.0) + 1e-12);
  }
}

TEST(Jsd, RejectsNonDistributions) {
  Tape<double> tape;
  dndt::rng::Stream rs(81);
  auto p = random_distribution(9, rs);
  std::vector<double> q(9, 1.0);  // sums to 9
  EXPECT_THROW(dndt::loss::jsd(tape.leaf({3, 3}, p), q), dndt::NumericError);
}

TEST(Jsd, GradientThroughSoftmaxMatchesFiniteDifferences) {
  dndt::rng::Stream rs(82);
  auto logits = random_vec(25, rs, -1.0, 1.0);
  auto q = dndt::loss::gaussian_target(5, 2.3, 1.8, 1.0);
  auto report = dndt::ad::grad_check(
      [&q](Tape<double>& t, const Tensor<double>& x) {
        return dndt::loss::jsd(dndt::ad::softmax2d(x), q);
      },
      {5, 5}, logits);
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

// ------------------------------------------------------ window extraction

TEST(Windows, OriginsStayWithinJitterRange) {
  Tape<double> tape;
  dndt::rng::Stream rs(83);
  auto logits = tape.leaf({24, 24}, random_vec(24 * 24, rs));
  LossConfig cfg;
  std::vector<Particle> truth = {{1, 11.3, 12.7, true}, {2, 8.0, 15.5, true}};
  auto wins = dndt::loss::extract_training_windows(logits, truth, cfg, 5);
  ASSERT_EQ(wins.size(), 2u);
  for (const auto& w : wins) {
    const auto& pt = truth[w.id - 1];
    EXPECT_LE(std::abs(w.ox - (std::lround(pt.x) - cfg.window / 2)), cfg.jitter);
    EXPECT_LE(std::abs(w.oy - (std::lround(pt.y) - cfg.window / 2)), cfg.jitter);
    // normalized target is the exact affine image of the local pixel target
    EXPECT_DOUBLE_EQ(w.tx, (pt.x - w.ox + 0.5) * 2.0 / cfg.window - 1.0);
    EXPECT_DOUBLE_EQ(w.ty, (pt.y - w.oy + 0.5) * 2.0 / cfg.window - 1.0);
    EXPECT_DOUBLE_EQ(w.tx_px, pt.x - w.ox);
    EXPECT_DOUBLE_EQ(w.ty_px, pt.y - w.oy);
  }
}

TEST(Windows, SliceContentMatchesScoreMap) {
  Tape<double> tape;
  dndt::rng::Stream rs(84);
  auto vals = random_vec(20 * 20, rs);
  auto logits = tape.leaf({20, 20}, vals);
  LossConfig cfg;
  cfg.jitter = 0;
  std::vector<Particle> truth = {{7, 9.0, 10.0, true}};
  auto wins = dndt::loss::extract_training_windows(logits, truth, cfg, 1);
  ASSERT_EQ(wins.size(), 1u);
  const auto& w = wins[0];
  EXPECT_EQ(w.ox, 9 - cfg.window / 2);
  EXPECT_EQ(w.oy, 10 - cfg.window / 2);
  for (int i = 0; i < cfg.window; ++i)
    for (int j = 0; j < cfg.window; ++j)
      EXPECT_DOUBLE_EQ(w.logits.value()[i * cfg.window + j],
                       vals[(w.oy + i) * 20 + (w.ox + j)]);
}

TEST(Windows, BorderParticlesAreDropped) {
  Tape<double> tape;
  auto logits = tape.leaf({16, 16}, std::vector<double>(256, 0.0));
  LossConfig cfg;
  cfg.jitter = 0;
  // window would start at -2 / overflow the right edge -> dropped
  std::vector<Particle> truth = {
      {1, 1.0, 8.0, true}, {2, 14.9, 8.0, true}, {3, 8.0, 8.0, true}};
  auto wins = dndt::loss::extract_training_windows(logits, truth, cfg, 1);
  ASSERT_EQ(wins.size(), 1u);
  EXPECT_EQ(wins[0].id, 3);
}

TEST(Windows, IneligibleParticlesAreSkipped) {
  Tape<double> tape;
  auto logits = tape.leaf({16, 16}, std::vector<double>(256, 0.0));
  std::vector<Particle> truth = {{1, 8.0, 8.0, false}, {2, 8.0, 8.0, true}};
  auto wins = dndt::loss::extract_training_windows(logits, truth, LossConfig{}, 1);
  ASSERT_EQ(wins.size(), 1u);
  EXPECT_EQ(wins[0].id, 2);
}

TEST(Windows, JitterIsKeyedByParticleIdNotListOrder) {
  Tape<double> tape;
  dndt::rng::Stream rs(85);
  auto logits = tape.leaf({32, 32}, random_vec(32 * 32, rs));
  std::vector<Particle> truth = {
      {11, 10.2, 9.7, true}, {22, 20.5, 21.1, true}, {33, 15.0, 16.0, true}};
  auto a = dndt::loss::extract_training_windows(logits, truth, LossConfig{}, 9);
  std::reverse(truth.begin(), truth.end());
  auto b = dndt::loss::extract_training_windows(logits, truth, LossConfig{}, 9);
  ASSERT_EQ(a.size(), 3u);
  ASSERT_EQ(b.size(), 3u);
  for (const auto& wa : a) {
    bool found = false;
    for (const auto& wb : b)
      if (wb.id == wa.id) {
        EXPECT_EQ(wb.ox, wa.ox);
        EXPECT_EQ(wb.oy, wa.oy);
        found = true;
      }
    EXPECT_TRUE(found);
  }
}

// --------------------------------------------------------- presence mask

TEST(PresenceMask, MarksPixelCentersWithinRadius) {
  std::vector<Particle> truth = {{1, 2.0, 2.0, true}};
  auto m = dndt::loss::presence_mask<double>(6, 6, truth, 1.5);
  int ones = 0;
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      double d2 = (x - 2.0) * (x - 2.0) + (y - 2.0) * (y - 2.0);
      EXPECT_DOUBLE_EQ(m[y * 6 + x], d2 <= 2.25 ? 1.0 : 0.0);
      ones += m[y * 6 + x] > 0.5;
    }
  EXPECT_EQ(ones, 9);  // the full 3x3 block: corner distance sqrt(2) < 1.5
}

TEST(PresenceMask, ClipsAtImageBorder) {
  std::vector<Particle> truth = {{1, 0.0, 0.0, true}};
  auto m = dndt::loss::presence_mask<double>(4, 4, truth, 1.5);
  EXPECT_DOUBLE_EQ(m[0], 1.0);
  EXPECT_DOUBLE_EQ(m[1], 1.0);
  EXPECT_DOUBLE_EQ(m[4], 1.0);
  EXPECT_DOUBLE_EQ(m[5], 1.0);  // (1,1) at distance sqrt(2)
  EXPECT_DOUBLE_EQ(m[2], 0.0);  // (0,2) at distance 2
}

// ------------------------------------------------------------- det loss

TEST(DetLoss, PerfectHeatmapAtPixelCenterIsNearZero) {
  // Plant log(gaussian) logits so softmax reproduces the target heatmap
  // exactly; with the particle on a pixel center the coordinate error and
  // the JSD both vanish.
  LossConfig cfg;
  cfg.jitter = 0;
  cfg.mu = 0.0;
  const int K = cfg.window;
  Tape<double> tape;
  std::vector<double> logits(24 * 24, -30.0);
  std::vector<Particle> truth = {{1, 8.0, 9.0, true}};
  const int ox = 8 - K / 2, oy = 9 - K / 2;
  auto g = dndt::loss::gaussian_target(K, 8.0 - ox, 9.0 - oy, cfg.sigma_hm);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j)
      logits[(oy + i) * 24 + (ox + j)] = std::log(g[i * K + j]);
  auto t = tape.leaf({24, 24}, logits);
  auto res = dndt::loss::det_loss(t, truth, cfg, 3);
  EXPECT_EQ(res.n_windows, 1);
  EXPECT_FALSE(res.window_warning);
  EXPECT_LT(res.loss.value()[0], 1e-3);
}

TEST(DetLoss, PureEuclideanMatchesOracle) {
  LossConfig cfg;
  cfg.lambda = 0.0;
  cfg.mu = 0.0;
  const int K = cfg.window;
  dndt::rng::Stream rs(86);
  auto vals = random_vec(32 * 32, rs);
  std::vector<Particle> truth = {{4, 12.4, 13.8, true}, {9, 20.1, 18.6, true}};
  Tape<double> tape;
  auto t = tape.leaf({32, 32}, vals);
  auto res = dndt::loss::det_loss(t, truth, cfg, 17);
  ASSERT_EQ(res.n_windows, 2);

  // independent recomputation from the returned window geometry
  double expected = 0;
  auto wins = dndt::loss::extract_training_windows(t, truth, cfg, 17);
  for (const auto& w : wins) {
    std::vector<double> patch(static_cast<std::size_t>(K) * K);
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < K; ++j)
        patch[i * K + j] = vals[(w.oy + i) * 32 + (w.ox + j)];
    auto prob = softmax_oracle(patch);
    auto [cx, cy] = coord_oracle(prob, K);
    expected += std::sqrt((cx - w.tx) * (cx - w.tx) + (cy - w.ty) * (cy - w.ty));
  }
  expected /= wins.size();
  EXPECT_NEAR(res.loss.value()[0], expected, 1e-9);
}

TEST(DetLoss, FullCompositionMatchesOracle) {
  LossConfig cfg;  // lambda = mu = 1
  const int K = cfg.window;
  dndt::rng::Stream rs(87);
  auto vals = random_vec(32 * 32, rs);
  std::vector<Particle> truth = {{4, 12.4, 13.8, true}, {9, 20.1, 18.6, true}};
  Tape<double> tape;
  auto t = tape.leaf({32, 32}, vals);
  auto res = dndt::loss::det_loss(t, truth, cfg, 17);
  ASSERT_EQ(res.n_windows, 2);

  double window_part = 0;
  auto wins = dndt::loss::extract_training_windows(t, truth, cfg, 17);
  for (const auto& w : wins) {
    std::vector<double> patch(static_cast<std::size_t>(K) * K);
    for (int i = 0; i < K; ++i)
      for (int j = 0; j < K; ++j)
        patch[i * K + j] = vals[(w.oy + i) * 32 + (w.ox + j)];
    auto prob = softmax_oracle(patch);
    auto [cx, cy] = coord_oracle(prob, K);
    double dist = std::sqrt((cx - w.tx) * (cx - w.tx) + (cy - w.ty) * (cy - w.ty));
    auto q = dndt::loss::gaussian_target(K, w.tx_px, w.ty_px, cfg.sigma_hm);
    window_part += dist + cfg.lambda * jsd_oracle(prob, q);
  }
  window_part /= wins.size();

  auto mask = dndt::loss::presence_mask<double>(32, 32, truth, cfg.presence_radius);
  std::vector<double> sig(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    sig[i] = 1.0 / (1.0 + std::exp(-vals[i]));
  double expected = window_part + cfg.mu * bce_oracle(sig, mask);
  EXPECT_NEAR(res.loss.value()[0], expected, 1e-9);
}

TEST(DetLoss, NoUsableWindowFallsBackToPresenceTerm) {
  LossConfig cfg;
  cfg.jitter = 0;
  Tape<double> tape;
  dndt::rng::Stream rs(88);
  auto vals = random_vec(16 * 16, rs);
  auto t = tape.leaf({16, 16}, vals);
  std::vector<Particle> truth = {{1, 0.5, 0.5, true}};  // window clips -> drop
  auto res = dndt::loss::det_loss(t, truth, cfg, 1);
  EXPECT_EQ(res.n_windows, 0);
  EXPECT_TRUE(res.window_warning);
  auto mask = dndt::loss::presence_mask<double>(16, 16, truth, cfg.presence_radius);
  std::vector<double> sig(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    sig[i] = 1.0 / (1.0 + std::exp(-vals[i]));
  EXPECT_NEAR(res.loss.value()[0], cfg.mu * bce_oracle(sig, mask), 1e-9);
}

TEST(DetLoss, ListOrderDoesNotChangeTheValue) {
  LossConfig cfg;
  dndt::rng::Stream rs(89);
  auto vals = random_vec(32 * 32, rs);
  std::vector<Particle> truth = {
      {3, 10.0, 11.0, true}, {5, 21.3, 8.9, true}, {8, 15.5, 25.0, true}};
  Tape<double> t1;
  auto a = dndt::loss::det_loss(t1.leaf({32, 32}, vals), truth, cfg, 23);
  std::reverse(truth.begin(), truth.end());
  Tape<double> t2;
  auto b = dndt::loss::det_loss(t2.leaf({32, 32}, vals), truth, cfg, 23);
  EXPECT_NEAR(a.loss.value()[0], b.loss.value()[0], 1e-12);
}

TEST(DetLoss, RejectsBadConfig) {
  Tape<double> tape;
  auto t = tape.leaf({16, 16}, std::vector<double>(256, 0.0));
  LossConfig cfg;
  cfg.window = 6;
  EXPECT_THROW(dndt::loss::det_loss(t, {}, cfg, 1), dndt::UsageError);
}

// ------------------------------------------------------------ joint loss

TEST(JointLoss, GammaZeroEqualsDetectionAlone) {
  LossConfig cfg;
  cfg.gamma = 0.0;
  dndt::rng::Stream rs(90);
  auto lv = random_vec(16 * 16, rs);
  auto dv = random_vec(16 * 16, rs, 0.05, 0.95);
  auto cv = random_vec(16 * 16, rs, 0.0, 1.0);
  std::vector<Particle> truth = {{2, 8.2, 7.9, true}};
  Tape<double> tape;
  auto logits = tape.leaf({16, 16}, lv);
  auto den = tape.leaf({16, 16}, dv);
  auto clean = tape.constant({16, 16}, cv);
  auto j = dndt::loss::joint_loss(logits, den, clean, truth, cfg, 31);
  auto d = dndt::loss::det_loss(logits, truth, cfg, 31);
  EXPECT_EQ(j.total.value()[0], d.loss.value()[0]);
  EXPECT_FALSE(j.deno.valid());
}

TEST(JointLoss, ComposesDetAndWeightedDeno) {
  LossConfig cfg;  // gamma = 0.5
  dndt::rng::Stream rs(91);
  auto lv = random_vec(16 * 16, rs);
  auto dv = random_vec(16 * 16, rs, 0.05, 0.95);
  auto cv = random_vec(16 * 16, rs, 0.0, 1.0);
  std::vector<Particle> truth = {{2, 8.2, 7.9, true}};
  Tape<double> tape;
  auto logits = tape.leaf({16, 16}, lv);
  auto den = tape.leaf({16, 16}, dv);
  auto clean = tape.constant({16, 16}, cv);
  auto j = dndt::loss::joint_loss(logits, den, clean, truth, cfg, 31);
  EXPECT_NEAR(j.total.value()[0],
              j.det.value()[0] + cfg.gamma * j.deno.value()[0], 1e-12);
}

TEST(JointLoss, GradientMatchesFiniteDifferences) {
  // End-to-end check of the composite objective: gradients w.r.t. the score
  // logits and the (pre-sigmoid) denoised map.
  LossConfig cfg;
  dndt::rng::Stream rs(92);
  auto lv = random_vec(16 * 16, rs);
  auto rawv = random_vec(16 * 16, rs);
  auto cv = random_vec(16 * 16, rs, 0.0, 1.0);
  std::vector<Particle> truth = {{2, 8.2, 7.9, true}, {6, 5.1, 11.6, true}};
  auto report = dndt::ad::grad_check(
      [&cv, &truth, &cfg](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        auto clean = t.constant({16, 16}, cv);
        auto den = dndt::ad::sigmoid(in[1]);
        auto j = dndt::loss::joint_loss(in[0], den, clean, truth, cfg, 31);
        return j.total;
      },
      {GradCheckInput{{16, 16}, lv}, GradCheckInput{{16, 16}, rawv}});
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err
                                 << " at leaf " << report.worst_leaf;
}
