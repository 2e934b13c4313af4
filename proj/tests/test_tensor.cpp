#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dndt/gradcheck.hpp"
#include "dndt/rng.hpp"
#include "dndt/tensor.hpp"

using dndt::ad::GradCheckInput;
using dndt::ad::Shape;
using dndt::ad::Tape;
using dndt::ad::Tensor;

namespace {

std::vector<double> random_vec(std::size_t n, dndt::rng::Stream& rs,
                               double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rs.uniform(lo, hi);
  return v;
}

// Independent six-nested-loop convolution oracle (padding preserves size).
std::vector<double> conv2d_oracle(const std::vector<double>& x, int N, int Cin,
                                  int H, int W, const std::vector<double>& w,
                                  int Cout, int k, const std::vector<double>& b) {
  const int pad = (k == 3) ? 1 : 0;
  std::vector<double> out(static_cast<std::size_t>(N) * Cout * H * W, 0.0);
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int y = 0; y < H; ++y)
        for (int xc = 0; xc < W; ++xc) {
          double acc = b[co];
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int yy = y + ky - pad;
                const int xx = xc + kx - pad;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                acc += x[((static_cast<std::size_t>(n) * Cin + ci) * H + yy) * W + xx] *
                       w[((static_cast<std::size_t>(co) * Cin + ci) * k + ky) * k + kx];
              }
          out[((static_cast<std::size_t>(n) * Cout + co) * H + y) * W + xc] = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernelReproducesInput) {
  Tape<double> tape;
  std::vector<double> img = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> w(9, 0.0);
  w[4] = 1.0;  // center tap
  auto x = tape.leaf({1, 1, 3, 3}, img);
  auto wt = tape.leaf({1, 1, 3, 3}, w);
  auto b = tape.leaf({1}, std::vector<double>{0.0});
  auto y = dndt::ad::conv2d(x, wt, b, 3);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], img[i]);
}

TEST(Conv2d, ZeroInputYieldsBias) {
  Tape<double> tape;
  dndt::rng::Stream rs(11);
  auto x = tape.leaf({1, 2, 4, 4}, std::vector<double>(32, 0.0));
  auto wt = tape.leaf({3, 2, 3, 3}, random_vec(54, rs));
  auto b = tape.leaf({3}, std::vector<double>{0.5, -1.0, 2.0});
  auto y = dndt::ad::conv2d(x, wt, b, 3);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      EXPECT_DOUBLE_EQ(y.value()[c * 16 + i], b.value()[c]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  dndt::rng::Stream rs(42);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = (trial % 2 == 0) ? 3 : 1;
    auto xv = random_vec(2 * 4 * 4, rs);
    auto wv = random_vec(static_cast<std::size_t>(3) * 2 * k * k, rs);
    auto bv = random_vec(3, rs);
    Tape<double> tape;
    auto x = tape.leaf({1, 2, 4, 4}, xv);
    auto wt = tape.leaf({3, 2, k, k}, wv);
    auto b = tape.leaf({3}, bv);
    auto y = dndt::ad::conv2d(x, wt, b, k);
    auto ref = conv2d_oracle(xv, 1, 2, 4, 4, wv, 3, k, bv);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(y.value()[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tape<double> tape;
  auto x = tape.leaf({1, 2, 4, 4}, std::vector<double>(32, 0.0));
  auto wt = tape.leaf({3, 3, 3, 3}, std::vector<double>(81, 0.0));
  auto b = tape.leaf({3}, std::vector<double>(3, 0.0));
  EXPECT_THROW(dndt::ad::conv2d(x, wt, b, 3), dndt::ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(7);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const std::vector<Tensor<double>>& xs) {
        auto y = dndt::ad::conv2d(xs[0], xs[1], xs[2], 3);
        return dndt::ad::sum(dndt::ad::mul(y, y));
      },
      {GradCheckInput{{1, 2, 4, 4}, random_vec(32, rs)},
       GradCheckInput{{2, 2, 3, 3}, random_vec(36, rs)},
       GradCheckInput{{2}, random_vec(2, rs)}});
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(InstanceNorm, ConstantChannelMapsToShift) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 3, 3}, std::vector<double>(9, 5.0));
  auto g = tape.leaf({1}, std::vector<double>{1.0});
  auto b = tape.leaf({1}, std::vector<double>{0.0});
  auto y = dndt::ad::instance_norm(x, g, b);
  for (double v : y.value()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(InstanceNorm, NormalizesMeanAndVariance) {
  dndt::rng::Stream rs(3);
  auto xv = random_vec(2 * 2 * 8 * 8, rs, -3.0, 3.0);
  Tape<double> tape;
  auto x = tape.leaf({2, 2, 8, 8}, xv);
  auto g = tape.leaf({2}, std::vector<double>{1.0, 1.0});
  auto b = tape.leaf({2}, std::vector<double>{0.0, 0.0});
  auto y = dndt::ad::instance_norm(x, g, b, 1e-5);
  for (int nc = 0; nc < 4; ++nc) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < 64; ++i) mean += y.value()[nc * 64 + i];
    mean /= 64.0;
    for (int i = 0; i < 64; ++i) {
      const double d = y.value()[nc * 64 + i] - mean;
      var += d * d;
    }
    var /= 64.0;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(InstanceNorm, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(5);
  auto cv = random_vec(18, rs);
  auto report = dndt::ad::grad_check(
      [cv](Tape<double>& t, const std::vector<Tensor<double>>& xs) {
        auto y = dndt::ad::instance_norm(xs[0], xs[1], xs[2], 1e-5);
        auto c = t.constant({1, 2, 3, 3}, cv);
        return dndt::ad::sum(dndt::ad::mul(y, c));
      },
      {GradCheckInput{{1, 2, 3, 3}, random_vec(18, rs)},
       GradCheckInput{{2}, {1.3, 0.7}}, GradCheckInput{{2}, {0.1, -0.2}}});
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(Relu, MapsNegativeToZero) {
  Tape<double> tape;
  auto x = tape.leaf({3}, std::vector<double>{-1.0, 0.0, 2.0}, true);
  auto y = dndt::ad::relu(x);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[2], 2.0);
}

TEST(Relu, AllNegativeHasZeroGradient) {
  Tape<double> tape;
  auto x = tape.leaf({4}, std::vector<double>{-1.0, -2.0, -0.5, -3.0}, true);
  auto y = dndt::ad::sum(dndt::ad::relu(x));
  tape.backward(y);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Relu, GradientAwayFromKink) {
  dndt::rng::Stream rs(9);
  std::vector<double> xv = random_vec(16, rs);
  for (auto& v : xv)
    if (std::fabs(v) < 1e-2) v = std::copysign(1e-2, v == 0.0 ? 1.0 : v);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        auto y = dndt::ad::relu(x);
        return dndt::ad::sum(dndt::ad::mul(y, y));
      },
      {16}, xv);
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(Maxpool2, BlockMax) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto y = dndt::ad::maxpool2(x);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
}

TEST(Maxpool2, TieBreaksToFirstRowMajor) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 2, 2}, std::vector<double>(4, 7.0), true);
  auto y = dndt::ad::sum(dndt::ad::maxpool2(x));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);
}

TEST(Maxpool2, MatchesBlockScanOracle) {
  dndt::rng::Stream rs(21);
  auto xv = random_vec(36, rs);
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 6, 6}, xv);
  auto y = dndt::ad::maxpool2(x);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double m = -1e300;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          m = std::max(m, xv[(2 * i + dy) * 6 + (2 * j + dx)]);
      EXPECT_DOUBLE_EQ(y.value()[i * 3 + j], m);
    }
}

TEST(Maxpool2, RejectsOddExtent) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 3, 4}, std::vector<double>(12, 0.0));
  EXPECT_THROW(dndt::ad::maxpool2(x), dndt::ShapeError);
}

TEST(Upsample, ConstantPreserved) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 3, 3}, std::vector<double>(9, 2.5));
  auto y = dndt::ad::upsample_bilinear2(x);
  ASSERT_EQ(y.numel(), 36u);
  for (double v : y.value()) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Upsample, SinglePixelReplicates) {
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 1, 1}, std::vector<double>{3.25});
  auto y = dndt::ad::upsample_bilinear2(x);
  ASSERT_EQ(y.numel(), 4u);
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 3.25);
}

TEST(Upsample, MatchesInterpolationOracle) {
  dndt::rng::Stream rs(13);
  auto xv = random_vec(9, rs);
  Tape<double> tape;
  auto x = tape.leaf({1, 1, 3, 3}, xv);
  auto y = dndt::ad::upsample_bilinear2(x);
  auto sample = [&](double sy, double sx) {
    sy = std::clamp(sy, 0.0, 2.0);
    sx = std::clamp(sx, 0.0, 2.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y1 = std::min(y0 + 1, 2), x1 = std::min(x0 + 1, 2);
    const double fy = sy - y0, fx = sx - x0;
    return (1 - fy) * ((1 - fx) * xv[y0 * 3 + x0] + fx * xv[y0 * 3 + x1]) +
           fy * ((1 - fx) * xv[y1 * 3 + x0] + fx * xv[y1 * 3 + x1]);
  };
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      EXPECT_NEAR(y.value()[i * 6 + j],
                  sample((i + 0.5) / 2.0 - 0.5, (j + 0.5) / 2.0 - 0.5), 1e-12);
}

TEST(Upsample, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(17);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        auto y = dndt::ad::upsample_bilinear2(x);
        return dndt::ad::sum(dndt::ad::mul(y, y));
      },
      {1, 1, 3, 3}, random_vec(9, rs));
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(Concat, StacksInArgumentOrder) {
  Tape<double> tape;
  auto a = tape.leaf({1, 2, 2, 2}, std::vector<double>(8, 1.0));
  auto b = tape.leaf({1, 3, 2, 2}, std::vector<double>(12, 2.0));
  auto y = dndt::ad::concat_channels<double>({a, b});
  ASSERT_EQ(y.shape(), (Shape{1, 5, 2, 2}));
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 1.0);
  for (int i = 8; i < 20; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 2.0);
}

TEST(Concat, SingleInputIsIdentity) {
  Tape<double> tape;
  std::vector<double> v = {1, 2, 3, 4};
  auto a = tape.leaf({1, 1, 2, 2}, v);
  auto y = dndt::ad::concat_channels<double>({a});
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.value()[i], v[i]);
}

TEST(Concat, BackwardSplitsByChannelRange) {
  dndt::rng::Stream rs(31);
  Tape<double> tape;
  auto a = tape.leaf({2, 2, 2, 2}, random_vec(16, rs), true);
  auto b = tape.leaf({2, 1, 2, 2}, random_vec(8, rs), true);
  auto cat = dndt::ad::concat_channels<double>({a, b});
  auto up = tape.constant({2, 3, 2, 2}, random_vec(24, rs));
  auto y = dndt::ad::sum(dndt::ad::mul(cat, up));
  tape.backward(y);
  // gradient of each input equals the matching channel range of `up`
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 4; ++i)
        EXPECT_DOUBLE_EQ(a.grad()[(n * 2 + c) * 4 + i],
                         up.value()[(n * 3 + c) * 4 + i]);
    for (int i = 0; i < 4; ++i)
      EXPECT_DOUBLE_EQ(b.grad()[n * 4 + i], up.value()[(n * 3 + 2) * 4 + i]);
  }
}

TEST(Concat, RejectsSpatialMismatch) {
  Tape<double> tape;
  auto a = tape.leaf({1, 1, 2, 2}, std::vector<double>(4, 0.0));
  auto b = tape.leaf({1, 1, 4, 4}, std::vector<double>(16, 0.0));
  EXPECT_THROW(dndt::ad::concat_channels<double>({a, b}), dndt::ShapeError);
}

TEST(Sigmoid, KnownValuesAndStability) {
  Tape<double> tape;
  auto x = tape.leaf({3}, std::vector<double>{0.0, -80.0, 80.0});
  auto y = dndt::ad::sigmoid(x);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-30);
  EXPECT_NEAR(y.value()[2], 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y.value()[1]));
}

TEST(Sigmoid, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(23);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        auto y = dndt::ad::sigmoid(x);
        return dndt::ad::sum(dndt::ad::mul(y, y));
      },
      {12}, random_vec(12, rs, -2.0, 2.0));
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(Offset, AddsConstantEverywhere) {
  Tape<double> tape;
  auto x = tape.leaf({3}, std::vector<double>{1.0, -2.0, 0.5}, true);
  auto y = dndt::ad::offset(x, 2.5);
  EXPECT_DOUBLE_EQ(y.value()[0], 3.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[2], 3.0);
  tape.backward(dndt::ad::sum(y));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Div, MatchesElementwiseQuotient) {
  Tape<double> tape;
  auto a = tape.leaf({3}, std::vector<double>{1.0, -6.0, 9.0});
  auto b = tape.leaf({3}, std::vector<double>{2.0, 3.0, -4.5});
  auto y = dndt::ad::div(a, b);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], -2.0);
  EXPECT_DOUBLE_EQ(y.value()[2], -2.0);
}

TEST(Div, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(57);
  auto av = random_vec(6, rs);
  std::vector<double> bv(6);
  for (auto& x : bv) {
    // denominators bounded away from zero on either sign
    x = rs.uniform(0.5, 2.0) * (rs.uniform() < 0.5 ? -1.0 : 1.0);
  }
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const std::vector<Tensor<double>>& in) {
        auto q = dndt::ad::div(in[0], in[1]);
        return dndt::ad::sum(dndt::ad::mul(q, q));
      },
      {GradCheckInput{{6}, av}, GradCheckInput{{6}, bv}});
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

TEST(SqrtClamped, ValueAndClampFloor) {
  Tape<double> tape;
  auto x = tape.leaf({3}, std::vector<double>{4.0, 0.0, -1.0}, true);
  auto y = dndt::ad::sqrt_clamped(x, 1e-12);
  EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 1e-6);  // sqrt of the floor
  EXPECT_DOUBLE_EQ(y.value()[2], 1e-6);
  tape.backward(dndt::ad::sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);  // 1/(2*sqrt(4))
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);   // clamped region: zero gradient
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(SqrtClamped, GradientAboveFloor) {
  dndt::rng::Stream rs(58);
  std::vector<double> xv(5);
  for (auto& x : xv) x = rs.uniform(0.25, 4.0);
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        return dndt::ad::sum(dndt::ad::sqrt_clamped(x));
      },
      {5}, xv);
  EXPECT_TRUE(report.pass(1e-6)) << "max rel err " << report.max_rel_err;
}

TEST(Softmax2d, ConstantSliceIsUniform) {
  Tape<double> tape;
  auto x = tape.leaf({2, 3}, std::vector<double>(6, 4.0));
  auto y = dndt::ad::softmax2d(x);
  for (double v : y.value()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-12);
}

TEST(Softmax2d, DominantEntryIsOneHot) {
  Tape<double> tape;
  std::vector<double> v(9, 0.0);
  v[4] = 1000.0;
  auto x = tape.leaf({3, 3}, v);
  auto y = dndt::ad::softmax2d(x);
  EXPECT_NEAR(y.value()[4], 1.0, 1e-6);
  for (int i = 0; i < 9; ++i)
    if (i != 4) EXPECT_NEAR(y.value()[i], 0.0, 1e-6);
}

TEST(Softmax2d, SlicesSumToOne) {
  dndt::rng::Stream rs(29);
  Tape<double> tape;
  auto x = tape.leaf({2, 2, 4, 4}, random_vec(64, rs, -5.0, 5.0));
  auto y = dndt::ad::softmax2d(x);
  for (int s = 0; s < 4; ++s) {
    double total = 0.0;
    for (int i = 0; i < 16; ++i) {
      const double v = y.value()[s * 16 + i];
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax2d, GradientMatchesFiniteDifferences) {
  dndt::rng::Stream rs(37);
  auto cv = random_vec(16, rs);
  auto report = dndt::ad::grad_check(
      [cv](Tape<double>& t, const Tensor<double>& x) {
        auto y = dndt::ad::softmax2d(x);
        auto c = t.constant({4, 4}, cv);
        return dndt::ad::sum(dndt::ad::mul(y, c));
      },
      {4, 4}, random_vec(16, rs, -2.0, 2.0));
  EXPECT_TRUE(report.pass(1e-4)) << "max rel err " << report.max_rel_err;
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto x = tape.leaf({5}, std::vector<double>{1, 2, 3, 4, 5}, true);
  auto y = dndt::ad::sum(x);
  tape.backward(y);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, QuadraticGivesTwoX) {
  Tape<double> tape;
  std::vector<double> v = {1.5, -2.0, 0.25};
  auto x = tape.leaf({3}, v, true);
  auto y = dndt::ad::sum(dndt::ad::mul(x, x));
  tape.backward(y);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * v[i]);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tape<double> tape;
  auto x = tape.leaf({3}, std::vector<double>{1, 2, 3}, true);
  EXPECT_THROW(tape.backward(x), dndt::NumericError);
}

TEST(Backward, RejectsRepeatedCallWithoutReset) {
  Tape<double> tape;
  auto x = tape.leaf({2}, std::vector<double>{1, 2}, true);
  auto y = dndt::ad::sum(x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), dndt::NumericError);
  tape.clear_grads();
  EXPECT_NO_THROW(tape.backward(y));
}

TEST(Backward, ReplayIsDeterministic) {
  dndt::rng::Stream rs(41);
  auto xv = random_vec(2 * 2 * 4 * 4, rs);
  auto wv = random_vec(static_cast<std::size_t>(3) * 2 * 3 * 3, rs);
  auto run = [&]() {
    Tape<double> tape;
    auto x = tape.leaf({2, 2, 4, 4}, xv, true);
    auto w = tape.leaf({3, 2, 3, 3}, wv, true);
    auto b = tape.leaf({3}, std::vector<double>(3, 0.1), true);
    auto y = dndt::ad::conv2d(x, w, b, 3);
    auto loss = dndt::ad::sum(dndt::ad::mul(y, y));
    tape.backward(loss);
    std::vector<double> grads(x.grad().begin(), x.grad().end());
    grads.insert(grads.end(), w.grad().begin(), w.grad().end());
    return grads;
  };
  auto g1 = run();
  auto g2 = run();
  ASSERT_EQ(g1.size(), g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(GradCheck, LinearIsNearExact) {
  // Central differences on a linear map are limited only by rounding in the
  // evaluations themselves (~ulp/eps), so 1e-8 leaves ample headroom.
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        auto c = t.constant({4}, {0.5, -1.0, 2.0, 3.0});
        return dndt::ad::sum(dndt::ad::mul(x, c));
      },
      {4}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_TRUE(report.pass(1e-8)) << "max rel err " << report.max_rel_err;
}

TEST(GradCheck, QuadraticIsNearExact) {
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        return dndt::ad::sum(dndt::ad::mul(x, x));
      },
      {4}, {1.0, -2.0, 0.5, 3.0}, 1e-5);
  EXPECT_TRUE(report.pass(1e-7)) << "max rel err " << report.max_rel_err;
}

TEST(GradCheck, ReportsNonFiniteAsFailure) {
  auto report = dndt::ad::grad_check(
      [](Tape<double>& t, const Tensor<double>& x) {
        // log of a negative number -> NaN, must be reported not crash
        std::vector<double> bad = {std::log(-1.0)};
        auto c = t.constant({1}, bad);
        return dndt::ad::sum(dndt::ad::mul(x, c));
      },
      {1}, {1.0});
  EXPECT_FALSE(report.finite);
  EXPECT_FALSE(report.pass(1e-4));
}
