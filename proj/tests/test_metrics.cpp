#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace msbdn;
using msbdn::testing::random_tensor;

namespace {

/// Direct windowed SSIM: 2-D Gaussian weights, every statistic summed
/// explicitly per window position.
double ssim_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double wsum = 0;
  double w[11][11];
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double dy = y - 5, dx = x - 5;
      w[y][x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      wsum += w[y][x];
    }
  double total = 0;
  for (std::size_t n = 0; n < a.n(); ++n)
    for (std::size_t c = 0; c < a.c(); ++c) {
      double s = 0;
      std::size_t count = 0;
      for (std::size_t oy = 0; oy + k <= a.h(); ++oy)
        for (std::size_t ox = 0; ox + k <= a.w(); ++ox) {
          double mx = 0, my = 0;
          for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x) {
              mx += w[y][x] / wsum * a.at(n, c, oy + y, ox + x);
              my += w[y][x] / wsum * b.at(n, c, oy + y, ox + x);
            }
          double vx = 0, vy = 0, cov = 0;
          for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x) {
              const double da = a.at(n, c, oy + y, ox + x) - mx, db = b.at(n, c, oy + y, ox + x) - my;
              vx += w[y][x] / wsum * da * da;
              vy += w[y][x] / wsum * db * db;
              cov += w[y][x] / wsum * da * db;
            }
          s += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
      total += s / double(count);
    }
  return total / double(a.n() * a.c());
}

}  // namespace

// ---------------------------------------------------------------------------
// PSNR

TEST(Psnr, IdenticalImagesHitTheCap) {
  Rng rng(1);
  auto a = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  EXPECT_EQ(psnr(a, a), 99.0);
  EXPECT_EQ(kPsnrCap, 99.0);
}

TEST(Psnr, ZerosVersusOnesIsZeroDb) {
  EXPECT_EQ(psnr(Tensor<double>(Shape{1, 3, 4, 4}, 0.0), Tensor<double>(Shape{1, 3, 4, 4}, 1.0)), 0.0);
}

TEST(Psnr, MatchesScalarLoop) {
  Rng rng(2);
  auto a = random_tensor<float>(Shape{2, 3, 9, 7}, rng, 0.0, 1.0);
  auto b = random_tensor<float>(Shape{2, 3, 9, 7}, rng, 0.0, 1.0);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(1.0 / (s / double(a.size()))), 1e-6);
  EXPECT_NEAR(psnr(a, b, 2.0), 10 * std::log10(4.0 / (s / double(a.size()))), 1e-6);
}

TEST(Psnr, SymmetricAndShapeChecked) {
  Rng rng(3);
  auto a = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  auto b = random_tensor<double>(Shape{1, 3, 8, 8}, rng, 0.0, 1.0);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, Tensor<double>(Shape{1, 3, 8, 9})), std::invalid_argument);
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
  Rng rng(4);
  auto a = random_tensor<double>(Shape{1, 3, 32, 32}, rng, 0.2, 0.8);
  auto noise = random_tensor<double>(a.shape(), rng, -1.0, 1.0);
  double prev = kPsnrCap;
  for (double amp : {0.01, 0.05, 0.2}) {
    const double p = psnr(a, a + scaled(noise, amp));
    EXPECT_LT(p, prev) << amp;
    prev = p;
  }
}

TEST(Psnr, QuantizedModeClampsAndRounds) {
  Tensor<double> a(Shape{1, 1, 1, 2}, std::vector<double>{1.3, 0.5001});
  Tensor<double> b(Shape{1, 1, 1, 2}, std::vector<double>{1.0, 0.5});
  EXPECT_EQ(psnr_quantized(a, b), kPsnrCap);
  EXPECT_LT(psnr(a, b), 20.0);
  auto q = quantize8(a);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_DOUBLE_EQ(q[1] * 255, 128.0);
}

// ---------------------------------------------------------------------------
// SSIM

TEST(Ssim, IdentityIsOne) {
  Rng rng(5);
  for (int i = 0; i < 3; ++i) {
    auto a = random_tensor<double>(Shape{1, 3, 16, 13}, rng, 0.0, 1.0);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  }
}

TEST(Ssim, NegativeImageScoresLow) {
  // Checkerboard of 0.1 / 0.9: no mid-grey pixels.
  Tensor<double> a(Shape{1, 3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) a.at(0, c, y, x) = ((x / 2 + y / 2) % 2) ? 0.9 : 0.1;
  Tensor<double> neg(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = 1.0 - a[i];
  const double s = ssim(a, neg);
  EXPECT_LT(s, 0.5);
  EXPECT_NEAR(s, ssim_oracle(a, neg), 1e-9);
}

TEST(Ssim, MatchesWindowedOracle) {
  Rng rng(6);
  auto a = random_tensor<double>(Shape{2, 3, 14, 17}, rng, 0.0, 1.0);
  auto b = a + scaled(random_tensor<double>(a.shape(), rng, -0.2, 0.2), 1.0);
  EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-5);
  auto c = random_tensor<double>(a.shape(), rng, 0.0, 1.0);
  EXPECT_NEAR(ssim(a, c), ssim_oracle(a, c), 1e-5);
}

TEST(Ssim, SymmetricBoundedAndSizeChecked) {
  Rng rng(7);
  auto a = random_tensor<float>(Shape{1, 3, 12, 12}, rng, 0.0, 1.0);
  auto b = random_tensor<float>(Shape{1, 3, 12, 12}, rng, 0.0, 1.0);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_GE(ssim(a, b), -1.0);
  EXPECT_LE(ssim(a, b), 1.0);
  EXPECT_THROW(ssim(Tensor<float>(Shape{1, 3, 10, 12}), Tensor<float>(Shape{1, 3, 10, 12})), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// grad_check

TEST(GradCheck, QuadraticIsExact) {
  ParameterStore<double> st;
  st.add("w", ParamKind::conv_weight, Shape{1, 1, 1, 1}).value[0] = 3.0;
  auto r = grad_check<double>(
      st, [&] { return st.at("w").value[0] * st.at("w").value[0]; }, [&] { st.at("w").grad[0] = 6.0; }, 1e-3);
  EXPECT_LT(r.max_rel_error, 1e-7);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_EQ(r.worst_param, "w");
}

TEST(GradCheck, ConvLayerWithMse) {
  Rng rng(8);
  ParameterStore<double> st;
  st.add("w", ParamKind::conv_weight, Shape{3, 2, 3, 3}).value = random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  st.add("b", ParamKind::bias, Shape{1, 3, 1, 1}).value = random_tensor<double>(Shape{1, 3, 1, 1}, rng);
  auto x = Var<double>::constant(random_tensor<double>(Shape{1, 2, 6, 6}, rng));
  auto target = Var<double>::constant(random_tensor<double>(Shape{1, 3, 6, 6}, rng));
  auto r = grad_check<double>(
      st, [&] { return ops::mse_loss(ops::conv2d(x, st.var("w"), st.var("b"), 1, 1), target); }, 1e-3);
  EXPECT_LT(r.max_rel_error, 1e-3);
  EXPECT_EQ(r.checked, 57u);
}

TEST(GradCheck, DetectsPlantedFault) {
  Rng rng(9);
  ParameterStore<double> st;
  st.add("w", ParamKind::conv_weight, Shape{2, 2, 3, 3}).value = random_tensor<double>(Shape{2, 2, 3, 3}, rng);
  auto x = Var<double>::constant(random_tensor<double>(Shape{1, 2, 5, 5}, rng));
  auto target = Var<double>::constant(random_tensor<double>(Shape{1, 2, 5, 5}, rng));
  Tensor<double> none;
  auto loss = [&] { return ops::mse_loss(ops::conv2d(x, st.var("w"), Var<double>::constant(none), 1, 1), target); };
  auto r = grad_check<double>(
      st, [&] { return double(loss().value()[0]); },
      [&] {
        backward(loss());
        for (auto& g : st.at("w").grad.values()) g *= 2;  // planted fault
      },
      1e-4);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-3);
}

TEST(GradCheck, ReportsNonFiniteLocation) {
  ParameterStore<double> st;
  st.add("a", ParamKind::conv_weight, Shape{1, 1, 1, 2});
  st.add("b", ParamKind::conv_weight, Shape{1, 1, 1, 3});
  auto r = grad_check<double>(
      st,
      [&] {
        const double v = st.at("b").value[1];
        return v != 0.0 ? std::nan("") : 0.0;
      },
      [] {}, 1e-3);
  EXPECT_FALSE(r.finite);
  EXPECT_EQ(r.nonfinite_at, "b[1]");
  EXPECT_THROW(grad_check<double>(st, [] { return 0.0; }, [] {}, 0.0), std::invalid_argument);
}
