#include <gtest/gtest.h>

#include "dpm/errors.hpp"
#include "dpm/image_ops.hpp"
#include "dpm/ops.hpp"
#include "oracles.hpp"

using namespace dpm;

namespace {
constexpr DType f64 = DType::kFloat64;

Tensor ramp(int64_t h, int64_t w, double a, double b, double c) {
  std::vector<double> v;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) v.push_back(a + b * double(y) + c * double(x));
  return Tensor::from_vector({1, 1, h, w}, v, f64);
}
}  // namespace

TEST(GaussianDownsample, PreservesConstant) {
  const Tensor y = gaussian_downsample(Tensor::full({1, 3, 64, 64}, 0.37, f64));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 32, 32}));
  for (double v : y.to_vector()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(GaussianDownsample, MatchesWeightedSum) {
  const Tensor x = oracle::tensor({1, 1, 8, 8}, 30, f64, 0, 1);
  const auto ref = oracle::gaussian_downsample(x.to_vector(), 8, 8);
  const auto got = gaussian_downsample(x).to_vector();
  ASSERT_EQ(got.size(), ref.size());
  for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-6);
}

TEST(GaussianDownsample, MeanOfRandomImageWithinTwoPercent) {
  const Tensor x = oracle::tensor({1, 3, 32, 32}, 31, f64, 0, 1);
  EXPECT_NEAR(mean(gaussian_downsample(x)).item() / mean(x).item(), 1.0, 0.02);
}

TEST(GaussianDownsample, OddExtentIsShapeError) {
  EXPECT_THROW(gaussian_downsample(Tensor::zeros({1, 3, 9, 8})), ShapeError);
}

TEST(GaussianPyramid, LevelsHalveAndComposeBitwise) {
  const Tensor x = oracle::tensor({1, 3, 32, 48}, 32, DType::kFloat32, 0, 1);
  const Pyramid p = gaussian_pyramid(x, 3);
  ASSERT_EQ(p.levels.size(), 3u);
  EXPECT_EQ(p.levels[1].shape(), (Shape{1, 3, 16, 24}));
  EXPECT_EQ(p.levels[2].shape(), (Shape{1, 3, 8, 12}));
  EXPECT_EQ(p.levels[1].to_vector(), gaussian_downsample(x).to_vector());
  EXPECT_EQ(p.levels[2].to_vector(), gaussian_downsample(gaussian_downsample(x)).to_vector());
}

TEST(UpsampleBilinear, ConstantAndShape) {
  const Tensor y = upsample_bilinear(Tensor::full({1, 3, 16, 16}, 0.25, f64), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 32, 32}));
  for (double v : y.to_vector()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(UpsampleBilinear, RampStaysLinearInInterior) {
  // Pixel centers of the output sit at (i + 0.5) / 2 - 0.5 in input coordinates.
  const Tensor y = upsample_bilinear(ramp(8, 8, 0.1, 0.3, -0.2), 2);
  const auto v = y.to_vector();
  for (int i = 1; i < 15; ++i)
    for (int j = 1; j < 15; ++j) {
      const double sy = (i + 0.5) / 2 - 0.5, sx = (j + 0.5) / 2 - 0.5;
      EXPECT_NEAR(v[size_t(i * 16 + j)], 0.1 + 0.3 * sy - 0.2 * sx, 1e-5);
    }
}

TEST(Laplacian, ConstantAndAffineVanish) {
  for (double v : laplacian(Tensor::full({1, 2, 6, 6}, 3.0, f64)).to_vector()) EXPECT_EQ(v, 0.0);
  const auto v = laplacian(ramp(9, 7, 0.5, 0.25, -0.75)).to_vector();
  for (int y = 1; y < 8; ++y)
    for (int x = 1; x < 6; ++x) EXPECT_NEAR(v[size_t(y * 7 + x)], 0.0, 1e-5);
}

TEST(Laplacian, ImpulseStampsKernel) {
  std::vector<double> x(49, 0.0);
  x[3 * 7 + 3] = 1.0;
  const auto v = laplacian(Tensor::from_vector({1, 1, 7, 7}, x, f64)).to_vector();
  for (int y = 0; y < 7; ++y)
    for (int c = 0; c < 7; ++c) {
      double expected = 0;
      if (y == 3 && c == 3) expected = -4;
      if (std::abs(y - 3) + std::abs(c - 3) == 1) expected = 1;
      EXPECT_EQ(v[size_t(y * 7 + c)], expected) << y << "," << c;
    }
}

TEST(Patches, SplitShapes) {
  const Tensor x = Tensor::zeros({1, 3, 64, 64});
  const PatchGrid g4 = split_patches(x, 2, 2);
  ASSERT_EQ(g4.patches.size(), 4u);
  for (const auto& p : g4.patches) EXPECT_EQ(p.shape(), (Shape{1, 3, 32, 32}));
  const PatchGrid g2 = split_patches(x, 2, 1);
  ASSERT_EQ(g2.patches.size(), 2u);
  for (const auto& p : g2.patches) EXPECT_EQ(p.shape(), (Shape{1, 3, 32, 64}));
  EXPECT_THROW(split_patches(Tensor::zeros({1, 3, 63, 64}), 2, 2), ShapeError);
}

TEST(Patches, RoundTripIsExact) {
  const Tensor x = oracle::tensor({2, 3, 16, 24}, 33, DType::kFloat32);
  for (auto [r, c] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 2}, std::pair{2, 2}}) {
    EXPECT_EQ(merge_patches(split_patches(x, r, c)).to_vector(), x.to_vector()) << r << "x" << c;
  }
}

TEST(Patches, RowMajorOrder) {
  const Tensor x = oracle::tensor({1, 1, 4, 4}, 34, f64);
  const PatchGrid g = split_patches(x, 2, 2);
  EXPECT_EQ(g.patches[1].to_vector(), slice(slice(x, 2, 0, 2), 3, 2, 2).to_vector());
  EXPECT_EQ(g.patches[2].to_vector(), slice(slice(x, 2, 2, 2), 3, 0, 2).to_vector());
}

TEST(Patches, MergeTwoStackedHalves) {
  PatchGrid g;
  g.rows = 2;
  g.cols = 1;
  g.patches = {Tensor::zeros({1, 3, 32, 64}), Tensor::full({1, 3, 32, 64}, 1.0)};
  EXPECT_EQ(merge_patches(g).shape(), (Shape{1, 3, 64, 64}));
  g.patches[1] = Tensor::zeros({1, 3, 32, 32});
  EXPECT_THROW(merge_patches(g), ShapeError);
}

TEST(Patches, SideBySidePairHasLevelTwoExtent) {
  const Tensor joined = concat({Tensor::zeros({1, 8, 32, 32}), Tensor::zeros({1, 8, 32, 32})}, 3);
  EXPECT_EQ(joined.shape(), (Shape{1, 8, 32, 64}));
}

TEST(RgbToY, Endpoints) {
  EXPECT_NEAR(rgb_to_y(Tensor::zeros({1, 3, 1, 1}, f64)).item(), 16.0 / 255, 1e-6);
  EXPECT_NEAR(rgb_to_y(Tensor::full({1, 3, 1, 1}, 1.0, f64)).item(), 235.0 / 255, 1e-6);
  EXPECT_NEAR(rgb_to_y(Tensor::full({1, 3, 1, 1}, 0.5, f64)).item(), (219 * 0.5 + 16) / 255, 1e-6);
  EXPECT_THROW(rgb_to_y(Tensor::zeros({1, 4, 2, 2})), ShapeError);
}

TEST(RgbToY, MonotoneAndInRange) {
  const Tensor x = oracle::tensor({1, 3, 8, 8}, 35, f64, 0, 1);
  const auto y0 = rgb_to_y(x).to_vector();
  for (double v : y0) {
    EXPECT_GE(v, 16.0 / 255 - 1e-12);
    EXPECT_LE(v, 235.0 / 255 + 1e-12);
  }
  for (int c = 0; c < 3; ++c) {
    std::vector<double> bumped = x.to_vector();
    for (int i = 0; i < 64; ++i) bumped[size_t(c * 64 + i)] += 0.01;
    const auto y1 = rgb_to_y(Tensor::from_vector(x.shape(), bumped, f64)).to_vector();
    for (size_t i = 0; i < y0.size(); ++i) EXPECT_GT(y1[i], y0[i]);
  }
}

TEST(RgbToY, FullSwingConvention) {
  const Tensor white = Tensor::full({1, 3, 1, 1}, 1.0, f64);
  EXPECT_NEAR(rgb_to_y(white, LumaConvention::kFullSwing).item(), 1.0, 1e-12);
}
