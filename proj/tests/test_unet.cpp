#include <gtest/gtest.h>

#include "dpm/errors.hpp"
#include "dpm/gradcheck.hpp"
#include "dpm/model.hpp"
#include "dpm/ops.hpp"
#include "dpm/unet.hpp"
#include "oracles.hpp"

using namespace dpm;

namespace count {

// Closed-form parameter counts, written from the layer list alone.
int64_t block(int64_t c, int64_t heads, double gamma) {
  const int64_t h = std::llround(gamma * double(c));
  const int64_t norms = 2 * c;
  const int64_t mdta = 3 * c * c + 3 * c * 9 + heads + c * c;
  const int64_t gdfn = 2 * h * c + 2 * h * 9 + h * c;
  return norms + mdta + gdfn;
}

int64_t unet(const UNetConfig& u) {
  const int64_t c = u.base_channels;
  const auto& nb = u.blocks_per_level;
  const auto& nh = u.heads_per_level;
  const double g = u.gdfn_gamma;
  int64_t n = nb[0] * block(c, nh[0], g) + c * (c / 2) * 9;           // enc1, down1
  n += nb[1] * block(2 * c, nh[1], g) + 2 * c * c * 9;                 // enc2, down2
  n += nb[2] * block(4 * c, nh[2], g) + 4 * c * 8 * c * 9;             // latent, up3
  n += 4 * c * 2 * c + nb[1] * block(2 * c, nh[1], g) + 2 * c * 4 * c * 9;  // reduce2, dec2, up2
  if (u.final_width == FinalWidth::kC) n += 2 * c * c;
  n += nb[0] * block(u.out_channels(), nh[0], g);
  return n;
}

int64_t restorer(const UNetConfig& u) { return 3 * u.base_channels * 9 + unet(u) + u.out_channels() * 3 * 9; }

int64_t model(const ModelConfig& m) {
  int64_t n = restorer(m.backbone);
  const UNetConfig& b = m.branch;
  if (m.enable_multipatch) {
    const int64_t encoder = 3 * b.base_channels * 9 + unet(b);
    n += 2 * encoder + 2 * b.out_channels() * 3 * 9 + (b.base_channels + b.out_channels()) * b.base_channels;
  }
  if (m.enable_coarse2fine) n += 2 * restorer(b);
  return n;
}

}  // namespace count

TEST(Resample, DownsampleShapes) {
  Initializer init(1, DType::kFloat32);
  EXPECT_EQ(downsample(Tensor::zeros({1, 48, 64, 64}), Downsample::make(init, 48)).shape(), (Shape{1, 96, 32, 32}));
  EXPECT_EQ(downsample(Tensor::zeros({1, 4, 2, 2}), Downsample::make(init, 4)).shape(), (Shape{1, 8, 1, 1}));
  EXPECT_THROW(downsample(Tensor::zeros({1, 4, 3, 2}), Downsample::make(init, 4)), ShapeError);
}

TEST(Resample, UpsampleShapes) {
  Initializer init(2, DType::kFloat32);
  EXPECT_EQ(upsample(Tensor::zeros({1, 192, 16, 16}), Upsample::make(init, 192)).shape(), (Shape{1, 96, 32, 32}));
  EXPECT_EQ(upsample(Tensor::zeros({1, 8, 1, 1}), Upsample::make(init, 8)).shape(), (Shape{1, 4, 2, 2}));
}

TEST(Resample, GradientsMatchFiniteDifferences) {
  Initializer init(3, DType::kFloat64);
  const Downsample d = Downsample::make(init, 4);
  const Upsample u = Upsample::make(init, 8);
  Tensor x = oracle::tensor({1, 4, 4, 4}, 50), z = oracle::tensor({1, 8, 2, 2}, 51);
  x.set_requires_grad(true);
  z.set_requires_grad(true);
  const Tensor r1 = oracle::tensor({1, 8, 2, 2}, 52), r2 = oracle::tensor({1, 4, 4, 4}, 53);
  EXPECT_LT(max_gradient_error([&] { return sum(mul(downsample(x, d), r1)); }, {x, d.conv.weight}), kOpTolerance);
  EXPECT_LT(max_gradient_error([&] { return sum(mul(upsample(z, u), r2)); }, {z, u.conv.weight}), kOpTolerance);
}

TEST(UNet, DefaultConfigShapesAndLadder) {
  Initializer init(4, DType::kFloat32);
  const UNet u = UNet::make(init, UNetConfig{});
  UNetTrace trace;
  const Tensor y = unet_forward(Tensor::full({1, 48, 64, 64}, 0.1f), u, &trace);
  EXPECT_EQ(y.shape(), (Shape{1, 48, 64, 64}));
  const std::vector<Shape> expected = {
      {1, 48, 64, 64}, {1, 96, 32, 32}, {1, 192, 16, 16}, {1, 96, 32, 32}, {1, 48, 64, 64}};
  EXPECT_EQ(trace.stages, expected);
}

TEST(UNet, ResolutionRoundTrip) {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.blocks_per_level = {1, 1, 1};
  Initializer init(5, DType::kFloat32);
  const UNet u = UNet::make(init, cfg);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{12, 20}, std::pair{4, 16}}) {
    EXPECT_EQ(unet_forward(Tensor::zeros({2, 4, h, w}), u).shape(), (Shape{2, 4, h, w}));
  }
  EXPECT_THROW(unet_forward(Tensor::zeros({1, 4, 6, 8}), u), ShapeError);
}

TEST(UNet, TwiceCFinalWidth) {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.blocks_per_level = {1, 1, 1};
  cfg.final_width = FinalWidth::kTwiceC;
  Initializer init(6, DType::kFloat32);
  const UNet u = UNet::make(init, cfg);
  UNetTrace trace;
  EXPECT_EQ(unet_forward(Tensor::zeros({1, 4, 8, 8}), u, &trace).shape(), (Shape{1, 8, 8, 8}));
  EXPECT_FALSE(u.reduce1.weight.defined());
}

TEST(UNet, ConfigValidation) {
  UNetConfig cfg;
  cfg.heads_per_level = {1, 5, 4};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = UNetConfig{};
  cfg.base_channels = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ParameterCount, SingleConv) {
  Initializer init(7, DType::kFloat32);
  std::vector<Parameter> p;
  Conv2d::make(init, 3, 48, 3).collect("c", p);
  EXPECT_EQ(count_parameters(p), 1296);
}

TEST(ParameterCount, MatchesClosedForm) {
  for (FinalWidth fw : {FinalWidth::kC, FinalWidth::kTwiceC}) {
    UNetConfig cfg;
    cfg.final_width = fw;
    Initializer init(8, DType::kFloat32);
    EXPECT_EQ(parameter_count(UNet::make(init, cfg)), count::unet(cfg));
  }
  for (ModelConfig m : {ModelConfig::slim(), ModelConfig::full()}) {
    for (auto [mp, c2f] : {std::pair{true, true}, std::pair{true, false}, std::pair{false, true}, std::pair{false, false}}) {
      m.enable_multipatch = mp;
      m.enable_coarse2fine = c2f;
      EXPECT_EQ(parameter_count(DPMformer::make(m)), count::model(m));
    }
  }
}

TEST(ParameterCount, FrozenTotals) {
  EXPECT_EQ(parameter_count(DPMformer::make(ModelConfig::full())), 12085288);
  EXPECT_EQ(parameter_count(DPMformer::make(ModelConfig::slim())), 967382);
}

TEST(ParameterCount, MoreBlocksMoreParameters) {
  UNetConfig a;
  UNetConfig b;
  b.blocks_per_level = {4, 4, 4};
  EXPECT_GT(count::unet(b), count::unet(a));
  Initializer i1(9, DType::kFloat32), i2(9, DType::kFloat32);
  EXPECT_GT(parameter_count(UNet::make(i2, b)), parameter_count(UNet::make(i1, a)));
}

TEST(Gradcheck, UnetSuitePasses) {
  const GradcheckSuite s = run_gradcheck_suite("unet");
  for (const auto& c : s.cases) EXPECT_TRUE(c.passed()) << c.name << " rel err " << c.max_rel_err;
}
