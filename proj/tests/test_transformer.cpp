#include <gtest/gtest.h>

#include <set>

#include "dpm/errors.hpp"
#include "dpm/gradcheck.hpp"
#include "dpm/ops.hpp"
#include "dpm/transformer.hpp"
#include "oracles.hpp"

using namespace dpm;

namespace {

void zero_convs(const std::vector<Parameter>& params) {
  for (auto p : params) {
    if (p.tensor.rank() != 4) continue;
    NoGradGuard no_grad;
    p.tensor.copy_from(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  }
}

}  // namespace

TEST(Mdta, ShapeAndAttentionRows) {
  Initializer init(1, DType::kFloat32);
  const MDTAParams p = MDTAParams::make(init, 8, 2);
  Tensor attn;
  const Tensor y = mdta_forward(oracle::tensor({1, 8, 16, 16}, 40, DType::kFloat32), p, &attn);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 16, 16}));
  ASSERT_EQ(attn.shape(), (Shape{1, 2, 4, 4}));
  const auto a = attn.to_vector();
  for (size_t row = 0; row < a.size() / 4; ++row) {
    double s = 0;
    for (size_t k = 0; k < 4; ++k) s += a[row * 4 + k];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Mdta, AlphaStartsAtOnePerHead) {
  Initializer init(2, DType::kFloat32);
  const MDTAParams p = MDTAParams::make(init, 16, 4);
  EXPECT_EQ(p.alpha.shape(), (Shape{4}));
  for (double v : p.alpha.to_vector()) EXPECT_EQ(v, 1.0);
}

TEST(Mdta, HeadsMustDivideChannels) {
  Initializer init(3, DType::kFloat32);
  EXPECT_THROW(MDTAParams::make(init, 6, 4), ConfigError);
}

TEST(Mdta, ZeroInputGivesZero) {
  Initializer init(4, DType::kFloat64);
  const MDTAParams p = MDTAParams::make(init, 8, 2);
  for (double v : mdta_forward(Tensor::zeros({1, 8, 6, 6}, DType::kFloat64), p).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Mdta, AnySpatialExtent) {
  Initializer init(5, DType::kFloat32);
  const MDTAParams p = MDTAParams::make(init, 8, 2);
  for (int64_t s : {8, 32, 7}) {
    Tensor attn;
    EXPECT_EQ(mdta_forward(Tensor::full({1, 8, s, s}, 0.5), p, &attn).shape(), (Shape{1, 8, s, s}));
    EXPECT_EQ(attn.shape(), (Shape{1, 2, 4, 4}));
  }
}

// Attention is between channels: nothing of size (H*W)^2 may be allocated.
TEST(Mdta, MemoryIsLinearInPixels) {
  Initializer init(6, DType::kFloat32);
  const MDTAParams p = MDTAParams::make(init, 8, 2);
  const Tensor x = oracle::tensor({1, 8, 32, 32}, 41, DType::kFloat32);
  debug::AllocationProbe probe;
  Tensor xr = x.clone();
  xr.set_requires_grad(true);
  sum(mdta_forward(xr, p)).backward();
  const int64_t pixels = 32 * 32;
  EXPECT_GT(probe.peak_numel(), 0);
  EXPECT_LE(probe.peak_numel(), 4 * 3 * 8 * pixels);
  EXPECT_LT(probe.peak_numel(), pixels * pixels / 8);
}

TEST(Gdfn, ShapeHiddenWidthAndZero) {
  EXPECT_EQ(gdfn_hidden_width(48, 2.66), 128);
  EXPECT_EQ(gdfn_hidden_width(16, 2.66), 43);
  Initializer init(7, DType::kFloat64);
  const GDFNParams p = GDFNParams::make(init, 8, 2.66);
  EXPECT_EQ(p.hidden, 21);
  EXPECT_EQ(p.expand_pointwise.weight.shape(), (Shape{42, 8, 1, 1}));
  EXPECT_EQ(gdfn_forward(oracle::tensor({1, 8, 16, 16}, 42), p).shape(), (Shape{1, 8, 16, 16}));
  for (double v : gdfn_forward(Tensor::zeros({1, 8, 5, 5}, DType::kFloat64), p).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Block, ShapePreserved) {
  Initializer init(8, DType::kFloat32);
  const TransformerBlock b = TransformerBlock::make(init, 16, 2, 2.66);
  EXPECT_EQ(block_forward(oracle::tensor({2, 16, 24, 24}, 43, DType::kFloat32), b).shape(), (Shape{2, 16, 24, 24}));
}

TEST(Block, ZeroConvWeightsGiveIdentity) {
  Initializer init(9, DType::kFloat32);
  const TransformerBlock b = TransformerBlock::make(init, 8, 2, 2.66);
  std::vector<Parameter> params;
  b.collect("b", params);
  zero_convs(params);
  const Tensor x = oracle::tensor({1, 8, 6, 10}, 44, DType::kFloat32);
  EXPECT_EQ(block_forward(x, b).to_vector(), x.to_vector());
}

TEST(Block, ParameterNamesAreUnique) {
  Initializer init(10, DType::kFloat32);
  const TransformerBlock b = TransformerBlock::make(init, 8, 2, 2.66);
  std::vector<Parameter> params;
  b.collect("blk", params);
  std::set<std::string> names;
  for (const auto& p : params) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_TRUE(names.count("blk.mdta.alpha"));
}

TEST(Gradcheck, MdtaSuitePasses) {
  const GradcheckSuite s = run_gradcheck_suite("mdta");
  for (const auto& c : s.cases) EXPECT_TRUE(c.passed()) << c.name << " rel err " << c.max_rel_err;
}

TEST(Gradcheck, GdfnSuitePasses) {
  const GradcheckSuite s = run_gradcheck_suite("gdfn");
  for (const auto& c : s.cases) EXPECT_TRUE(c.passed()) << c.name << " rel err " << c.max_rel_err;
}
