#include <gtest/gtest.h>

#include <cmath>

#include "dpm/errors.hpp"
#include "dpm/gradcheck.hpp"
#include "dpm/losses.hpp"
#include "dpm/ops.hpp"
#include "oracles.hpp"

using namespace dpm;

namespace {

constexpr DType f64 = DType::kFloat64;

SupervisionSet single(const Tensor& pred, const Tensor& target) { return {{{"p", pred, target, 1.0}}}; }

// Circular shift of the last two axes.
Tensor roll(const Tensor& x, int64_t dy, int64_t dx) {
  const int64_t h = x.dim(2), w = x.dim(3);
  const Tensor rows = dy ? concat({slice(x, 2, h - dy, dy), slice(x, 2, 0, h - dy)}, 2) : x;
  return dx ? concat({slice(rows, 3, w - dx, dx), slice(rows, 3, 0, w - dx)}, 3) : rows;
}

}  // namespace

TEST(Charbonnier, EqualInputsGiveEpsilon) {
  for (const Shape& s : {Shape{2, 3, 4, 4}, Shape{2, 3, 16, 16}, Shape{4, 3, 64, 64}, Shape{1, 3, 33, 17}}) {
    const Tensor x = oracle::tensor(s, 70, f64);
    EXPECT_EQ(charbonnier(x, x, 1e-3).item(), 1e-3) << shape_str(s);
    const Tensor xf = x.to(DType::kFloat32);
    EXPECT_EQ(charbonnier(xf, xf, 1e-3).item(), double(1e-3f)) << shape_str(s);
  }
}

TEST(Charbonnier, UniformDifference) {
  const Tensor a = Tensor::full({1, 1, 4, 4}, 0.5, f64);
  const Tensor b = Tensor::full({1, 1, 4, 4}, 0.5 + 3e-3, f64);
  EXPECT_NEAR(charbonnier(a, b, 1e-3).item(), std::sqrt(1e-5), 1e-12);
  EXPECT_NEAR(charbonnier(a, b, 1e-3).item(), 3.16228e-3, 1e-8);
}

TEST(Charbonnier, ZeroGradientAtZeroDifference) {
  Tensor x = oracle::tensor({1, 1, 3, 3}, 71, f64);
  x.set_requires_grad(true);
  const Tensor t = x.detach();
  charbonnier(x, t, 1e-3).backward();
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 0.0);
}

TEST(Charbonnier, SymmetricAndBounded) {
  const Tensor a = oracle::tensor({1, 3, 5, 5}, 72, f64), b = oracle::tensor({1, 3, 5, 5}, 73, f64);
  EXPECT_DOUBLE_EQ(charbonnier(a, b, 1e-3).item(), charbonnier(b, a, 1e-3).item());
  EXPECT_GE(charbonnier(a, b, 1e-3).item(), 1e-3);
  EXPECT_THROW(charbonnier(a, Tensor::zeros({1, 3, 5, 4}, f64), 1e-3), ContractError);
}

TEST(EdgeLoss, EqualAndConstantInputsGiveEpsilon) {
  const Tensor x = oracle::tensor({1, 3, 6, 6}, 74, f64);
  EXPECT_NEAR(edge_loss(x, x, 1e-3).item(), 1e-3, 1e-15);
  EXPECT_NEAR(edge_loss(Tensor::full({1, 3, 6, 6}, 0.2, f64), Tensor::full({1, 3, 6, 6}, 0.9, f64), 1e-3).item(),
              1e-3, 1e-15);
  EXPECT_THROW(edge_loss(x, Tensor::zeros({1, 3, 6, 5}, f64), 1e-3), ContractError);
}

TEST(EdgeLoss, InteriorImpulseMatchesStampedKernel) {
  const double d = 0.3, eps = 1e-3;
  const Tensor target = Tensor::zeros({1, 1, 8, 8}, f64);
  std::vector<double> p(64, 0.0);
  p[3 * 8 + 4] = d;
  const Tensor pred = Tensor::from_vector({1, 1, 8, 8}, p, f64);
  // The Laplacian of the difference is -4d at the impulse and d at its four neighbours.
  const double expected =
      (std::sqrt(16 * d * d + eps * eps) + 4 * std::sqrt(d * d + eps * eps) + 59 * eps) / 64.0;
  EXPECT_NEAR(edge_loss(pred, target, eps).item(), expected, 1e-6);
}

TEST(FftLoss, IdenticalPairsGiveZero) {
  const Tensor x = oracle::tensor({1, 3, 8, 8}, 75, f64);
  EXPECT_EQ(fft_loss(single(x, x)).item(), 0.0);
}

TEST(FftLoss, DcOnlyDifference) {
  const double c = 0.4;
  const Tensor t = oracle::tensor({1, 1, 4, 6}, 76, f64);
  const Tensor p = add_scalar(t, c);
  EXPECT_NEAR(fft_loss(single(p, t)).item(), c / 2, 1e-12);
  EXPECT_NEAR(fft_loss(single(t, p)).item(), c / 2, 1e-12);
}

TEST(FftLoss, MatchesBruteForceDft) {
  const Tensor p = oracle::tensor({1, 2, 4, 4}, 77, f64), t = oracle::tensor({1, 2, 4, 4}, 78, f64);
  const Tensor p2 = oracle::tensor({1, 1, 4, 4}, 79, f64), t2 = oracle::tensor({1, 1, 4, 4}, 80, f64);
  SupervisionSet s = {{{"a", p, t, 1.0}, {"b", p2, t2, 0.5}}};
  auto l1 = [](const Tensor& a, const Tensor& b, int channels) {
    const auto av = a.to_vector(), bv = b.to_vector();
    double total = 0;
    for (int c = 0; c < channels; ++c) {
      std::vector<double> diff(16);
      for (int i = 0; i < 16; ++i) diff[size_t(i)] = av[size_t(c * 16 + i)] - bv[size_t(c * 16 + i)];
      const auto f = oracle::dft(diff, 4, 4);
      for (int i = 0; i < 16; ++i) total += std::abs(f.re[size_t(i)]) + std::abs(f.im[size_t(i)]);
    }
    return total / (2.0 * 16 * channels);
  };
  EXPECT_NEAR(fft_loss(s).item(), l1(p, t, 2) + 0.5 * l1(p2, t2, 1), 1e-6);
}

// |Re| + |Im| of the difference spectrum survives a joint circular shift when
// the phase factor is a power of i, i.e. for shifts by multiples of a quarter
// period. Arbitrary shifts rotate the phase and change the L1 sum.
TEST(FftLoss, InvariantUnderQuarterPeriodJointShift) {
  const Tensor p = oracle::tensor({1, 2, 8, 8}, 81, f64), t = oracle::tensor({1, 2, 8, 8}, 82, f64);
  const double base = fft_loss(single(p, t)).item();
  for (auto [dy, dx] : {std::pair{2, 0}, std::pair{0, 4}, std::pair{6, 2}}) {
    EXPECT_NEAR(fft_loss(single(roll(p, dy, dx), roll(t, dy, dx))).item(), base, 1e-12) << dy << "," << dx;
  }
  EXPECT_GT(std::abs(fft_loss(single(roll(p, 0, 1), roll(t, 0, 1))).item() - base), 1e-6);
}

TEST(FftLoss, SymmetricAndNonNegative) {
  const Tensor a = oracle::tensor({1, 3, 4, 8}, 83, f64), b = oracle::tensor({1, 3, 4, 8}, 84, f64);
  EXPECT_NEAR(fft_loss(single(a, b)).item(), fft_loss(single(b, a)).item(), 1e-14);
  EXPECT_GE(fft_loss(single(a, b)).item(), 0.0);
}

TEST(TotalLoss, DefaultWeights) {
  const LossWeights w;
  EXPECT_EQ(w.lambda1, 1.0);
  EXPECT_EQ(w.lambda2, 0.05);
  EXPECT_EQ(w.lambda3, 0.01);
  EXPECT_EQ(w.epsilon, 1e-3);
}

TEST(TotalLoss, PerfectPredictionsHitTheCharbonnierFloor) {
  SupervisionSet s;
  for (int k = 0; k < 3; ++k) {
    const Tensor x = oracle::tensor({1, 3, 8, 8}, 85 + uint64_t(k), f64);
    s.pairs.push_back({"k" + std::to_string(k), x, x, 1.0});
  }
  const LossWeights w;
  EXPECT_NEAR(total_loss(s, w).total.item(), w.lambda1 * 3 * 1e-3 + w.lambda2 * 3 * 1e-3, 1e-15);
}

TEST(TotalLoss, PureCharbonnierWhenOtherWeightsVanish) {
  const Tensor a = oracle::tensor({1, 3, 8, 8}, 88, f64), b = oracle::tensor({1, 3, 8, 8}, 89, f64);
  LossWeights w;
  w.lambda2 = 0;
  w.lambda3 = 0;
  EXPECT_NEAR(total_loss(single(a, b), w).total.item(), charbonnier(a, b, 1e-3).item(), 1e-15);
}

TEST(TotalLoss, NonNegativeOnRandomInputs) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor a = oracle::tensor({1, 3, 8, 8}, 90 + seed, f64, -3, 3);
    const Tensor b = oracle::tensor({1, 3, 8, 8}, 100 + seed, f64, -3, 3);
    EXPECT_GE(total_loss(single(a, b), LossWeights{}).total.item(), 0.0);
  }
}

TEST(TotalLoss, InvalidWeightsRejected) {
  LossWeights w;
  w.epsilon = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.lambda2 = -1;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(Gradcheck, LossesSuitePasses) {
  const GradcheckSuite s = run_gradcheck_suite("losses");
  for (const auto& c : s.cases) EXPECT_TRUE(c.passed()) << c.name << " rel err " << c.max_rel_err;
  EXPECT_LT(s.max_rel_err(), kOpTolerance);
}
