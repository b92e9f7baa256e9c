#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "dpm/checkpoint.hpp"
#include "dpm/errors.hpp"
#include "dpm/ops.hpp"
#include "dpm/trainer.hpp"
#include "temp_dir.hpp"

using namespace dpm;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::slim();
  c.backbone.base_channels = 4;
  c.branch.base_channels = 4;
  return c;
}

Dataset pairs(int n, int64_t size = 32) {
  Dataset d;
  for (int i = 0; i < n; ++i) {
    RainParams p;
    p.seed = uint64_t(i);
    d.push_back(synthesize_rain(procedural_clean(uint64_t(100 + i), size, size), p, std::to_string(i)));
  }
  return d;
}

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 2;
  c.crop = 16;
  c.lr_max = 1e-3;
  c.eval_every = 0;
  return c;
}

std::vector<std::vector<double>> values(const DPMformer& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor.to_vector());
  return out;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 1000, 1e-4, 1e-6), 1e-4);
  EXPECT_EQ(cosine_lr(1000, 1000, 1e-4, 1e-6), 1e-6);
  EXPECT_NEAR(cosine_lr(500, 1000, 1e-4, 1e-6), 5.05e-5, 1e-18);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  double prev = cosine_lr(0, 97, 1e-4, 1e-6);
  for (int s = 1; s <= 97; ++s) {
    const double lr = cosine_lr(s, 97, 1e-4, 1e-6);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(CosineLr, OutOfRangeIsContractError) {
  EXPECT_THROW(cosine_lr(-1, 10, 1e-4, 1e-6), ContractError);
  EXPECT_THROW(cosine_lr(11, 10, 1e-4, 1e-6), ContractError);
  EXPECT_THROW(cosine_lr(0, 0, 1e-4, 1e-6), ContractError);
}

TEST(Adam, FirstStepIsUnitUpdate) {
  Tensor theta = Tensor::scalar(0.0, DType::kFloat64);
  theta.set_requires_grad(true);
  sum(theta).backward();
  OptimizerState state;
  adam_step({{"theta", theta}}, state, 0.1, TrainConfig{});
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(theta.item(), -0.1, 1e-8);
  EXPECT_EQ(state.step, 1);
  ASSERT_EQ(state.m.size(), 1u);
  EXPECT_EQ(state.m[0].shape(), theta.shape());
}

TEST(Adam, ZeroGradientsWithoutDecayAreIdentity) {
  Tensor w = Tensor::from_vector({2, 2}, {0.5, -1.0, 2.0, 0.0}, DType::kFloat32);
  w.set_requires_grad(true);
  sum(mul_scalar(w, 0.0)).backward();
  TrainConfig cfg;
  cfg.weight_decay = 0;
  OptimizerState state;
  const auto before = w.to_vector();
  for (int i = 0; i < 3; ++i) adam_step({{"w", w}}, state, 1e-2, cfg);
  EXPECT_EQ(w.to_vector(), before);
}

TEST(Adam, MissingGradientNamesParameter) {
  Tensor w = Tensor::zeros({3});
  w.set_requires_grad(true);
  OptimizerState state;
  try {
    adam_step({{"layer.weight", w}}, state, 1e-3, TrainConfig{});
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.crop = 40;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_min = 1e-3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Batching, CropWindowsAreAlignedAndInside) {
  for (int64_t step = 0; step < 50; ++step) {
    const CropWindow w = crop_window(7, step, step % 3, 80, 112, 32);
    EXPECT_EQ(w.y % 16, 0);
    EXPECT_EQ(w.x % 16, 0);
    EXPECT_LE(w.y + 32, 80);
    EXPECT_LE(w.x + 32, 112);
  }
}

TEST(Batching, EpochOrderIsSeededPermutation) {
  auto a = epoch_order(3, 5, 10);
  EXPECT_EQ(a, epoch_order(3, 5, 10));
  EXPECT_NE(a, epoch_order(3, 6, 10));
  std::sort(a.begin(), a.end());
  for (size_t i = 0; i < 10; ++i) EXPECT_EQ(a[i], i);
  EXPECT_EQ(steps_per_epoch(5, 2), 3);
}

TEST(Train, OneEpochTwoPairsBatchOneIsTwoSteps) {
  DPMformer m = DPMformer::make(tiny());
  TrainConfig c = quick(1);
  c.batch_size = 1;
  const TrainReport r = train(m, pairs(2), c);
  ASSERT_EQ(r.steps.size(), 2u);
  EXPECT_EQ(r.steps[0].step, 1);
  EXPECT_EQ(r.steps[0].lr, c.lr_max);
  EXPECT_TRUE(r.checkpoints.empty());
}

TEST(Train, CropLargerThanImageRejected) {
  DPMformer m = DPMformer::make(tiny());
  TrainConfig c = quick(1);
  c.crop = 48;
  EXPECT_THROW(train(m, pairs(1), c), ContractError);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostics) {
  DPMformer m = DPMformer::make(tiny());
  Dataset d = pairs(1, 16);
  d[0].rainy = Tensor::full(d[0].rainy.shape(), std::nan(""));
  try {
    train(m, d, quick(1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    for (const char* key : {"step 1", "lr", "charbonnier", "edge", "fft"}) EXPECT_NE(msg.find(key), std::string::npos);
  }
}

TEST(Train, SeededRunsAreBitIdentical) {
  DPMformer a = DPMformer::make(tiny()), b = DPMformer::make(tiny());
  const Dataset d = pairs(3);
  const TrainReport ra = train(a, d, quick(2)), rb = train(b, d, quick(2));
  EXPECT_EQ(values(a), values(b));
  EXPECT_EQ(ra.steps.back().loss_total, rb.steps.back().loss_total);
}

TEST(Train, WritesLogAndCheckpoints) {
  TempDir dir;
  DPMformer m = DPMformer::make(tiny());
  const Dataset d = pairs(2), held = pairs(1);
  TrainConfig c = quick(2);
  c.eval_every = 1;
  c.checkpoint_every = 1;
  TrainOptions o;
  o.output_dir = dir.path;
  o.eval_data = &held;
  const TrainReport r = train(m, d, c, o);
  EXPECT_EQ(r.evals.size(), 2u);
  ASSERT_EQ(r.checkpoints.size(), 3u);
  EXPECT_EQ(r.checkpoints.back().filename(), "final.ckpt");
  std::ifstream log(dir.path / "train_log.jsonl");
  std::string line;
  int lines = 0, with_eval = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "epoch", "lr", "loss_total", "loss_char", "loss_edge", "loss_fft"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    with_eval += j.contains("psnr") && j.contains("ssim");
    ++lines;
  }
  EXPECT_EQ(lines, 2);
  EXPECT_EQ(with_eval, 2);
}

TEST(Train, ResumeIsBitExact) {
  TempDir dir;
  const Dataset d = pairs(3);
  const TrainConfig c = quick(3);

  DPMformer full = DPMformer::make(tiny());
  const TrainReport uninterrupted = train(full, d, c);

  DPMformer first = DPMformer::make(tiny());
  TrainOptions stop;
  stop.output_dir = dir.path;
  stop.stop_after_step = 3;
  const TrainReport head = train(first, d, c, stop);
  ASSERT_EQ(head.steps.size(), 3u);
  ASSERT_EQ(head.checkpoints.back().filename(), "last.ckpt");

  const Checkpoint ck = read_checkpoint(head.checkpoints.back());
  DPMformer resumed = model_from_checkpoint(ck);
  TrainOptions cont;
  cont.resume = optimizer_state_from_checkpoint(ck, resumed);
  const TrainReport tail = train(resumed, d, c, cont);

  ASSERT_EQ(head.steps.size() + tail.steps.size(), uninterrupted.steps.size());
  EXPECT_EQ(tail.steps.front().step, 4);
  EXPECT_EQ(tail.steps.front().loss_total, uninterrupted.steps[3].loss_total);
  EXPECT_EQ(values(resumed), values(full));
}
