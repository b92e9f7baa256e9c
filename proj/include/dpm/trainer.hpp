#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpm/data.hpp"
#include "dpm/losses.hpp"
#include "dpm/model.hpp"

namespace dpm {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 2;
  int crop = 256;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-8;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  LossWeights loss;
  double branch_weight = 1.0;  // supervision weight of every branch output
  int eval_every = 1;          // epochs; 0 disables periodic evaluation
  int checkpoint_every = 0;    // epochs; 0 writes only the final checkpoint

  void validate() const;
};

struct OptimizerState {
  int64_t step = 0;
  std::vector<Tensor> m;  // aligned with DPMformer::parameters()
  std::vector<Tensor> v;
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
double cosine_lr(int64_t step, int64_t total_steps, double lr_max, double lr_min);

// One Adam update with bias correction and coupled L2 decay. Reads each
// parameter's .grad(); increments state.step.
void adam_step(const std::vector<Parameter>& params, OptimizerState& state, double lr, const TrainConfig& cfg);

// Random crop window for one sample: offsets are multiples of 16.
struct CropWindow {
  int64_t y = 0, x = 0;
};
CropWindow crop_window(uint64_t seed, int64_t step, int64_t sample, int64_t height, int64_t width, int64_t crop);

// Sample order for one epoch, a pure function of (seed, epoch).
std::vector<size_t> epoch_order(uint64_t seed, int64_t epoch, size_t count);

int64_t steps_per_epoch(size_t dataset_size, int batch_size);

struct StepRecord {
  int64_t step = 0;  // 1-based count of completed updates
  int64_t epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_char = 0, loss_edge = 0, loss_fft = 0;
};

struct EvalRecord {
  int64_t epoch = 0;
  int64_t step = 0;
  double psnr = 0;
  double ssim = 0;
};

struct TrainReport {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<std::filesystem::path> checkpoints;
};

struct EvalMetrics {
  double psnr = 0;
  double ssim = 0;
  std::vector<double> per_image_psnr, per_image_ssim;
};

// Inference on one (N,3,H,W) image of any extent: reflect-pads to a multiple
// of 16, runs the model without history, crops back and clips to [0, 1].
Tensor restore_image(const DPMformer& model, const Tensor& image);

// Mean Y-PSNR/SSIM of the clipped model output over full images.
EvalMetrics evaluate(const DPMformer& model, const Dataset& data);

struct TrainOptions {
  std::filesystem::path output_dir;  // empty: no log or checkpoints
  const Dataset* eval_data = nullptr;
  std::optional<OptimizerState> resume;  // continue from this optimizer state
  int64_t stop_after_step = -1;          // stop early (for resume tests); -1 runs to the end
  std::function<void(const StepRecord&)> on_step;
};

TrainReport train(DPMformer& model, const Dataset& data, const TrainConfig& cfg, TrainOptions options = {});

}  // namespace dpm
