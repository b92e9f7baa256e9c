#include "dpm/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dpm/checkpoint.hpp"
#include "dpm/errors.hpp"
#include "dpm/metrics.hpp"
#include "dpm/ops.hpp"

namespace dpm {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs < 1) problems.push_back("epochs must be >= 1");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (crop < 16 || crop % 16 != 0) problems.push_back("crop must be a positive multiple of 16");
  if (!(lr_max > 0)) problems.push_back("lr_max must be > 0");
  if (!(lr_min >= 0 && lr_min <= lr_max)) problems.push_back("lr_min must be in [0, lr_max]");
  if (!(beta1 >= 0 && beta1 < 1)) problems.push_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) problems.push_back("beta2 must be in [0, 1)");
  if (!(weight_decay >= 0)) problems.push_back("weight_decay must be >= 0");
  if (!(adam_eps > 0)) problems.push_back("adam_eps must be > 0");
  if (!(branch_weight >= 0)) problems.push_back("branch_weight must be >= 0");
  if (eval_every < 0) problems.push_back("eval_every must be >= 0");
  if (checkpoint_every < 0) problems.push_back("checkpoint_every must be >= 0");
  try {
    loss.validate();
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

double cosine_lr(int64_t step, int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                        "]");
  }
  if (step == 0) return lr_max;
  if (step == total_steps) return lr_min;
  const double phase = std::numbers::pi * double(step) / double(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

void adam_step(const std::vector<Parameter>& params, OptimizerState& state, double lr, const TrainConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor.grad().defined()) throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
      state.v.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor theta = params[i].tensor;
    const Tensor g = theta.grad();
    dispatch(theta.dtype(), [&]<class T>() {
      auto w = theta.mutable_data<T>();
      auto gd = g.data<T>();
      auto m = state.m[i].mutable_data<T>();
      auto v = state.v[i].mutable_data<T>();
      for (size_t k = 0; k < w.size(); ++k) {
        const double gk = double(gd[k]) + cfg.weight_decay * double(w[k]);
        const double mk = cfg.beta1 * double(m[k]) + (1.0 - cfg.beta1) * gk;
        const double vk = cfg.beta2 * double(v[k]) + (1.0 - cfg.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        w[k] = static_cast<T>(double(w[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps));
      }
    });
  }
}

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t tag) {
  return splitmix(splitmix(splitmix(seed ^ tag) ^ a) ^ b);
}

Tensor crop_image(const Tensor& img, const CropWindow& w, int64_t crop) {
  return slice(slice(img, 2, w.y, crop), 3, w.x, crop);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

json step_json(const StepRecord& r) {
  return {{"step", r.step},           {"epoch", r.epoch},          {"lr", r.lr},
          {"loss_total", r.loss_total}, {"loss_char", r.loss_char}, {"loss_edge", r.loss_edge},
          {"loss_fft", r.loss_fft}};
}

}  // namespace

CropWindow crop_window(uint64_t seed, int64_t step, int64_t sample, int64_t height, int64_t width, int64_t crop) {
  if (crop > height || crop > width) {
    throw ContractError("crop " + std::to_string(crop) + " exceeds image extent " + std::to_string(height) + "x" +
                        std::to_string(width));
  }
  Rng rng(derive_seed(seed, uint64_t(step), uint64_t(sample), 0x63726f70ULL));
  CropWindow w;
  w.y = 16 * int64_t(rng.below(uint64_t((height - crop) / 16 + 1)));
  w.x = 16 * int64_t(rng.below(uint64_t((width - crop) / 16 + 1)));
  return w;
}

std::vector<size_t> epoch_order(uint64_t seed, int64_t epoch, size_t count) {
  std::vector<size_t> order(count);
  for (size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(derive_seed(seed, uint64_t(epoch), 0, 0x73687566ULL));
  for (size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

int64_t steps_per_epoch(size_t dataset_size, int batch_size) {
  return (int64_t(dataset_size) + batch_size - 1) / batch_size;
}

Tensor restore_image(const DPMformer& model, const Tensor& image) {
  NoGradGuard no_grad;
  const int64_t h = image.dim(2), w = image.dim(3);
  const int64_t ph = (16 - h % 16) % 16, pw = (16 - w % 16) % 16;
  Tensor x = image.to(model.dtype);
  if (ph || pw) {
    const int pad = int(std::max(ph, pw));
    x = slice(slice(pad_reflect(x, pad), 2, pad, h + ph), 3, pad, w + pw);
  }
  Tensor y = forward(x, model).derained;
  if (ph || pw) y = slice(slice(y, 2, 0, h), 3, 0, w);
  return clamp(y, 0.0, 1.0);
}

EvalMetrics evaluate(const DPMformer& model, const Dataset& data) {
  EvalMetrics out;
  for (const auto& pair : data) {
    const Tensor pred = restore_image(model, pair.rainy);
    out.per_image_psnr.push_back(psnr_y(pred, pair.clean.to(pred.dtype())));
    out.per_image_ssim.push_back(ssim_y(pred, pair.clean.to(pred.dtype())));
  }
  for (double v : out.per_image_psnr) out.psnr += v / double(data.size());
  for (double v : out.per_image_ssim) out.ssim += v / double(data.size());
  return out;
}

TrainReport train(DPMformer& model, const Dataset& data, const TrainConfig& cfg, TrainOptions options) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: empty dataset");
  for (const auto& p : data) {
    if (p.rainy.dim(2) < cfg.crop || p.rainy.dim(3) < cfg.crop) {
      throw ContractError("train: pair '" + p.id + "' (" + shape_str(p.rainy.shape()) + ") is smaller than crop " +
                          std::to_string(cfg.crop));
    }
  }
  const auto params = model.parameters();
  OptimizerState state = options.resume ? *options.resume : OptimizerState{};
  const int64_t spe = steps_per_epoch(data.size(), cfg.batch_size);
  const int64_t total = int64_t(cfg.epochs) * spe;
  if (state.step > total) throw ContractError("train: resume step beyond the configured schedule");

  std::ofstream log;
  if (!options.output_dir.empty()) {
    fs::create_directories(options.output_dir);
    const auto mode = options.resume ? std::ios::app : std::ios::trunc;
    log.open(options.output_dir / "train_log.jsonl", std::ios::out | mode);
    if (!log) throw IoError("cannot write " + (options.output_dir / "train_log.jsonl").string());
  }
  auto save = [&](const std::string& name) {
    const fs::path path = options.output_dir / name;
    save_checkpoint(path, model, &state, {{"train", {{"step", state.step}, {"total_steps", total}}}});
    return path;
  };

  TrainReport report;
  while (state.step < total) {
    const int64_t step = state.step;
    const int64_t epoch = step / spe;
    const int64_t within = step % spe;
    const auto order = epoch_order(cfg.seed, epoch, data.size());
    const size_t begin = size_t(within) * size_t(cfg.batch_size);
    const size_t end = std::min(data.size(), begin + size_t(cfg.batch_size));

    std::vector<Tensor> rainy, clean;
    {
      NoGradGuard no_grad;
      for (size_t k = begin; k < end; ++k) {
        const ImagePair& p = data[order[k]];
        const CropWindow w = crop_window(cfg.seed, step, int64_t(k - begin), p.rainy.dim(2), p.rainy.dim(3), cfg.crop);
        rainy.push_back(crop_image(p.rainy, w, cfg.crop).to(model.dtype));
        clean.push_back(crop_image(p.clean, w, cfg.crop).to(model.dtype));
      }
    }
    const Tensor rainy_batch = rainy.size() == 1 ? rainy[0] : concat(rainy, 0);
    const Tensor clean_batch = clean.size() == 1 ? clean[0] : concat(clean, 0);

    for (auto p : params) p.tensor.zero_grad();
    const ModelOutput out = forward(rainy_batch, model);
    const LossTerms terms = total_loss(build_supervision(out, clean_batch, cfg.branch_weight), cfg.loss);
    const double lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min);

    StepRecord rec;
    rec.step = step + 1;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss_total = terms.total.item();
    rec.loss_char = terms.charbonnier.item();
    rec.loss_edge = terms.edge.item();
    rec.loss_fft = terms.fft.item();
    if (!std::isfinite(rec.loss_total)) {
      throw NumericalError("non-finite loss at step " + std::to_string(rec.step) + " (epoch " +
                           std::to_string(epoch) + ", lr " + fmt(lr) + "): total " + fmt(rec.loss_total) +
                           ", charbonnier " + fmt(rec.loss_char) + ", edge " + fmt(rec.loss_edge) + ", fft " +
                           fmt(rec.loss_fft));
    }
    terms.total.backward();
    adam_step(params, state, lr, cfg);
    report.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);

    json line = step_json(rec);
    if (state.step % spe == 0) {
      const int64_t done = state.step / spe;
      if (cfg.eval_every > 0 && done % cfg.eval_every == 0 && options.eval_data && !options.eval_data->empty()) {
        const EvalMetrics m = evaluate(model, *options.eval_data);
        report.evals.push_back({epoch, state.step, m.psnr, m.ssim});
        line["psnr"] = m.psnr;
        line["ssim"] = m.ssim;
      }
      if (!options.output_dir.empty() && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04lld.ckpt", static_cast<long long>(done));
        report.checkpoints.push_back(save(name));
      }
    }
    if (log.is_open()) log << line.dump() << "\n" << std::flush;
    if (options.stop_after_step >= 0 && state.step >= options.stop_after_step) break;
  }
  if (!options.output_dir.empty()) {
    report.checkpoints.push_back(save(state.step >= total ? "final.ckpt" : "last.ckpt"));
  }
  return report;
}

}  // namespace dpm
