#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "dpm/model.hpp"
#include "dpm/trainer.hpp"

namespace dpm {

// File layout:
//   8 bytes   magic "DPMCKPT\0"
//   8 bytes   little-endian u64 header length L
//   L bytes   JSON header {format_version, model, tensors: [{name, shape, offset}],
//             optimizer?: {step}, meta}
//   payload   little-endian float32 values; offsets count floats from payload start
// Optimizer moments are stored as tensors named "optimizer.m.<param>" and
// "optimizer.v.<param>".
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
  std::optional<int64_t> optimizer_step;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const DPMformer& model,
                     const OptimizerState* state = nullptr, const nlohmann::json& meta = nlohmann::json::object());

Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies stored values into the model's parameters. Any missing, extra or
// mis-shaped tensor raises ConfigError naming the first offending parameter
// in model order.
void load_parameters(DPMformer& model, const Checkpoint& ckpt);

// Builds a model from the stored config and loads its parameters.
DPMformer model_from_checkpoint(const Checkpoint& ckpt, DType dtype = DType::kFloat32);

// Rebuilds the optimizer state; throws ContractError if none was stored.
OptimizerState optimizer_state_from_checkpoint(const Checkpoint& ckpt, const DPMformer& model);

}  // namespace dpm
