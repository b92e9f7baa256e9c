#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "dpm/data.hpp"
#include "dpm/model.hpp"
#include "dpm/trainer.hpp"

namespace dpm {

// In-memory synthetic pairs: procedural clean images plus seeded rain.
struct SyntheticSource {
  int count = 4;
  int64_t height = 64;
  int64_t width = 64;
  uint64_t clean_seed = 0;
  RainParams rain;
};

struct DataConfig {
  std::string manifest;  // one of manifest, rainy_dir + clean_dir, synthetic
  std::string rainy_dir;
  std::string clean_dir;
  std::optional<SyntheticSource> synthetic;
  std::string eval_manifest;  // optional held-out set
  int holdout_stride = 0;     // otherwise hold out every k-th training pair
};

struct RunConfig {
  ModelConfig model = ModelConfig::slim();
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";
};

nlohmann::json to_json(const UNetConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const LossWeights& w);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RainParams& p);
nlohmann::json to_json(const DataConfig& d);
nlohmann::json to_json(const RunConfig& r);

// Strict parsers: unknown keys and type errors are collected and reported
// together in one ConfigError. Missing keys keep their defaults. A model
// object may start from "preset": "full" | "slim".
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Loads the training and held-out pairs described by the data section.
void load_run_data(const DataConfig& d, Dataset& train, Dataset& held_out);

}  // namespace dpm
