#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dpm/config.hpp"

namespace dpm::cli {

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kUsage = 2,
  kNumerical = 3,
};

// Parses argv and runs one subcommand. Human-readable progress goes to `out`,
// diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Relative data paths in a config file are taken relative to that file.
RunConfig load_config_file(const std::filesystem::path& path);

// Writes output_dir/config.resolved.json.
void write_resolved_config(const RunConfig& cfg);

struct SplitMetrics {
  std::string split;
  int count = 0;
  double psnr = 0;
  double ssim = 0;
  double input_psnr = 0;  // rainy vs clean
};

struct TrainSummary {
  TrainReport report;
  std::vector<SplitMetrics> metrics;  // "train", then "held_out" when present
  std::filesystem::path final_checkpoint;
};

// The body of `dpm train`: echoes the config, trains, evaluates every split
// and writes output_dir/metrics.json.
TrainSummary train_from_config(const RunConfig& cfg, std::ostream& out, const std::string& resume = "");

struct AblationRow {
  std::string variant;  // "a", "b", "c"
  std::string label;
  bool multipatch = false;
  bool coarse2fine = false;
  int64_t parameters = 0;
  double final_loss = 0;
  SplitMetrics train;
  SplitMetrics held_out;  // count 0 when there is no held-out split
};

// Variant configs differ from `base` only in the two path flags.
std::vector<RunConfig> ablation_configs(const RunConfig& base);

std::vector<AblationRow> run_ablation(const RunConfig& base, std::ostream& out);

std::string ablation_table(const std::vector<AblationRow>& rows);

// "inf" for infinite values, the number otherwise.
nlohmann::json metric_json(double v);

}  // namespace dpm::cli
