#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpm/tensor.hpp"

namespace dpm {

struct ImagePair {
  Tensor rainy;  // (1,3,H,W) in [0,1]
  Tensor clean;
  std::string id;
};

using Dataset = std::vector<ImagePair>;

struct RainParams {
  uint64_t seed = 0;
  double streak_density = 0.04;
  int streak_length = 11;
  double angle_deg = 75.0;
  double intensity = 1.0;

  void validate() const;
};

// Decodes 8- or 16-bit PNG (gray, RGB, with or without alpha) into (1,3,H,W)
// float32. Alpha is dropped, gray is replicated. Throws IoError naming the file.
Tensor load_png(const std::filesystem::path& path);

// Writes (1,3,H,W) clipped to [0,1] as an RGB PNG of the given bit depth.
void save_png(const std::filesystem::path& path, const Tensor& image, int bit_depth = 8);

// clip(clean + intensity * (line_kernel * mask)), applied to all channels.
// mask is 1 where a seeded uniform field is >= 1 - density.
ImagePair synthesize_rain(const Tensor& clean, const RainParams& p, const std::string& id = "");

// Normalized line kernel of the given length at angle_deg, on a square odd grid.
std::vector<double> streak_kernel(int length, double angle_deg, int* size);

// Smooth shaded background with a few flat shapes. Deterministic in seed.
Tensor procedural_clean(uint64_t seed, int64_t height, int64_t width);

struct PairLoadReport {
  Dataset pairs;                      // sorted by id
  std::vector<std::string> skipped;  // file names present in only one directory
};

// Matches same-named *.png files in rainy_dir and clean_dir.
PairLoadReport load_pairs(const std::filesystem::path& rainy_dir,
                          const std::filesystem::path& clean_dir);

struct ManifestEntry {
  std::string rainy;  // relative to the manifest directory
  std::string clean;
  std::string id;
};

struct Manifest {
  std::vector<ManifestEntry> pairs;
  std::optional<RainParams> generator;
};

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);
Dataset load_manifest_pairs(const std::filesystem::path& path);

// Splits off every k-th pair (k = stride) as a held-out set; stride 0 keeps all for training.
void holdout_split(const Dataset& all, int stride, Dataset& train, Dataset& held_out);

}  // namespace dpm
