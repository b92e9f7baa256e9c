#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpm/nn.hpp"
#include "dpm/transformer.hpp"

namespace dpm {

// Width of the shallowest decoder stage.
enum class FinalWidth {
  kC,       // concat then 1x1 halving at both junctions
  kTwiceC,  // shallowest junction keeps the concatenated 2C width
};

struct UNetConfig {
  int64_t base_channels = 48;
  std::array<int, 3> blocks_per_level{2, 2, 2};
  std::array<int, 3> heads_per_level{1, 2, 4};
  double gdfn_gamma = 2.66;
  FinalWidth final_width = FinalWidth::kC;
  bool qk_l2_normalize = true;

  // Throws ConfigError listing every violated invariant.
  void validate() const;
  int64_t level_width(int level) const { return base_channels << level; }
  int64_t out_channels() const {
    return final_width == FinalWidth::kC ? base_channels : 2 * base_channels;
  }
};

// 3x3 conv c -> c/2, then pixel_unshuffle(2): (N,c,H,W) -> (N,2c,H/2,W/2).
struct Downsample {
  Conv2d conv;
  static Downsample make(Initializer& init, int64_t channels);
};
Tensor downsample(const Tensor& x, const Downsample& d);

// 3x3 conv c -> 2c, then pixel_shuffle(2): (N,c,h,w) -> (N,c/2,2h,2w).
struct Upsample {
  Conv2d conv;
  static Upsample make(Initializer& init, int64_t channels);
};
Tensor upsample(const Tensor& x, const Upsample& u);

// Symmetric 3-level encoder-decoder. Level 3 (the bottleneck) is shared by
// the encoder and decoder paths.
struct UNet {
  UNetConfig config;
  std::vector<TransformerBlock> enc1, enc2, latent, dec2, dec1;
  Downsample down1, down2;
  Upsample up3, up2;
  Conv2d reduce2;  // 1x1, 4C -> 2C after the level-2 skip concat
  Conv2d reduce1;  // 1x1, 2C -> C after the level-1 skip concat (FinalWidth::kC only)

  static UNet make(Initializer& init, const UNetConfig& config);
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

// Shapes recorded after enc1, enc2, latent, dec2, dec1.
struct UNetTrace {
  std::vector<Shape> stages;
};

Tensor unet_forward(const Tensor& t0, const UNet& u, UNetTrace* trace = nullptr);

int64_t parameter_count(const UNet& u);

}  // namespace dpm
