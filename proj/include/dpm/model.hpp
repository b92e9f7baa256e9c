#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpm/image_ops.hpp"
#include "dpm/nn.hpp"
#include "dpm/unet.hpp"

namespace dpm {

// Orientation of the two level-2 patches of the multi-patch path.
enum class PatchAxis {
  kHeight,  // top / bottom halves; level-3 pairs are joined along width
  kWidth,   // left / right halves; level-3 pairs are joined along height
};

struct ModelConfig {
  UNetConfig backbone;
  UNetConfig branch;  // every branch sub-network
  bool enable_multipatch = true;
  bool enable_coarse2fine = true;
  PatchAxis patch_axis = PatchAxis::kHeight;
  bool share_level_weights = true;
  uint64_t init_seed = 0;

  // C=48, blocks [2,2,2], heads [1,2,4], gamma 2.66 everywhere.
  static ModelConfig full();
  // C=16, blocks [1,1,1] everywhere, for desk-scale runs.
  static ModelConfig slim();

  void validate() const;
};

// Image-to-image restorer: 3x3 conv 3 -> C, UNet, 3x3 conv -> 3. Returns the
// residual; callers add their own skip.
struct Restorer {
  Conv2d conv_in;
  UNet unet;
  Conv2d conv_out;

  static Restorer make(Initializer& init, const UNetConfig& cfg);
  Tensor residual(const Tensor& image) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

struct PatchEncoder {
  Conv2d conv_in;  // 3 -> C
  UNet unet;
};

struct MultiPatchPath {
  std::vector<PatchEncoder> level3;  // 1 when shared, else one per level-3 patch
  std::vector<Conv2d> level3_out;    // 1 when shared, else one per joined pair
  std::vector<PatchEncoder> level2;  // 1 when shared, else one per level-2 patch
  std::vector<Conv2d> level2_fuse;   // 1x1, (C + final width) -> C
  Conv2d level2_out;
};

struct CoarseToFinePath {
  Restorer quarter;
  Restorer half;
};

struct DPMformer {
  ModelConfig config;
  DType dtype = DType::kFloat32;
  Restorer backbone;
  std::optional<MultiPatchPath> multipatch;
  std::optional<CoarseToFinePath> coarse2fine;

  static DPMformer make(const ModelConfig& config, DType dtype = DType::kFloat32);

  // Deterministic order, unique names.
  std::vector<Parameter> parameters() const;
};

struct MultiPatchOutput {
  Tensor h2;           // (N,3,H,W)
  PatchGrid h3;        // 2x2 grid of (N,3,H/2,W/2)
  Tensor w2_features;  // joined level-2 decoder features
};

struct CoarseToFineOutput {
  Tensor half;     // (N,3,H/2,W/2)
  Tensor quarter;  // (N,3,H/4,W/4)
};

struct ModelOutput {
  Tensor derained;  // rainy + residual
  Tensor residual;
  Tensor mp_level2;    // undefined when the multi-patch path is disabled
  PatchGrid mp_level3;
  Tensor c2f_half;     // undefined when the coarse-to-fine path is disabled
  Tensor c2f_quarter;
};

MultiPatchOutput multipatch_forward(const Tensor& t1, const DPMformer& m);
CoarseToFineOutput coarse2fine_forward(const Tensor& t1, const DPMformer& m);
ModelOutput forward(const Tensor& rainy, const DPMformer& m);

int64_t parameter_count(const DPMformer& m);

}  // namespace dpm
