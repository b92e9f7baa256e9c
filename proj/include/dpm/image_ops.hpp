#pragma once

#include <vector>

#include "dpm/tensor.hpp"

// Image-structured operations on (N, C, H, W) tensors. All differentiable.
namespace dpm {

// Non-overlapping tiling, patches in row-major order.
struct PatchGrid {
  int rows = 1;
  int cols = 1;
  std::vector<Tensor> patches;
};

// levels[0] is full scale, levels[k] is at 1/2^k.
struct Pyramid {
  std::vector<Tensor> levels;
};

// 5x5 binomial blur ([1,4,6,4,1]/16 outer product, reflect padding), then
// keep every second pixel starting at index 0.
Tensor gaussian_downsample(const Tensor& x);
Pyramid gaussian_pyramid(const Tensor& x, int levels);

// Bilinear, align_corners=false: source coordinate (i + 0.5) / factor - 0.5.
Tensor upsample_bilinear(const Tensor& x, int factor);

// Per-channel [[0,1,0],[1,-4,1],[0,1,0]] with reflect padding.
Tensor laplacian(const Tensor& x);

PatchGrid split_patches(const Tensor& x, int rows, int cols);
Tensor merge_patches(const PatchGrid& grid);

enum class LumaConvention {
  kStudioSwing,  // BT.601 in [16, 235] / 255
  kFullSwing,    // 0.299 R + 0.587 G + 0.114 B
};

// (N, 3, H, W) -> (N, 1, H, W).
Tensor rgb_to_y(const Tensor& rgb, LumaConvention convention = LumaConvention::kStudioSwing);

}  // namespace dpm
