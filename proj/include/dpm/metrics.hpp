#pragma once

#include <limits>

#include "dpm/image_ops.hpp"
#include "dpm/tensor.hpp"

namespace dpm {

// Returned by psnr_y for identical images.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

// Peak 1.0 PSNR in dB on the luma plane. Inputs are clipped to [0, 1].
double psnr_y(const Tensor& pred, const Tensor& target,
              LumaConvention convention = LumaConvention::kStudioSwing);

// Single-scale SSIM on the luma plane: 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2, averaged over the valid (unpadded) map.
double ssim_y(const Tensor& pred, const Tensor& target,
              LumaConvention convention = LumaConvention::kStudioSwing);

// SSIM between two single-channel planes stored row-major.
double ssim_plane(const double* a, const double* b, int64_t height, int64_t width);

}  // namespace dpm
