#include "dpm/metrics.hpp"

#include <cmath>
#include <vector>

#include "dpm/ops.hpp"

namespace dpm {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

Tensor luma(const Tensor& rgb, LumaConvention convention) {
  NoGradGuard no_grad;
  return rgb_to_y(clamp(rgb, 0.0, 1.0), convention).to(DType::kFloat64);
}

void require_pair(const Tensor& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) + " vs " +
                        shape_str(target.shape()));
  }
}

std::vector<double> gaussian_taps() {
  std::vector<double> taps(kWindow);
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    taps[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

// Separable valid-mode filtering: (h, w) -> (h - 10, w - 10).
std::vector<double> filter_valid(const std::vector<double>& plane, int64_t h, int64_t w,
                                 const std::vector<double>& taps) {
  const int64_t ho = h - kWindow + 1, wo = w - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(h * wo));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * plane[y * w + x + k];
      rows[y * wo + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(ho * wo));
  for (int64_t y = 0; y < ho; ++y)
    for (int64_t x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += taps[k] * rows[(y + k) * wo + x];
      out[y * wo + x] = acc;
    }
  return out;
}

}  // namespace

double psnr_y(const Tensor& pred, const Tensor& target, LumaConvention convention) {
  require_pair(pred, target, "psnr_y");
  const auto a = luma(pred, convention).to_vector();
  const auto b = luma(target, convention).to_vector();
  double se = 0.0;
  for (size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim_plane(const double* a, const double* b, int64_t h, int64_t w) {
  if (h < kWindow || w < kWindow) {
    throw ContractError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " smaller than the 11x11 window");
  }
  const auto taps = gaussian_taps();
  const size_t n = static_cast<size_t>(h * w);
  std::vector<double> pa(a, a + n), pb(b, b + n), aa(n), bb(n), ab(n);
  for (size_t i = 0; i < n; ++i) {
    aa[i] = pa[i] * pa[i];
    bb[i] = pb[i] * pb[i];
    ab[i] = pa[i] * pb[i];
  }
  const auto mu_a = filter_valid(pa, h, w, taps);
  const auto mu_b = filter_valid(pb, h, w, taps);
  const auto e_aa = filter_valid(aa, h, w, taps);
  const auto e_bb = filter_valid(bb, h, w, taps);
  const auto e_ab = filter_valid(ab, h, w, taps);
  double total = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma;
    const double vb = e_bb[i] - mb * mb;
    const double cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
  }
  return total / static_cast<double>(mu_a.size());
}

double ssim_y(const Tensor& pred, const Tensor& target, LumaConvention convention) {
  require_pair(pred, target, "ssim_y");
  const Tensor a = luma(pred, convention);
  const Tensor b = luma(target, convention);
  const int64_t n = a.dim(0), h = a.dim(2), w = a.dim(3);
  const auto da = a.data<double>();
  const auto db = b.data<double>();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) total += ssim_plane(da.data() + i * h * w, db.data() + i * h * w, h, w);
  return total / static_cast<double>(n);
}

}  // namespace dpm
