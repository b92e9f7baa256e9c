#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "dpm/tensor.hpp"

// Differentiable primitives. Every function records itself on the autodiff
// tape when grad mode is on and an input requires grad.
namespace dpm {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor reciprocal(const Tensor& a);

// Exact erf form: x * Phi(x).
Tensor gelu(const Tensor& a);

// x[:, c, ...] * w[c]; w has shape (x.dim(1)).
Tensor mul_dim1(const Tensor& x, const Tensor& w);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a, int axis0, int axis1);

// Batched matrix product over the trailing two dims; leading dims must match.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t length);
std::vector<Tensor> split(const Tensor& a, int axis, int64_t parts);  // equal chunks

// Max-subtracted exp-normalization along `axis`.
Tensor softmax(const Tensor& a, int axis);
// x / max(||x||_2, eps) along `axis`.
Tensor l2_normalize(const Tensor& a, int axis, double eps = 1e-12);

// Per spatial location: (x - mean_c) / sqrt(var_c + eps) * gamma[c]. No bias.
Tensor layer_norm_channel(const Tensor& x, const Tensor& gamma, double eps = 1e-5);

// Cross-correlation with zero padding. w: (Cout, Cin/groups, k, k).
Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias = std::nullopt,
              int stride = 1, int padding = 0, int groups = 1);

// Mirror padding without edge repeat (numpy "reflect"); pad < extent.
Tensor pad_reflect(const Tensor& x, int pad);

Tensor pixel_unshuffle(const Tensor& x, int factor);
Tensor pixel_shuffle(const Tensor& x, int factor);

// 2-D DFT over the trailing (H, W) axes of a real (N, C, H, W) tensor.
struct Spectrum {
  Tensor re;
  Tensor im;
};
Spectrum dft2(const Tensor& x);

// Non-differentiable helpers.
Tensor clamp(const Tensor& a, double lo, double hi);
bool all_finite(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dpm
