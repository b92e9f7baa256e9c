#include <Eigen/Core>
#include <algorithm>

#include "dpm/ops.hpp"

namespace dpm {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int64_t n, cin, h, w;
  int64_t cout, cin_g, cout_g, k;
  int64_t ho, wo;
  int stride, pad, groups;

  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

// Output-row range [lo, hi) whose input row oy*s + ky - p lies inside [0, extent).
inline void valid_range(int64_t extent, int64_t out_extent, int64_t kofs, int stride, int64_t& lo,
                        int64_t& hi) {
  lo = 0;
  while (lo < out_extent && lo * stride + kofs < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride + kofs >= extent) --hi;
}

// col[(c*k + ky)*k + kx, oy*wo + ox] = x[c, oy*s + ky - p, ox*s + kx - p]
template <class T>
void im2col(const T* x, T* col, const ConvGeometry& g) {
  const int64_t plane = g.ho * g.wo;
  for (int64_t c = 0; c < g.cin_g; ++c)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        const T* xc = x + c * g.h * g.w;
        int64_t ox0, ox1;
        valid_range(g.w, g.wo, kx - g.pad, g.stride, ox0, ox1);
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride + ky - g.pad;
          T* __restrict dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* __restrict src = xc + iy * g.w + kx - g.pad;
          std::fill(dst, dst + ox0, T(0));
          if (g.stride == 1) {
            std::copy(src + ox0, src + ox1, dst + ox0);
          } else {
            for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + ox1, dst + g.wo, T(0));
        }
      }
}

template <class T>
void col2im(const T* col, T* x, const ConvGeometry& g) {
  const int64_t plane = g.ho * g.wo;
  for (int64_t c = 0; c < g.cin_g; ++c)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * plane;
        T* xc = x + c * g.h * g.w;
        int64_t ox0, ox1;
        valid_range(g.w, g.wo, kx - g.pad, g.stride, ox0, ox1);
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* __restrict src = row + oy * g.wo;
          T* __restrict dst = xc + iy * g.w + kx - g.pad;
          if (g.stride == 1) {
            for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox] += src[ox];
          } else {
            for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

template <class T>
void depthwise_forward(const T* x, const T* w, T* y, const ConvGeometry& g) {
  for (int64_t b = 0; b < g.n; ++b)
    for (int64_t c = 0; c < g.cin; ++c) {
      const T* xc = x + (b * g.cin + c) * g.h * g.w;
      T* yc = y + (b * g.cout + c) * g.ho * g.wo;
      const T* wc = w + c * g.k * g.k;
      for (int64_t ky = 0; ky < g.k; ++ky) {
        int64_t oy0, oy1;
        valid_range(g.h, g.ho, ky - g.pad, g.stride, oy0, oy1);
        for (int64_t kx = 0; kx < g.k; ++kx) {
          const T wv = wc[ky * g.k + kx];
          int64_t ox0, ox1;
          valid_range(g.w, g.wo, kx - g.pad, g.stride, ox0, ox1);
          for (int64_t oy = oy0; oy < oy1; ++oy) {
            const T* __restrict src = xc + (oy * g.stride + ky - g.pad) * g.w + (kx - g.pad);
            T* __restrict dst = yc + oy * g.wo;
            if (g.stride == 1) {
              for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox];
            } else {
              for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox] += wv * src[ox * g.stride];
            }
          }
        }
      }
    }
}

template <class T>
void depthwise_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, const ConvGeometry& g) {
  // Per-tap products are gathered elementwise into `partial` and reduced once,
  // which keeps both inner loops vectorizable.
  std::vector<T> partial(static_cast<size_t>(g.wo));
  for (int64_t b = 0; b < g.n; ++b)
    for (int64_t c = 0; c < g.cin; ++c) {
      const T* xc = x + (b * g.cin + c) * g.h * g.w;
      T* gxc = gx + (b * g.cin + c) * g.h * g.w;
      const T* gyc = gy + (b * g.cout + c) * g.ho * g.wo;
      const T* wc = w + c * g.k * g.k;
      T* gwc = gw + c * g.k * g.k;
      for (int64_t ky = 0; ky < g.k; ++ky) {
        int64_t oy0, oy1;
        valid_range(g.h, g.ho, ky - g.pad, g.stride, oy0, oy1);
        for (int64_t kx = 0; kx < g.k; ++kx) {
          const T wv = wc[ky * g.k + kx];
          int64_t ox0, ox1;
          valid_range(g.w, g.wo, kx - g.pad, g.stride, ox0, ox1);
          std::fill(partial.begin(), partial.end(), T(0));
          T* __restrict acc = partial.data();
          for (int64_t oy = oy0; oy < oy1; ++oy) {
            const int64_t offset = (oy * g.stride + ky - g.pad) * g.w + (kx - g.pad);
            const T* __restrict src = xc + offset;
            T* __restrict dsrc = gxc + offset;
            const T* __restrict go = gyc + oy * g.wo;
            if (g.stride == 1) {
              for (int64_t ox = ox0; ox < ox1; ++ox) acc[ox] += go[ox] * src[ox];
              for (int64_t ox = ox0; ox < ox1; ++ox) dsrc[ox] += wv * go[ox];
            } else {
              for (int64_t ox = ox0; ox < ox1; ++ox) {
                acc[ox] += go[ox] * src[ox * g.stride];
                dsrc[ox * g.stride] += wv * go[ox];
              }
            }
          }
          T total = 0;
          for (int64_t ox = ox0; ox < ox1; ++ox) total += acc[ox];
          gwc[ky * g.k + kx] += total;
        }
      }
    }
}

template <class T>
void conv_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
  const int64_t plane = g.ho * g.wo;
  if (g.depthwise()) {
    depthwise_forward(x, w, y, g);
  } else {
    const int64_t kk = g.cin_g * g.k * g.k;
    std::vector<T> col(g.pointwise() ? 0 : static_cast<size_t>(kk * plane));
    for (int64_t b = 0; b < g.n; ++b)
      for (int64_t grp = 0; grp < g.groups; ++grp) {
        const T* xg = x + (b * g.cin + grp * g.cin_g) * g.h * g.w;
        const T* cp = xg;
        if (!g.pointwise()) {
          im2col(xg, col.data(), g);
          cp = col.data();
        }
        Eigen::Map<const RowMat<T>> W(w + grp * g.cout_g * kk, g.cout_g, kk);
        Eigen::Map<const RowMat<T>> C(cp, kk, plane);
        Eigen::Map<RowMat<T>> Y(y + (b * g.cout + grp * g.cout_g) * plane, g.cout_g, plane);
        Y.noalias() = W * C;
      }
  }
  if (bias) {
    for (int64_t b = 0; b < g.n; ++b)
      for (int64_t c = 0; c < g.cout; ++c) {
        T* yc = y + (b * g.cout + c) * plane;
        for (int64_t p = 0; p < plane; ++p) yc[p] += bias[c];
      }
  }
}

template <class T>
void conv_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb, const ConvGeometry& g) {
  // gx may be null when the input needs no gradient.
  const int64_t plane = g.ho * g.wo;
  if (gb) {
    for (int64_t b = 0; b < g.n; ++b)
      for (int64_t c = 0; c < g.cout; ++c) {
        const T* gyc = gy + (b * g.cout + c) * plane;
        T acc = 0;
        for (int64_t p = 0; p < plane; ++p) acc += gyc[p];
        gb[c] += acc;
      }
  }
  if (g.depthwise()) {
    std::vector<T> scratch(gx ? 0 : static_cast<size_t>(g.n * g.cin * g.h * g.w));
    depthwise_backward(x, w, gy, gx ? gx : scratch.data(), gw, g);
    return;
  }
  const int64_t kk = g.cin_g * g.k * g.k;
  std::vector<T> col(g.pointwise() ? 0 : static_cast<size_t>(kk * plane));
  std::vector<T> gcol(g.pointwise() || !gx ? 0 : static_cast<size_t>(kk * plane));
  for (int64_t b = 0; b < g.n; ++b)
    for (int64_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = x + (b * g.cin + grp * g.cin_g) * g.h * g.w;
      T* gxg = gx ? gx + (b * g.cin + grp * g.cin_g) * g.h * g.w : nullptr;
      const T* cp = xg;
      if (!g.pointwise()) {
        im2col(xg, col.data(), g);
        cp = col.data();
      }
      Eigen::Map<const RowMat<T>> W(w + grp * g.cout_g * kk, g.cout_g, kk);
      Eigen::Map<RowMat<T>> GW(gw + grp * g.cout_g * kk, g.cout_g, kk);
      Eigen::Map<const RowMat<T>> C(cp, kk, plane);
      Eigen::Map<const RowMat<T>> GY(gy + (b * g.cout + grp * g.cout_g) * plane, g.cout_g, plane);
      GW.noalias() += GY * C.transpose();
      if (!gxg) continue;
      if (g.pointwise()) {
        Eigen::Map<RowMat<T>> GX(gxg, kk, plane);
        GX.noalias() += W.transpose() * GY;
      } else {
        Eigen::Map<RowMat<T>> GC(gcol.data(), kk, plane);
        GC.noalias() = W.transpose() * GY;
        col2im(gcol.data(), gxg, g);
      }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
              int padding, int groups) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.pad = padding;
  g.groups = groups;
  if (groups < 1 || g.cin % groups != 0 || g.cout % groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                     " not divisible by groups " + std::to_string(groups));
  }
  g.cin_g = g.cin / groups;
  g.cout_g = g.cout / groups;
  if (w.dim(1) != g.cin_g || w.dim(3) != g.k) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with groups " + std::to_string(groups));
  }
  if (g.k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(g.cout) +
                     " output channels");
  }
  if (x.dtype() != w.dtype()) throw ContractError("conv2d: dtype mismatch");
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input smaller than kernel");

  Tensor out = Tensor::zeros({g.n, g.cout, g.ho, g.wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    conv_forward<T>(x.data<T>().data(), w.data<T>().data(), bias ? bias->data<T>().data() : nullptr,
                    out.mutable_data<T>().data(), g);
  });

  std::vector<Tensor> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return record(out, "conv2d", inputs, [x, w, g, has_bias](const Tensor& gy) {
    Tensor gx = x.requires_grad() ? Tensor::zeros(x.shape(), x.dtype()) : Tensor();
    Tensor gw = Tensor::zeros(w.shape(), w.dtype());
    Tensor gb = has_bias ? Tensor::zeros({g.cout}, x.dtype()) : Tensor();
    dispatch(x.dtype(), [&]<class T>() {
      conv_backward<T>(x.data<T>().data(), w.data<T>().data(), gy.data<T>().data(),
                       gx.defined() ? gx.mutable_data<T>().data() : nullptr, gw.mutable_data<T>().data(),
                       has_bias ? gb.mutable_data<T>().data() : nullptr, g);
    });
    std::vector<Tensor> grads{gx, gw};
    if (has_bias) grads.push_back(gb);
    return grads;
  });
}

namespace {

inline int64_t reflect_index(int64_t i, int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace

Tensor pad_reflect(const Tensor& x, int pad) {
  if (x.rank() != 4) throw ShapeError("pad_reflect expects (N,C,H,W), got " + shape_str(x.shape()));
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pad < 0 || pad >= h || pad >= w) {
    throw ShapeError("pad_reflect: pad " + std::to_string(pad) + " too large for " + shape_str(x.shape()));
  }
  const int64_t ph = h + 2 * pad, pw = w + 2 * pad;
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), ph, pw}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.mutable_data<T>();
    for (int64_t p = 0; p < planes; ++p)
      for (int64_t y = 0; y < ph; ++y) {
        const int64_t sy = reflect_index(y - pad, h);
        for (int64_t xx = 0; xx < pw; ++xx) {
          dst[(p * ph + y) * pw + xx] = src[(p * h + sy) * w + reflect_index(xx - pad, w)];
        }
      }
  });
  const Shape in_shape = x.shape();
  return record(out, "pad_reflect", {x}, [in_shape, pad, planes, h, w, ph, pw](const Tensor& g) {
    Tensor gx = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto d = gx.mutable_data<T>();
      for (int64_t p = 0; p < planes; ++p)
        for (int64_t y = 0; y < ph; ++y) {
          const int64_t sy = reflect_index(y - pad, h);
          for (int64_t xx = 0; xx < pw; ++xx) {
            d[(p * h + sy) * w + reflect_index(xx - pad, w)] += gs[(p * ph + y) * pw + xx];
          }
        }
    });
    return std::vector<Tensor>{gx};
  });
}

namespace {

// Index map: unshuffled[n, c*r*r + i*r + j, y, x] = shuffled[n, c, y*r + i, x*r + j].
template <class T, bool kToDepth>
void shuffle_copy(const T* src, T* dst, int64_t n, int64_t c, int64_t h, int64_t w, int64_t r) {
  const int64_t ho = h / r, wo = w / r;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          const int64_t oc = ch * r * r + i * r + j;
          for (int64_t y = 0; y < ho; ++y)
            for (int64_t x = 0; x < wo; ++x) {
              const int64_t spatial = ((b * c + ch) * h + y * r + i) * w + x * r + j;
              const int64_t depth = ((b * c * r * r + oc) * ho + y) * wo + x;
              if constexpr (kToDepth) {
                dst[depth] = src[spatial];
              } else {
                dst[spatial] = src[depth];
              }
            }
        }
}

}  // namespace

Tensor pixel_unshuffle(const Tensor& x, int r) {
  if (x.rank() != 4 || r < 1) throw ShapeError("pixel_unshuffle expects (N,C,H,W) and r >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % r != 0 || w % r != 0) {
    throw ShapeError("pixel_unshuffle: extents of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(r));
  }
  Tensor out = Tensor::zeros({n, c * r * r, h / r, w / r}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    shuffle_copy<T, true>(x.data<T>().data(), out.mutable_data<T>().data(), n, c, h, w, r);
  });
  return record(out, "pixel_unshuffle", {x},
                [r](const Tensor& g) { return std::vector<Tensor>{pixel_shuffle(g, r)}; });
}

Tensor pixel_shuffle(const Tensor& x, int r) {
  if (x.rank() != 4 || r < 1) throw ShapeError("pixel_shuffle expects (N,C,H,W) and r >= 1");
  const int64_t n = x.dim(0), cr = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (cr % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by " +
                     std::to_string(r * r));
  }
  const int64_t c = cr / (r * r);
  Tensor out = Tensor::zeros({n, c, h * r, w * r}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    shuffle_copy<T, false>(x.data<T>().data(), out.mutable_data<T>().data(), n, c, h * r, w * r, r);
  });
  return record(out, "pixel_shuffle", {x},
                [r](const Tensor& g) { return std::vector<Tensor>{pixel_unshuffle(g, r)}; });
}

}  // namespace dpm
