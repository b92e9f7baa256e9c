#include "dpm/image_ops.hpp"

#include <algorithm>
#include <cmath>

#include "dpm/ops.hpp"

namespace dpm {

namespace {

void require_image(const Tensor& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + " expects (N,C,H,W), got " + shape_str(x.shape()));
}

// Same k x k kernel for every channel, as a depthwise weight.
Tensor depthwise_kernel(const std::vector<double>& k2d, int k, int64_t channels, DType dtype) {
  std::vector<double> values;
  values.reserve(static_cast<size_t>(channels) * k2d.size());
  for (int64_t c = 0; c < channels; ++c) values.insert(values.end(), k2d.begin(), k2d.end());
  return Tensor::from_vector({channels, 1, k, k}, values, dtype);
}

std::vector<double> binomial5x5() {
  const double taps[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  std::vector<double> k(25);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) k[i * 5 + j] = taps[i] * taps[j];
  return k;
}

struct Tap {
  int64_t lo, hi;
  double w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

std::vector<Tap> bilinear_taps(int64_t in, int64_t out, int factor) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) / factor - 0.5;
    src = std::max(src, 0.0);
    const int64_t lo = std::min(static_cast<int64_t>(std::floor(src)), in - 1);
    const int64_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor gaussian_downsample(const Tensor& x) {
  require_image(x, "gaussian_downsample");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("gaussian_downsample: odd extent in " + shape_str(x.shape()));
  }
  const int64_t c = x.dim(1);
  const Tensor kernel = depthwise_kernel(binomial5x5(), 5, c, x.dtype());
  return conv2d(pad_reflect(x, 2), kernel, std::nullopt, /*stride=*/2, /*padding=*/0,
                static_cast<int>(c));
}

Pyramid gaussian_pyramid(const Tensor& x, int levels) {
  Pyramid p;
  p.levels.push_back(x);
  for (int i = 1; i < levels; ++i) p.levels.push_back(gaussian_downsample(p.levels.back()));
  return p;
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
  require_image(x, "upsample_bilinear");
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be positive");
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t ho = h * factor, wo = w * factor;
  const auto ty = bilinear_taps(h, ho, factor);
  const auto tx = bilinear_taps(w, wo, factor);
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), ho, wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.mutable_data<T>();
    for (int64_t p = 0; p < planes; ++p) {
      const T* s = src.data() + p * h * w;
      T* d = dst.data() + p * ho * wo;
      for (int64_t oy = 0; oy < ho; ++oy) {
        const Tap& a = ty[oy];
        const T wy = static_cast<T>(a.w_hi);
        for (int64_t ox = 0; ox < wo; ++ox) {
          const Tap& b = tx[ox];
          const T wx = static_cast<T>(b.w_hi);
          const T top = (T(1) - wx) * s[a.lo * w + b.lo] + wx * s[a.lo * w + b.hi];
          const T bottom = (T(1) - wx) * s[a.hi * w + b.lo] + wx * s[a.hi * w + b.hi];
          d[oy * wo + ox] = (T(1) - wy) * top + wy * bottom;
        }
      }
    }
  });
  const Shape in_shape = x.shape();
  return record(out, "upsample_bilinear", {x}, [in_shape, ty, tx, planes, h, w, ho, wo](const Tensor& g) {
    Tensor gx = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto d = gx.mutable_data<T>();
      for (int64_t p = 0; p < planes; ++p) {
        const T* go = gs.data() + p * ho * wo;
        T* gi = d.data() + p * h * w;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const Tap& a = ty[oy];
          const T wy = static_cast<T>(a.w_hi);
          for (int64_t ox = 0; ox < wo; ++ox) {
            const Tap& b = tx[ox];
            const T wx = static_cast<T>(b.w_hi);
            const T v = go[oy * wo + ox];
            gi[a.lo * w + b.lo] += (T(1) - wy) * (T(1) - wx) * v;
            gi[a.lo * w + b.hi] += (T(1) - wy) * wx * v;
            gi[a.hi * w + b.lo] += wy * (T(1) - wx) * v;
            gi[a.hi * w + b.hi] += wy * wx * v;
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor laplacian(const Tensor& x) {
  require_image(x, "laplacian");
  const int64_t c = x.dim(1);
  const Tensor kernel = depthwise_kernel({0, 1, 0, 1, -4, 1, 0, 1, 0}, 3, c, x.dtype());
  return conv2d(pad_reflect(x, 1), kernel, std::nullopt, 1, 0, static_cast<int>(c));
}

PatchGrid split_patches(const Tensor& x, int rows, int cols) {
  require_image(x, "split_patches");
  if (rows < 1 || cols < 1 || x.dim(2) % rows != 0 || x.dim(3) % cols != 0) {
    throw ShapeError("split_patches: " + shape_str(x.shape()) + " not divisible into " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " patches");
  }
  const int64_t ph = x.dim(2) / rows, pw = x.dim(3) / cols;
  PatchGrid grid{rows, cols, {}};
  for (int r = 0; r < rows; ++r) {
    const Tensor band = rows == 1 ? x : slice(x, 2, r * ph, ph);
    for (int c = 0; c < cols; ++c) grid.patches.push_back(cols == 1 ? band : slice(band, 3, c * pw, pw));
  }
  return grid;
}

Tensor merge_patches(const PatchGrid& grid) {
  if (grid.rows < 1 || grid.cols < 1 ||
      grid.patches.size() != static_cast<size_t>(grid.rows) * static_cast<size_t>(grid.cols)) {
    throw ShapeError("merge_patches: grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                     " holds " + std::to_string(grid.patches.size()) + " patches");
  }
  const Shape& ref = grid.patches.front().shape();
  for (const Tensor& p : grid.patches) {
    if (p.shape() != ref) {
      throw ShapeError("merge_patches: inconsistent patch shapes " + shape_str(ref) + " vs " +
                       shape_str(p.shape()));
    }
  }
  std::vector<Tensor> bands;
  for (int r = 0; r < grid.rows; ++r) {
    std::vector<Tensor> row(grid.patches.begin() + r * grid.cols, grid.patches.begin() + (r + 1) * grid.cols);
    bands.push_back(row.size() == 1 ? row[0] : concat(row, 3));
  }
  return bands.size() == 1 ? bands[0] : concat(bands, 2);
}

Tensor rgb_to_y(const Tensor& rgb, LumaConvention convention) {
  require_image(rgb, "rgb_to_y");
  if (rgb.dim(1) != 3) throw ShapeError("rgb_to_y: expected 3 channels, got " + shape_str(rgb.shape()));
  const auto ch = split(rgb, 1, 3);
  if (convention == LumaConvention::kFullSwing) {
    return add(add(mul_scalar(ch[0], 0.299), mul_scalar(ch[1], 0.587)), mul_scalar(ch[2], 0.114));
  }
  const Tensor weighted =
      add(add(mul_scalar(ch[0], 65.481), mul_scalar(ch[1], 128.553)), mul_scalar(ch[2], 24.966));
  return mul_scalar(add_scalar(weighted, 16.0), 1.0 / 255.0);
}

}  // namespace dpm
