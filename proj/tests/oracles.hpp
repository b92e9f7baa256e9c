#pragma once

// Reference implementations for tests. Deliberately naive: plain loops over
// std::vector<double>, sharing no code with the library.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dpm/tensor.hpp"

namespace oracle {

inline std::vector<double> uniform(size_t n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 g(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * double(g() >> 11) * 0x1.0p-53;
  return v;
}

inline dpm::Tensor tensor(const dpm::Shape& shape, uint64_t seed, dpm::DType dtype = dpm::DType::kFloat64,
                          double lo = -1.0, double hi = 1.0) {
  return dpm::Tensor::from_vector(shape, uniform(size_t(dpm::shape_numel(shape)), seed, lo, hi), dtype);
}

struct Complex2d {
  std::vector<double> re, im;
};

// O(n^4) DFT of one h x w plane: X[u,v] = sum x[y,x] exp(-2 pi i (uy/h + vx/w)).
inline Complex2d dft(const std::vector<double>& x, int h, int w) {
  Complex2d out{std::vector<double>(size_t(h * w)), std::vector<double>(size_t(h * w))};
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      double re = 0, im = 0;
      for (int y = 0; y < h; ++y)
        for (int c = 0; c < w; ++c) {
          const double a = -2.0 * M_PI * (double(u * y) / h + double(v * c) / w);
          re += x[size_t(y * w + c)] * std::cos(a);
          im += x[size_t(y * w + c)] * std::sin(a);
        }
      out.re[size_t(u * w + v)] = re;
      out.im[size_t(u * w + v)] = im;
    }
  return out;
}

// Index reflection without repeating the edge sample: -1 -> 1, n -> n - 2.
inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// 5x5 binomial blur with reflect padding, sampled at even coordinates.
inline std::vector<double> gaussian_downsample(const std::vector<double>& x, int h, int w) {
  const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  std::vector<double> out;
  for (int y = 0; y < h; y += 2)
    for (int c = 0; c < w; c += 2) {
      double s = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) s += k[dy + 2] * k[dx + 2] * x[size_t(reflect(y + dy, h) * w + reflect(c + dx, w))];
      out.push_back(s);
    }
  return out;
}

// Direct cross-correlation, zero padding, arbitrary stride / groups.
inline std::vector<double> conv2d(const std::vector<double>& x, int n, int cin, int h, int w,
                                  const std::vector<double>& wt, int cout, int k, int stride, int pad, int groups) {
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const int cg = cin / groups, og = cout / groups;
  std::vector<double> out(size_t(n * cout * ho * wo), 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < cout; ++o)
      for (int y = 0; y < ho; ++y)
        for (int c = 0; c < wo; ++c) {
          double s = 0;
          const int g = o / og;
          for (int i = 0; i < cg; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int sy = y * stride + ky - pad, sx = c * stride + kx - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                s += wt[size_t(((o * cg + i) * k + ky) * k + kx)] * x[size_t(((b * cin + g * cg + i) * h + sy) * w + sx)];
              }
          out[size_t(((b * cout + o) * ho + y) * wo + c)] = s;
        }
  return out;
}

// Mean SSIM over every valid 11x11 window, each window evaluated from scratch.
inline double ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-double((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  int count = 0;
  for (int y = 0; y + 11 <= h; ++y)
    for (int x = 0; x + 11 <= w; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i] * g[j];
          ma += wgt * a[size_t((y + i) * w + x + j)];
          mb += wgt * b[size_t((y + i) * w + x + j)];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i] * g[j];
          const double da = a[size_t((y + i) * w + x + j)] - ma, db = b[size_t((y + i) * w + x + j)] - mb;
          va += wgt * da * da;
          vb += wgt * db * db;
          cov += wgt * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

// Studio-swing luma of one (1,3,H,W) image held as a flat vector.
inline std::vector<double> luma(const std::vector<double>& rgb, int h, int w) {
  const size_t p = size_t(h * w);
  std::vector<double> y(p);
  for (size_t i = 0; i < p; ++i) y[i] = (65.481 * rgb[i] + 128.553 * rgb[p + i] + 24.966 * rgb[2 * p + i] + 16.0) / 255.0;
  return y;
}

// Central difference of a scalar function of one coordinate.
inline double central(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace oracle
