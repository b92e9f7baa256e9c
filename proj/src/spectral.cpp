#include <Eigen/Core>
#include <cmath>
#include <numbers>

#include "dpm/ops.hpp"

namespace dpm {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Symmetric cos/sin DFT matrices of size n.
template <class T>
void dft_tables(int64_t n, RowMat<T>& cos_m, RowMat<T>& sin_m) {
  cos_m.resize(n, n);
  sin_m.resize(n, n);
  for (int64_t k = 0; k < n; ++k)
    for (int64_t m = 0; m < n; ++m) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>((k * m) % n) / static_cast<double>(n);
      cos_m(k, m) = static_cast<T>(std::cos(angle));
      sin_m(k, m) = static_cast<T>(std::sin(angle));
    }
}

}  // namespace

Spectrum dft2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("dft2 expects (N,C,H,W), got " + shape_str(x.shape()));
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor re = Tensor::zeros(x.shape(), x.dtype());
  Tensor im = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    RowMat<T> ch, sh, cw, sw;
    dft_tables<T>(h, ch, sh);
    dft_tables<T>(w, cw, sw);
    const T* src = x.data<T>().data();
    T* rp = re.mutable_data<T>().data();
    T* ip = im.mutable_data<T>().data();
    for (int64_t p = 0; p < planes; ++p) {
      Eigen::Map<const RowMat<T>> X(src + p * h * w, h, w);
      Eigen::Map<RowMat<T>> Re(rp + p * h * w, h, w);
      Eigen::Map<RowMat<T>> Im(ip + p * h * w, h, w);
      const RowMat<T> xc = X * cw;
      const RowMat<T> xs = X * sw;
      Re.noalias() = ch * xc - sh * xs;
      Im.noalias() = -(sh * xc + ch * xs);
    }
  });

  // The two outputs share one linear map; each carries its own node so either
  // may be consumed independently.
  const Shape shape = x.shape();
  auto adjoint = [shape, planes, h, w](const Tensor& g_re, const Tensor& g_im) {
    Tensor gx = Tensor::zeros(shape, g_re.defined() ? g_re.dtype() : g_im.dtype());
    dispatch(gx.dtype(), [&]<class T>() {
      RowMat<T> ch, sh, cw, sw;
      dft_tables<T>(h, ch, sh);
      dft_tables<T>(w, cw, sw);
      T* dst = gx.mutable_data<T>().data();
      for (int64_t p = 0; p < planes; ++p) {
        Eigen::Map<RowMat<T>> GX(dst + p * h * w, h, w);
        if (g_re.defined()) {
          Eigen::Map<const RowMat<T>> G(g_re.data<T>().data() + p * h * w, h, w);
          GX.noalias() += ch * G * cw - sh * G * sw;
        }
        if (g_im.defined()) {
          Eigen::Map<const RowMat<T>> G(g_im.data<T>().data() + p * h * w, h, w);
          GX.noalias() -= sh * G * cw + ch * G * sw;
        }
      }
    });
    return gx;
  };
  re = record(re, "dft2.re", {x}, [adjoint](const Tensor& g) {
    return std::vector<Tensor>{adjoint(g, Tensor())};
  });
  im = record(im, "dft2.im", {x}, [adjoint](const Tensor& g) {
    return std::vector<Tensor>{adjoint(Tensor(), g)};
  });
  return {re, im};
}

}  // namespace dpm
