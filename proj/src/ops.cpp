#include "dpm/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace dpm {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  if (a.dtype() != b.dtype()) throw ContractError(std::string(op) + ": dtype mismatch");
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// (outer, length, inner) decomposition around one axis.
struct AxisView {
  int64_t outer = 1;
  int64_t length = 1;
  int64_t inner = 1;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= s[i];
  v.length = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = out.mutable_data<T>();
    for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  });
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto z = out.mutable_data<T>();
    for (size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i]);
  });
  return out;
}

template <class F>
Tensor map_ternary(const Tensor& a, const Tensor& b, const Tensor& c, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto w = c.data<T>();
    auto z = out.mutable_data<T>();
    for (size_t i = 0; i < x.size(); ++i) z[i] = f(x[i], y[i], w[i]);
  });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x + y; });
  return record(out, "add", {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x - y; });
  return record(out, "sub", {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x * y; });
  return record(out, "mul", {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{mul(g, b), mul(g, a)};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x / y; });
  return record(out, "div", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = map_binary(g, b, [](auto gv, auto bv) { return gv / bv; });
    Tensor gb = map_ternary(g, a, b, [](auto gv, auto av, auto bv) { return -gv * av / (bv * bv); });
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = map_unary(a, [s](auto x) { return x + static_cast<decltype(x)>(s); });
  return record(out, "add_scalar", {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = map_unary(a, [s](auto x) { return x * static_cast<decltype(x)>(s); });
  return record(out, "mul_scalar", {a},
                [s](const Tensor& g) { return std::vector<Tensor>{mul_scalar(g, s)}; });
}

Tensor neg(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return -x; });
  return record(out, "neg", {a}, [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor square(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return x * x; });
  return record(out, "square", {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, a, [](auto gv, auto x) { return 2 * gv * x; })};
  });
}

Tensor sqrt(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return std::sqrt(x); });
  return record(out, "sqrt", {a}, [wout = WeakTensor(out)](const Tensor& g) {
    const Tensor out = wout.lock();
    return std::vector<Tensor>{map_binary(g, out, [](auto gv, auto y) { return gv / (2 * y); })};
  });
}

Tensor abs(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return std::abs(x); });
  return record(out, "abs", {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, a, [](auto gv, auto x) {
      using T = decltype(x);
      return x > T(0) ? gv : (x < T(0) ? -gv : T(0));
    })};
  });
}

Tensor reciprocal(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return decltype(x)(1) / x; });
  return record(out, "reciprocal", {a}, [wout = WeakTensor(out)](const Tensor& g) {
    const Tensor out = wout.lock();
    return std::vector<Tensor>{map_binary(g, out, [](auto gv, auto y) { return -gv * y * y; })};
  });
}

Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  Tensor cdf = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> x(a.data<T>().data(), a.numel());
    Eigen::Map<Arr> phi(cdf.mutable_data<T>().data(), a.numel());
    Eigen::Map<Arr> y(out.mutable_data<T>().data(), a.numel());
    phi = T(0.5) * (T(1) + (x * T(0.5 * std::numbers::sqrt2)).erf());
    y = x * phi;
  });
  return record(out, "gelu", {a}, [a, cdf](const Tensor& g) {
    Tensor gx = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
      using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
      const T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
      Eigen::Map<const Arr> x(a.data<T>().data(), a.numel());
      Eigen::Map<const Arr> phi(cdf.data<T>().data(), a.numel());
      Eigen::Map<const Arr> gs(g.data<T>().data(), a.numel());
      Eigen::Map<Arr> d(gx.mutable_data<T>().data(), a.numel());
      d = gs * (phi + x * (T(-0.5) * x * x).exp() * inv_sqrt_2pi);
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor mul_dim1(const Tensor& x, const Tensor& w) {
  if (x.rank() < 2 || w.rank() != 1 || w.dim(0) != x.dim(1)) {
    throw ShapeError("mul_dim1: weight " + shape_str(w.shape()) + " does not match axis 1 of " +
                     shape_str(x.shape()));
  }
  const AxisView v = axis_view(x.shape(), 1);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto ws = w.data<T>();
    auto ys = out.mutable_data<T>();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t c = 0; c < v.length; ++c) {
        const int64_t base = (o * v.length + c) * v.inner;
        for (int64_t i = 0; i < v.inner; ++i) ys[base + i] = xs[base + i] * ws[c];
      }
  });
  return record(out, "mul_dim1", {x, w}, [x, w, v](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    Tensor gw = Tensor::zeros(w.shape(), w.dtype());
    dispatch(x.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto xs = x.data<T>();
      auto ws = w.data<T>();
      auto gxs = gx.mutable_data<T>();
      auto gws = gw.mutable_data<T>();
      for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t c = 0; c < v.length; ++c) {
          const int64_t base = (o * v.length + c) * v.inner;
          T acc = 0;
          for (int64_t i = 0; i < v.inner; ++i) {
            gxs[base + i] = gs[base + i] * ws[c];
            acc += gs[base + i] * xs[base + i];
          }
          gws[c] += acc;
        }
    });
    return std::vector<Tensor>{gx, gw};
  });
}

// ---------------------------------------------------------------------------
// Reductions

// Neumaier summation; the mean of a constant tensor comes back exact.
template <class Range>
double compensated_sum(const Range& values) {
  double acc = 0.0, carry = 0.0;
  for (double v : values) {
    const double t = acc + v;
    carry += std::abs(acc) >= std::abs(v) ? (acc - t) + v : (v - t) + acc;
    acc = t;
  }
  return acc + carry;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    out.mutable_data<T>()[0] = static_cast<T>(compensated_sum(a.data<T>()));
  });
  return record(out, "sum", {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(a.shape(), g.item(), a.dtype())};
  });
}

Tensor mean(const Tensor& a) {
  const int64_t n = a.numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  Tensor out = Tensor::zeros({}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    out.mutable_data<T>()[0] = static_cast<T>(compensated_sum(a.data<T>()) / static_cast<double>(n));
  });
  return record(out, "mean", {a}, [a, n](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(a.shape(), g.item() / static_cast<double>(n), a.dtype())};
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = a.detach();
  out.impl()->shape = shape;
  const Shape original = a.shape();
  return record(out, "reshape", {a}, [original](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, original)};
  });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const int r = a.rank();
  const int d0 = normalize_axis(axis0, r, "transpose");
  const int d1 = normalize_axis(axis1, r, "transpose");
  Shape out_shape = a.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  // Strides of the input, permuted into output order.
  std::vector<int64_t> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
  std::vector<int64_t> perm_strides = in_strides;
  std::swap(perm_strides[d0], perm_strides[d1]);
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = out.mutable_data<T>();
    std::vector<int64_t> idx(r, 0);
    const int64_t n = out.numel();
    for (int64_t flat = 0; flat < n; ++flat) {
      int64_t src = 0;
      for (int i = 0; i < r; ++i) src += idx[i] * perm_strides[i];
      y[flat] = x[src];
      for (int i = r - 1; i >= 0; --i) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  });
  return record(out, "transpose", {a}, [d0, d1](const Tensor& g) {
    return std::vector<Tensor>{transpose(g, d0, d1)};
  });
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void gemm_raw(const T* a, const T* b, T* c, int64_t a_rows, int64_t a_cols, int64_t b_rows,
              int64_t b_cols, bool ta, bool tb) {
  Eigen::Map<const RowMat<T>> A(a, a_rows, a_cols);
  Eigen::Map<const RowMat<T>> B(b, b_rows, b_cols);
  const int64_t m = ta ? a_cols : a_rows;
  const int64_t n = tb ? b_rows : b_cols;
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("matmul: incompatible ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int r = a.rank();
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError("matmul: batch dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    batch *= a.shape()[i];
  }
  const int64_t ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
  const int64_t m = ta ? ac : ar;
  const int64_t k = ta ? ar : ac;
  const int64_t k2 = tb ? bc : br;
  const int64_t n = tb ? br : bc;
  if (k != k2) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    const T* ap = a.data<T>().data();
    const T* bp = b.data<T>().data();
    T* cp = out.mutable_data<T>().data();
    for (int64_t i = 0; i < batch; ++i) {
      gemm_raw<T>(ap + i * ar * ac, bp + i * br * bc, cp + i * m * n, ar, ac, br, bc, ta, tb);
    }
  });
  return record(out, "matmul", {a, b}, [a, b, ta, tb](const Tensor& g) {
    Tensor ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
    Tensor gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  const int ax = normalize_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r || p.dtype() != parts[0].dtype()) throw ShapeError("concat: rank/dtype mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                         shape_str(parts[0].shape()) + " along axis " + std::to_string(ax));
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  Tensor out = Tensor::zeros(out_shape, parts[0].dtype());
  const AxisView ov = axis_view(out_shape, ax);
  std::vector<int64_t> lengths;
  dispatch(out.dtype(), [&]<class T>() {
    auto y = out.mutable_data<T>();
    int64_t offset = 0;
    for (const Tensor& p : parts) {
      const int64_t len = p.shape()[ax];
      lengths.push_back(len);
      auto x = p.data<T>();
      for (int64_t o = 0; o < ov.outer; ++o) {
        std::copy_n(x.begin() + o * len * ov.inner, len * ov.inner,
                    y.begin() + (o * ov.length + offset) * ov.inner);
      }
      offset += len;
    }
  });
  return record(out, "concat", parts, [ax, lengths](const Tensor& g) {
    std::vector<Tensor> grads;
    int64_t offset = 0;
    for (int64_t len : lengths) {
      grads.push_back(slice(g, ax, offset, len));
      offset += len;
    }
    return grads;
  });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t length) {
  const int ax = normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 0 || start + length > a.shape()[ax]) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  const AxisView iv = axis_view(a.shape(), ax);
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = out.mutable_data<T>();
    for (int64_t o = 0; o < iv.outer; ++o) {
      std::copy_n(x.begin() + (o * iv.length + start) * iv.inner, length * iv.inner,
                  y.begin() + o * length * iv.inner);
    }
  });
  const Shape in_shape = a.shape();
  return record(out, "slice", {a}, [in_shape, ax, start, length, iv](const Tensor& g) {
    Tensor ga = Tensor::zeros(in_shape, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto d = ga.mutable_data<T>();
      for (int64_t o = 0; o < iv.outer; ++o) {
        std::copy_n(gs.begin() + o * length * iv.inner, length * iv.inner,
                    d.begin() + (o * iv.length + start) * iv.inner);
      }
    });
    return std::vector<Tensor>{ga};
  });
}

std::vector<Tensor> split(const Tensor& a, int axis, int64_t parts) {
  const int64_t extent = a.dim(axis);
  if (parts <= 0 || extent % parts != 0) {
    throw ShapeError("split: extent " + std::to_string(extent) + " not divisible into " +
                     std::to_string(parts) + " parts");
  }
  std::vector<Tensor> out;
  const int64_t len = extent / parts;
  for (int64_t i = 0; i < parts; ++i) out.push_back(slice(a, axis, i * len, len));
  return out;
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank(), "softmax");
  const AxisView v = axis_view(a.shape(), ax);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = out.mutable_data<T>();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t i = 0; i < v.inner; ++i) {
        const int64_t base = o * v.length * v.inner + i;
        T mx = x[base];
        for (int64_t l = 1; l < v.length; ++l) mx = std::max(mx, x[base + l * v.inner]);
        T total = 0;
        for (int64_t l = 0; l < v.length; ++l) {
          const T e = std::exp(x[base + l * v.inner] - mx);
          y[base + l * v.inner] = e;
          total += e;
        }
        for (int64_t l = 0; l < v.length; ++l) y[base + l * v.inner] /= total;
      }
  });
  return record(out, "softmax", {a}, [wout = WeakTensor(out), v](const Tensor& g) {
    const Tensor out = wout.lock();
    Tensor gx = Tensor::zeros(out.shape(), out.dtype());
    dispatch(out.dtype(), [&]<class T>() {
      auto y = out.data<T>();
      auto gs = g.data<T>();
      auto d = gx.mutable_data<T>();
      for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t i = 0; i < v.inner; ++i) {
          const int64_t base = o * v.length * v.inner + i;
          T dot = 0;
          for (int64_t l = 0; l < v.length; ++l) dot += gs[base + l * v.inner] * y[base + l * v.inner];
          for (int64_t l = 0; l < v.length; ++l) {
            const int64_t j = base + l * v.inner;
            d[j] = y[j] * (gs[j] - dot);
          }
        }
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor l2_normalize(const Tensor& a, int axis, double eps) {
  const int ax = normalize_axis(axis, a.rank(), "l2_normalize");
  const AxisView v = axis_view(a.shape(), ax);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  Tensor norms = Tensor::zeros({v.outer * v.inner}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = out.mutable_data<T>();
    auto ns = norms.mutable_data<T>();
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t i = 0; i < v.inner; ++i) {
        const int64_t base = o * v.length * v.inner + i;
        T ss = 0;
        for (int64_t l = 0; l < v.length; ++l) ss += x[base + l * v.inner] * x[base + l * v.inner];
        const T n = std::max(std::sqrt(ss), static_cast<T>(eps));
        ns[o * v.inner + i] = n;
        for (int64_t l = 0; l < v.length; ++l) y[base + l * v.inner] = x[base + l * v.inner] / n;
      }
  });
  return record(out, "l2_normalize", {a}, [wout = WeakTensor(out), norms, v, eps](const Tensor& g) {
    const Tensor out = wout.lock();
    Tensor gx = Tensor::zeros(out.shape(), out.dtype());
    dispatch(out.dtype(), [&]<class T>() {
      auto y = out.data<T>();
      auto ns = norms.data<T>();
      auto gs = g.data<T>();
      auto d = gx.mutable_data<T>();
      for (int64_t o = 0; o < v.outer; ++o)
        for (int64_t i = 0; i < v.inner; ++i) {
          const int64_t base = o * v.length * v.inner + i;
          const T n = ns[o * v.inner + i];
          // Clamped norm is constant, so the projection term vanishes.
          const bool clamped = n <= static_cast<T>(eps);
          T dot = 0;
          if (!clamped)
            for (int64_t l = 0; l < v.length; ++l) dot += gs[base + l * v.inner] * y[base + l * v.inner];
          for (int64_t l = 0; l < v.length; ++l) {
            const int64_t j = base + l * v.inner;
            d[j] = (gs[j] - y[j] * dot) / n;
          }
        }
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor layer_norm_channel(const Tensor& x, const Tensor& gamma, double eps) {
  if (x.rank() != 4) throw ShapeError("layer_norm_channel expects (N,C,H,W), got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.rank() != 1 || gamma.dim(0) != c) {
    throw ShapeError("layer_norm_channel: gamma " + shape_str(gamma.shape()) + " for " +
                     std::to_string(c) + " channels");
  }
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  Tensor normalized = Tensor::zeros(x.shape(), x.dtype());
  Tensor inv_std = Tensor::zeros({n, hw}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto xs = x.data<T>();
    auto gs = gamma.data<T>();
    auto ys = out.mutable_data<T>();
    auto xh = normalized.mutable_data<T>();
    auto rs = inv_std.mutable_data<T>();
    std::vector<T> mu(hw), var(hw);
    for (int64_t b = 0; b < n; ++b) {
      const int64_t base = b * c * hw;
      std::fill(mu.begin(), mu.end(), T(0));
      std::fill(var.begin(), var.end(), T(0));
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) mu[p] += xs[base + ch * hw + p];
      for (int64_t p = 0; p < hw; ++p) mu[p] /= static_cast<T>(c);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) {
          const T d = xs[base + ch * hw + p] - mu[p];
          var[p] += d * d;
        }
      for (int64_t p = 0; p < hw; ++p) rs[b * hw + p] = T(1) / std::sqrt(var[p] / static_cast<T>(c) + static_cast<T>(eps));
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) {
          const int64_t j = base + ch * hw + p;
          xh[j] = (xs[j] - mu[p]) * rs[b * hw + p];
          ys[j] = xh[j] * gs[ch];
        }
    }
  });
  return record(out, "layer_norm_channel", {x, gamma},
                [normalized, inv_std, gamma, n, c, hw](const Tensor& g) {
    Tensor gx = Tensor::zeros(normalized.shape(), normalized.dtype());
    Tensor gg = Tensor::zeros(gamma.shape(), gamma.dtype());
    dispatch(g.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto xh = normalized.data<T>();
      auto rs = inv_std.data<T>();
      auto gam = gamma.data<T>();
      auto dx = gx.mutable_data<T>();
      auto dg = gg.mutable_data<T>();
      std::vector<T> mean_d(hw), mean_dx(hw);
      for (int64_t b = 0; b < n; ++b) {
        const int64_t base = b * c * hw;
        std::fill(mean_d.begin(), mean_d.end(), T(0));
        std::fill(mean_dx.begin(), mean_dx.end(), T(0));
        for (int64_t ch = 0; ch < c; ++ch) {
          T acc = 0;
          for (int64_t p = 0; p < hw; ++p) {
            const int64_t j = base + ch * hw + p;
            acc += gs[j] * xh[j];
            const T d = gs[j] * gam[ch];
            mean_d[p] += d;
            mean_dx[p] += d * xh[j];
          }
          dg[ch] += acc;
        }
        for (int64_t p = 0; p < hw; ++p) {
          mean_d[p] /= static_cast<T>(c);
          mean_dx[p] /= static_cast<T>(c);
        }
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t p = 0; p < hw; ++p) {
            const int64_t j = base + ch * hw + p;
            dx[j] = rs[b * hw + p] * (gs[j] * gam[ch] - mean_d[p] - xh[j] * mean_dx[p]);
          }
      }
    });
    return std::vector<Tensor>{gx, gg};
  });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers

Tensor clamp(const Tensor& a, double lo, double hi) {
  return map_unary(a, [lo, hi](auto x) {
    using T = decltype(x);
    return std::clamp(x, static_cast<T>(lo), static_cast<T>(hi));
  });
}

bool all_finite(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    for (T v : a.data<T>())
      if (!std::isfinite(v)) return false;
    return true;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  const auto x = a.to_vector();
  const auto y = b.to_vector();
  for (size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace dpm
