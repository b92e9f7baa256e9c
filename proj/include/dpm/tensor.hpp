#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dpm/errors.hpp"

namespace dpm {

enum class DType { kFloat32, kFloat64 };

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

// Runs f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::kFloat64) return f.template operator()<double>();
  return f.template operator()<float>();
}

class Tensor;
struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::kFloat32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;
  std::shared_ptr<Node> grad_fn;

  template <class T>
  std::vector<T>& buffer() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }
};

// Dense row-major N-D array with optional reverse-mode gradient tracking.
//
// Tensor is a shared handle: copies alias the same storage. Values are
// treated as immutable once an op has consumed them; only leaves (parameters)
// are mutated in place, by the optimizer, outside any recorded graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dtype = DType::kFloat32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::kFloat32);
  static Tensor scalar(double value, DType dtype = DType::kFloat32);
  static Tensor from_vector(const Shape& shape, const std::vector<double>& values,
                            DType dtype = DType::kFloat32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;  // negative axes count from the end
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    check_dtype(dtype_of<T>());
    return impl_->buffer<T>();
  }
  template <class T>
  std::span<T> mutable_data() {
    check_dtype(dtype_of<T>());
    return impl_->buffer<T>();
  }

  double item() const;
  double at(int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  Tensor grad() const;  // undefined when no gradient has been accumulated
  void zero_grad();

  // Reverse-mode sweep from this scalar; accumulates into every reachable
  // requires_grad leaf.
  void backward() const;

  Tensor detach() const;  // same values, no history, requires_grad=false
  Tensor clone() const;   // deep copy, no history
  Tensor to(DType dtype) const;

  // Overwrites values in place (shape and dtype must match). Only legal on
  // tensors without history.
  void copy_from(const Tensor& other);

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  void check_dtype(DType expected) const;
  std::shared_ptr<TensorImpl> impl_;
};

// Recorded operation on the autodiff tape.
// Non-owning handle for backward closures that need their own node's output.
// Capturing the output by value would form a cycle through grad_fn.
class WeakTensor {
 public:
  explicit WeakTensor(const Tensor& t) : impl_(t.impl_ptr()) {}
  Tensor lock() const { return Tensor(impl_.lock()); }

 private:
  std::weak_ptr<TensorImpl> impl_;
};

struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  // Returns one gradient per input; undefined entries mean "no contribution".
  std::function<std::vector<Tensor>(const Tensor& grad_output)> backward;
};

class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool value);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Attaches a backward node to `result` when grad mode is on and any input
// requires grad. Returns `result` for chaining.
Tensor record(Tensor result, const char* name, std::vector<Tensor> inputs,
              std::function<std::vector<Tensor>(const Tensor&)> backward);

bool any_requires_grad(const std::vector<Tensor>& inputs);

namespace debug {

// Records the largest tensor (by element count) allocated while alive.
class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;
  int64_t peak_numel() const;

 private:
  AllocationProbe* previous_;
  int64_t peak_ = 0;
  friend void note_allocation(int64_t numel);
};

void note_allocation(int64_t numel);

}  // namespace debug

}  // namespace dpm
