#include "dpm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace dpm {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::kFloat64 ? "float64" : "float32"; }

namespace {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dtype) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  const int64_t n = shape_numel(shape);
  debug::note_allocation(n);
  if (dtype == DType::kFloat64) {
    impl->f64.assign(static_cast<size_t>(n), 0.0);
  } else {
    impl->f32.assign(static_cast<size_t>(n), 0.0f);
  }
  return impl;
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(make_impl(shape, dtype)); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_vector(const Shape& shape, const std::vector<double>& values, DType dtype) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    std::transform(values.begin(), values.end(), d.begin(),
                   [](double v) { return static_cast<T>(v); });
  });
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<size_t>(a)];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->dtype;
}

void Tensor::check_dtype(DType expected) const {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (impl_->dtype != expected) {
    throw ContractError(std::string("dtype mismatch: tensor is ") + dtype_name(impl_->dtype) +
                        ", accessed as " + dtype_name(expected));
  }
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

double Tensor::at(int64_t i) const {
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[static_cast<size_t>(i)]); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (impl_->grad_fn) throw ContractError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return Tensor();
  return Tensor(impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(impl);
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out = zeros(shape(), target);
  dispatch(dtype(), [&]<class S>() {
    dispatch(target, [&]<class D>() {
      auto src = data<S>();
      auto dst = out.mutable_data<D>();
      for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::copy_from(const Tensor& other) {
  if (shape() != other.shape() || dtype() != other.dtype()) {
    throw ShapeError("copy_from: " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  if (impl_->grad_fn) throw ContractError("copy_from on a tensor with history");
  impl_->f32 = other.impl_->f32;
  impl_->f64 = other.impl_->f64;
}

namespace {

void add_into(TensorImpl& dst, const TensorImpl& src) {
  dispatch(dst.dtype, [&]<class T>() {
    auto& d = dst.buffer<T>();
    const auto& s = const_cast<TensorImpl&>(src).buffer<T>();
    for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

Tensor summed(const Tensor& a, const Tensor& b) {
  Tensor out = a.clone();
  add_into(*out.impl(), *b.impl());
  return out;
}

}  // namespace

void Tensor::backward() const {
  if (!impl_) throw ContractError("backward on undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) throw ContractError("backward on a tensor that does not require grad");

  NoGradGuard no_grad;

  // Post-order DFS gives inputs before consumers; walk it in reverse.
  std::vector<TensorImpl*> order;
  std::unordered_map<TensorImpl*, Tensor> handles;
  {
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    handles.emplace(impl_.get(), *this);
    while (!stack.empty()) {
      auto& [node_impl, next] = stack.back();
      const Node* fn = node_impl->grad_fn.get();
      if (fn && next < fn->inputs.size()) {
        const Tensor& in = fn->inputs[next++];
        if (in.requires_grad() && visited.insert(in.impl()).second) {
          handles.emplace(in.impl(), in);
          stack.emplace_back(in.impl(), 0);
        }
        continue;
      }
      order.push_back(node_impl);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorImpl*, Tensor> grads;
  grads.emplace(impl_.get(), Tensor::full(shape(), 1.0, dtype()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node_impl = *it;
    auto g_it = grads.find(node_impl);
    if (g_it == grads.end()) continue;
    Tensor g = g_it->second;
    grads.erase(g_it);
    if (node_impl->grad_fn) {
      const Node& fn = *node_impl->grad_fn;
      std::vector<Tensor> input_grads = fn.backward(g);
      for (size_t i = 0; i < fn.inputs.size() && i < input_grads.size(); ++i) {
        const Tensor& in = fn.inputs[i];
        const Tensor& ig = input_grads[i];
        if (!ig.defined() || !in.requires_grad()) continue;
        if (ig.shape() != in.shape()) {
          throw ContractError(fn.name + " backward produced gradient " + shape_str(ig.shape()) +
                              " for input " + shape_str(in.shape()));
        }
        auto [slot, inserted] = grads.emplace(in.impl(), ig);
        if (!inserted) slot->second = summed(slot->second, ig);
      }
    } else if (node_impl->requires_grad) {
      if (!node_impl->grad) {
        node_impl->grad = g.clone().impl_ptr();
      } else {
        add_into(*node_impl->grad, *g.impl());
      }
    }
  }
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool value) { g_grad_enabled = value; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

Tensor record(Tensor result, const char* name, std::vector<Tensor> inputs,
              std::function<std::vector<Tensor>(const Tensor&)> backward) {
  if (!GradMode::enabled() || !any_requires_grad(inputs)) return result;
  auto node = std::make_shared<Node>();
  node->name = name;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  result.impl()->grad_fn = std::move(node);
  result.impl()->requires_grad = true;
  return result;
}

namespace debug {

namespace {
thread_local AllocationProbe* g_probe = nullptr;
}

AllocationProbe::AllocationProbe() : previous_(g_probe) { g_probe = this; }
AllocationProbe::~AllocationProbe() { g_probe = previous_; }
int64_t AllocationProbe::peak_numel() const { return peak_; }

void note_allocation(int64_t numel) {
  for (AllocationProbe* p = g_probe; p; p = p->previous_) p->peak_ = std::max(p->peak_, numel);
}

}  // namespace debug

}  // namespace dpm
