#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dpm/tensor.hpp"

namespace dpm {

// A learnable leaf tensor with its dot-separated path in the model.
struct Parameter {
  std::string name;
  Tensor tensor;
};

std::string join_name(const std::string& prefix, const std::string& name);

// Total scalar count over unique parameter tensors.
int64_t count_parameters(const std::vector<Parameter>& params);

// Deterministic portable random source: the bit stream of mt19937_64 is fixed
// by the standard, and the conversions below do not depend on the library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double normal();   // standard normal, Box-Muller
  uint64_t below(uint64_t n);

 private:
  std::mt19937_64 engine_;
};

class Initializer {
 public:
  Initializer(uint64_t seed, DType dtype) : rng_(seed), dtype_(dtype) {}

  // Normal(0, std) truncated to +-2 std by resampling.
  Tensor trunc_normal(const Shape& shape, double std);
  Tensor constant(const Shape& shape, double value);
  DType dtype() const { return dtype_; }

 private:
  Rng rng_;
  DType dtype_;
};

// Bias-free convolution layer with "same" padding.
struct Conv2d {
  Tensor weight;  // (cout, cin / groups, k, k)
  int padding = 0;
  int groups = 1;

  static Conv2d make(Initializer& init, int64_t cin, int64_t cout, int kernel, int groups = 1);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

}  // namespace dpm
