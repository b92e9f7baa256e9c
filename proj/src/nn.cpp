#include "dpm/nn.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

#include "dpm/ops.hpp"

namespace dpm {

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

int64_t count_parameters(const std::vector<Parameter>& params) {
  std::unordered_set<const TensorImpl*> seen;
  int64_t total = 0;
  for (const Parameter& p : params) {
    if (seen.insert(p.tensor.impl()).second) total += p.tensor.numel();
  }
  return total;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::below(uint64_t n) {
  // Rejection sampling keeps the result unbiased and platform independent.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return r % n;
}

Tensor Initializer::trunc_normal(const Shape& shape, double std) {
  const int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<size_t>(n));
  for (double& v : values) {
    double z = rng_.normal();
    while (std::abs(z) > 2.0) z = rng_.normal();
    v = z * std;
  }
  Tensor t = Tensor::from_vector(shape, values, dtype_);
  t.set_requires_grad(true);
  return t;
}

Tensor Initializer::constant(const Shape& shape, double value) {
  Tensor t = Tensor::full(shape, value, dtype_);
  t.set_requires_grad(true);
  return t;
}

Conv2d Conv2d::make(Initializer& init, int64_t cin, int64_t cout, int kernel, int groups) {
  Conv2d c;
  c.weight = init.trunc_normal({cout, cin / groups, kernel, kernel}, 0.02);
  c.padding = kernel / 2;
  c.groups = groups;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return conv2d(x, weight, std::nullopt, 1, padding, groups);
}

void Conv2d::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
}

}  // namespace dpm
