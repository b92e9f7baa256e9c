#pragma once

#include <string>
#include <vector>

#include "dpm/model.hpp"
#include "dpm/tensor.hpp"

namespace dpm {

struct LossWeights {
  double lambda1 = 1.0;   // Charbonnier
  double lambda2 = 0.05;  // Laplacian edge
  double lambda3 = 0.01;  // frequency-domain L1
  double epsilon = 1e-3;  // Charbonnier smoothing

  void validate() const;
};

struct SupervisedPair {
  std::string label;
  Tensor prediction;
  Tensor target;
  double weight = 1.0;
};

struct SupervisionSet {
  std::vector<SupervisedPair> pairs;
};

// mean(sqrt((pred - target)^2 + eps^2))
Tensor charbonnier(const Tensor& pred, const Tensor& target, double eps);

// Charbonnier distance between Laplacian edge maps.
Tensor edge_loss(const Tensor& pred, const Tensor& target, double eps);

// sum_k w_k / t_k * ||F(pred_k) - F(target_k)||_1 over real and imaginary
// parts, t_k = 2 * numel(pred_k).
Tensor fft_loss(const SupervisionSet& set);

struct LossTerms {
  Tensor total;
  Tensor charbonnier;  // weighted sum over pairs, before lambda
  Tensor edge;
  Tensor fft;
};

LossTerms total_loss(const SupervisionSet& set, const LossWeights& w);

// Backbone output against the clean image (weight 1) plus every enabled
// branch output against the clean image resampled to its scale.
SupervisionSet build_supervision(const ModelOutput& out, const Tensor& clean, double branch_weight = 1.0);

}  // namespace dpm
