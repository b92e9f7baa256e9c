#include "dpm/losses.hpp"

#include <cmath>

#include "dpm/image_ops.hpp"
#include "dpm/ops.hpp"

namespace dpm {

void LossWeights::validate() const {
  std::vector<std::string> problems;
  if (!(lambda1 >= 0)) problems.push_back("lambda1 must be >= 0");
  if (!(lambda2 >= 0)) problems.push_back("lambda2 must be >= 0");
  if (!(lambda3 >= 0)) problems.push_back("lambda3 must be >= 0");
  if (!(epsilon > 0)) problems.push_back("epsilon must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid loss weights:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

namespace {

void require_match(const Tensor& pred, const Tensor& target, const char* op) {
  if (pred.shape() != target.shape()) {
    throw ContractError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
  }
}

}  // namespace

Tensor charbonnier(const Tensor& pred, const Tensor& target, double eps) {
  require_match(pred, target, "charbonnier");
  return mean(sqrt(add_scalar(square(sub(pred, target)), eps * eps)));
}

Tensor edge_loss(const Tensor& pred, const Tensor& target, double eps) {
  require_match(pred, target, "edge_loss");
  return charbonnier(laplacian(target), laplacian(pred), eps);
}

Tensor fft_loss(const SupervisionSet& set) {
  Tensor total;
  for (const SupervisedPair& p : set.pairs) {
    require_match(p.prediction, p.target, "fft_loss");
    // The DFT is linear, so the spectrum difference is the spectrum of the difference.
    const Spectrum diff = dft2(sub(p.prediction, p.target));
    const double t_k = 2.0 * static_cast<double>(p.prediction.numel());
    const Tensor term = mul_scalar(add(sum(abs(diff.re)), sum(abs(diff.im))), p.weight / t_k);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) return Tensor::scalar(0.0);
  return total;
}

LossTerms total_loss(const SupervisionSet& set, const LossWeights& w) {
  w.validate();
  if (set.pairs.empty()) throw ContractError("total_loss: empty supervision set");
  Tensor char_sum, edge_sum;
  for (const SupervisedPair& p : set.pairs) {
    const Tensor c = mul_scalar(charbonnier(p.prediction, p.target, w.epsilon), p.weight);
    const Tensor e = mul_scalar(edge_loss(p.prediction, p.target, w.epsilon), p.weight);
    char_sum = char_sum.defined() ? add(char_sum, c) : c;
    edge_sum = edge_sum.defined() ? add(edge_sum, e) : e;
  }
  LossTerms terms;
  terms.charbonnier = char_sum;
  terms.edge = edge_sum;
  terms.fft = fft_loss(set);
  terms.total = add(add(mul_scalar(char_sum, w.lambda1), mul_scalar(edge_sum, w.lambda2)),
                    mul_scalar(terms.fft, w.lambda3));
  return terms;
}

SupervisionSet build_supervision(const ModelOutput& out, const Tensor& clean, double branch_weight) {
  SupervisionSet set;
  set.pairs.push_back({"backbone", out.derained, clean, 1.0});
  if (out.mp_level2.defined()) {
    set.pairs.push_back({"mp_level2", out.mp_level2, clean, branch_weight});
    const PatchGrid targets = split_patches(clean, out.mp_level3.rows, out.mp_level3.cols);
    for (size_t j = 0; j < out.mp_level3.patches.size(); ++j) {
      set.pairs.push_back({"mp_level3." + std::to_string(j), out.mp_level3.patches[j], targets.patches[j],
                           branch_weight});
    }
  }
  if (out.c2f_half.defined()) {
    const Tensor half_target = gaussian_downsample(clean);
    set.pairs.push_back({"c2f_half", out.c2f_half, half_target, branch_weight});
    set.pairs.push_back({"c2f_quarter", out.c2f_quarter, gaussian_downsample(half_target), branch_weight});
  }
  return set;
}

}  // namespace dpm
