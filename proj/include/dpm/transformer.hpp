#pragma once

#include <string>
#include <vector>

#include "dpm/nn.hpp"
#include "dpm/tensor.hpp"

namespace dpm {

// Multi-dconv-head transposed attention. Attention is computed between
// channels, so the map per head is (C/heads) x (C/heads) whatever H x W is.
struct MDTAParams {
  Conv2d qkv_pointwise;  // 1x1, C -> 3C
  Conv2d qkv_depthwise;  // 3x3 depthwise over 3C
  Tensor alpha;          // (heads), per-head temperature, initialized to 1
  Conv2d out_pointwise;  // 1x1, C -> C
  int heads = 1;
  bool qk_l2_normalize = true;

  static MDTAParams make(Initializer& init, int64_t channels, int heads, bool qk_l2_normalize = true);
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

// If `attention` is non-null it receives the softmax map, shape (N, heads, C/heads, C/heads).
Tensor mdta_forward(const Tensor& x, const MDTAParams& p, Tensor* attention = nullptr);

// Gated-dconv feed-forward network.
struct GDFNParams {
  Conv2d expand_pointwise;   // 1x1, C -> 2 * hidden
  Conv2d expand_depthwise;   // 3x3 depthwise over 2 * hidden
  Conv2d project_pointwise;  // 1x1, hidden -> C
  double gamma = 2.66;
  int64_t hidden = 0;

  static GDFNParams make(Initializer& init, int64_t channels, double gamma);
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

int64_t gdfn_hidden_width(int64_t channels, double gamma);

Tensor gdfn_forward(const Tensor& x, const GDFNParams& p);

struct TransformerBlock {
  Tensor norm1;  // (C), layer-norm scale
  Tensor norm2;
  MDTAParams mdta;
  GDFNParams gdfn;

  static TransformerBlock make(Initializer& init, int64_t channels, int heads, double gamma,
                               bool qk_l2_normalize = true);
  void collect(const std::string& prefix, std::vector<Parameter>& out) const;
};

// y = x + MDTA(LN(x)); z = y + GDFN(LN(y)).
Tensor block_forward(const Tensor& x, const TransformerBlock& b);

}  // namespace dpm
