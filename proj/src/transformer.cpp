#include "dpm/transformer.hpp"

#include <cmath>

#include "dpm/ops.hpp"

namespace dpm {

MDTAParams MDTAParams::make(Initializer& init, int64_t channels, int heads, bool qk_l2_normalize) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("MDTA: " + std::to_string(channels) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MDTAParams p;
  p.qkv_pointwise = Conv2d::make(init, channels, 3 * channels, 1);
  p.qkv_depthwise = Conv2d::make(init, 3 * channels, 3 * channels, 3, static_cast<int>(3 * channels));
  p.alpha = init.constant({heads}, 1.0);
  p.out_pointwise = Conv2d::make(init, channels, channels, 1);
  p.heads = heads;
  p.qk_l2_normalize = qk_l2_normalize;
  return p;
}

void MDTAParams::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  qkv_pointwise.collect(join_name(prefix, "qkv_pointwise"), out);
  qkv_depthwise.collect(join_name(prefix, "qkv_depthwise"), out);
  out.push_back({join_name(prefix, "alpha"), alpha});
  out_pointwise.collect(join_name(prefix, "out_pointwise"), out);
}

Tensor mdta_forward(const Tensor& x, const MDTAParams& p, Tensor* attention) {
  if (x.rank() != 4) throw ShapeError("mdta_forward expects (N,C,H,W), got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % p.heads != 0) {
    throw ConfigError("MDTA: " + std::to_string(c) + " channels not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  const int64_t per_head = c / p.heads;
  const Shape head_shape{n, p.heads, per_head, h * w};

  const Tensor qkv = p.qkv_depthwise(p.qkv_pointwise(x));
  const auto parts = split(qkv, 1, 3);
  Tensor q = reshape(parts[0], head_shape);
  Tensor k = reshape(parts[1], head_shape);
  const Tensor v = reshape(parts[2], head_shape);
  if (p.qk_l2_normalize) {
    q = l2_normalize(q, -1);
    k = l2_normalize(k, -1);
  }
  // (N, heads, c, c): channel-by-channel similarities scaled by 1/alpha.
  const Tensor scores = mul_dim1(matmul(k, q, false, true), reciprocal(p.alpha));
  const Tensor attn = softmax(scores, -1);
  if (attention) *attention = attn;
  const Tensor mixed = reshape(matmul(attn, v), {n, c, h, w});
  return p.out_pointwise(mixed);
}

int64_t gdfn_hidden_width(int64_t channels, double gamma) {
  return static_cast<int64_t>(std::llround(gamma * static_cast<double>(channels)));
}

GDFNParams GDFNParams::make(Initializer& init, int64_t channels, double gamma) {
  GDFNParams p;
  p.gamma = gamma;
  p.hidden = gdfn_hidden_width(channels, gamma);
  if (p.hidden < 1) throw ConfigError("GDFN: expansion factor yields empty hidden width");
  p.expand_pointwise = Conv2d::make(init, channels, 2 * p.hidden, 1);
  p.expand_depthwise = Conv2d::make(init, 2 * p.hidden, 2 * p.hidden, 3, static_cast<int>(2 * p.hidden));
  p.project_pointwise = Conv2d::make(init, p.hidden, channels, 1);
  return p;
}

void GDFNParams::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  expand_pointwise.collect(join_name(prefix, "expand_pointwise"), out);
  expand_depthwise.collect(join_name(prefix, "expand_depthwise"), out);
  project_pointwise.collect(join_name(prefix, "project_pointwise"), out);
}

Tensor gdfn_forward(const Tensor& x, const GDFNParams& p) {
  const Tensor expanded = p.expand_depthwise(p.expand_pointwise(x));
  const auto branches = split(expanded, 1, 2);
  return p.project_pointwise(mul(gelu(branches[0]), branches[1]));
}

TransformerBlock TransformerBlock::make(Initializer& init, int64_t channels, int heads, double gamma,
                                        bool qk_l2_normalize) {
  TransformerBlock b;
  b.norm1 = init.constant({channels}, 1.0);
  b.mdta = MDTAParams::make(init, channels, heads, qk_l2_normalize);
  b.norm2 = init.constant({channels}, 1.0);
  b.gdfn = GDFNParams::make(init, channels, gamma);
  return b;
}

void TransformerBlock::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  out.push_back({join_name(prefix, "norm1.weight"), norm1});
  mdta.collect(join_name(prefix, "mdta"), out);
  out.push_back({join_name(prefix, "norm2.weight"), norm2});
  gdfn.collect(join_name(prefix, "gdfn"), out);
}

Tensor block_forward(const Tensor& x, const TransformerBlock& b) {
  const Tensor y = add(x, mdta_forward(layer_norm_channel(x, b.norm1), b.mdta));
  return add(y, gdfn_forward(layer_norm_channel(y, b.norm2), b.gdfn));
}

}  // namespace dpm
