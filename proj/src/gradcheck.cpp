#include "dpm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dpm/errors.hpp"
#include "dpm/image_ops.hpp"
#include "dpm/losses.hpp"
#include "dpm/model.hpp"
#include "dpm/nn.hpp"
#include "dpm/ops.hpp"
#include "dpm/transformer.hpp"
#include "dpm/unet.hpp"

namespace dpm {

double max_gradient_error(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                          const std::vector<std::vector<int64_t>>& entries, double step) {
  if (!entries.empty() && entries.size() != inputs.size()) {
    throw ContractError("max_gradient_error: entries must be given for every input");
  }
  for (Tensor x : inputs) {
    if (x.dtype() != DType::kFloat64) throw ContractError("max_gradient_error: inputs must be 64-bit");
    if (!x.is_leaf() || !x.requires_grad()) throw ContractError("max_gradient_error: inputs must be grad leaves");
    x.zero_grad();
  }
  f().backward();

  double worst = 0.0;
  NoGradGuard no_grad;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor x = inputs[i];
    const Tensor g = x.grad();
    std::vector<int64_t> idx;
    if (entries.empty()) {
      idx.resize(size_t(x.numel()));
      for (int64_t k = 0; k < x.numel(); ++k) idx[size_t(k)] = k;
    } else {
      idx = entries[i];
    }
    for (int64_t k : idx) {
      double* v = x.mutable_data<double>().data() + k;
      const double orig = *v;
      *v = orig + step;
      const double fp = f().item();
      *v = orig - step;
      const double fm = f().item();
      *v = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = g.defined() ? g.data<double>()[size_t(k)] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

bool GradcheckSuite::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed(); });
}

double GradcheckSuite::max_rel_err() const {
  double m = 0.0;
  for (const auto& c : cases) m = std::max(m, c.max_rel_err);
  return m;
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"tensor", "mdta", "gdfn", "unet", "losses", "model"};
  return names;
}

namespace {

constexpr DType f64 = DType::kFloat64;

class SuiteBuilder {
 public:
  SuiteBuilder(const std::string& module, uint64_t seed) : rng_(seed) { suite_.module = module; }

  // Leaf with entries uniform in [lo, hi); |x| >= min_abs when requested.
  Tensor leaf(const Shape& shape, double lo = -1.0, double hi = 1.0, double min_abs = 0.0) {
    std::vector<double> v(size_t(shape_numel(shape)));
    for (double& x : v) {
      do {
        x = lo + (hi - lo) * rng_.uniform();
      } while (std::abs(x) < min_abs);
    }
    Tensor t = Tensor::from_vector(shape, v, f64);
    t.set_requires_grad(true);
    return t;
  }

  // Fixed random projection weights: checking <out, r> exercises every output entry.
  Tensor probe(const Shape& shape) {
    std::vector<double> v(size_t(shape_numel(shape)));
    for (double& x : v) x = rng_.normal();
    return Tensor::from_vector(shape, v, f64);
  }

  // Scalar objective <op(), r> with r drawn on first use.
  std::function<Tensor()> projected(std::function<Tensor()> op) {
    Tensor r;
    {
      NoGradGuard no_grad;
      r = probe(op().shape());
    }
    return [op, r] { return sum(mul(op(), r)); };
  }

  void check(const std::string& name, double threshold, const std::function<Tensor()>& objective,
             const std::vector<Tensor>& inputs, const std::vector<std::vector<int64_t>>& entries = {}) {
    GradcheckCase c;
    c.name = name;
    c.threshold = threshold;
    c.max_rel_err = max_gradient_error(objective, inputs, entries);
    if (entries.empty()) {
      for (const auto& x : inputs) c.entries += x.numel();
    } else {
      for (const auto& e : entries) c.entries += int64_t(e.size());
    }
    suite_.cases.push_back(c);
  }

  void op(const std::string& name, const std::function<Tensor()>& fn, const std::vector<Tensor>& inputs,
          double threshold = kOpTolerance) {
    check(name, threshold, projected(fn), inputs);
  }

  // Up to `per_tensor` sampled entries of every parameter, plus `fraction` of all entries.
  std::vector<std::vector<int64_t>> sample(const std::vector<Tensor>& tensors, double fraction, int per_tensor) {
    std::vector<std::vector<int64_t>> out;
    for (const auto& t : tensors) {
      const int64_t n = t.numel();
      const int64_t want = std::min<int64_t>(n, std::max<int64_t>(per_tensor, std::llround(fraction * double(n))));
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t k = 0; k < n; ++k) all[size_t(k)] = k;
      for (int64_t k = 0; k < want; ++k) std::swap(all[size_t(k)], all[size_t(k) + rng_.below(uint64_t(n - k))]);
      all.resize(size_t(want));
      std::sort(all.begin(), all.end());
      out.push_back(all);
    }
    return out;
  }

  Rng& rng() { return rng_; }
  GradcheckSuite take() { return std::move(suite_); }

 private:
  Rng rng_;
  GradcheckSuite suite_;
};

std::vector<Tensor> tensors_of(const std::vector<Parameter>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void tensor_suite(SuiteBuilder& s) {
  const Shape sh{2, 3, 4, 4};
  {
    Tensor a = s.leaf(sh), b = s.leaf(sh), c = s.leaf(sh, 0.5, 2.0);
    s.op("add", [=] { return add(a, b); }, {a, b});
    s.op("sub", [=] { return sub(a, b); }, {a, b});
    s.op("mul", [=] { return mul(a, b); }, {a, b});
    s.op("div", [=] { return div(a, c); }, {a, c});
    s.op("add_scalar", [=] { return add_scalar(a, 0.3); }, {a});
    s.op("mul_scalar", [=] { return mul_scalar(a, -1.7); }, {a});
    s.op("neg", [=] { return neg(a); }, {a});
    s.op("square", [=] { return square(a); }, {a});
    s.op("sqrt", [=] { return sqrt(c); }, {c});
    s.op("reciprocal", [=] { return reciprocal(c); }, {c});
  }
  {
    Tensor a = s.leaf({2, 3, 4, 4}, -1.0, 1.0, 0.05);
    s.op("abs", [=] { return abs(a); }, {a});
    Tensor g = s.leaf({2, 3, 4, 4}, -3.0, 3.0);
    s.op("gelu", [=] { return gelu(g); }, {g});
    Tensor pts = Tensor::from_vector({3}, {-1.0, 0.5, 2.0}, f64);
    pts.set_requires_grad(true);
    s.op("gelu_points", [=] { return gelu(pts); }, {pts});
    Tensor w = s.leaf({3});
    s.op("mul_dim1", [=] { return mul_dim1(a, w); }, {a, w});
    s.check("sum", kOpTolerance, [=] { return sum(a); }, {a});
    s.check("mean", kOpTolerance, [=] { return mean(a); }, {a});
    s.op("reshape", [=] { return reshape(a, {6, 16}); }, {a});
    s.op("transpose", [=] { return transpose(a, 1, 3); }, {a});
  }
  {
    Tensor a = s.leaf({2, 3, 4}), b = s.leaf({2, 4, 5}), at = s.leaf({2, 4, 3}), bt = s.leaf({2, 5, 4});
    s.op("matmul", [=] { return matmul(a, b); }, {a, b});
    s.op("matmul_ta", [=] { return matmul(at, b, true, false); }, {at, b});
    s.op("matmul_tb", [=] { return matmul(a, bt, false, true); }, {a, bt});
    s.op("matmul_ta_tb", [=] { return matmul(at, bt, true, true); }, {at, bt});
  }
  {
    Tensor a = s.leaf({1, 2, 4, 4}), b = s.leaf({1, 3, 4, 4}), c = s.leaf({1, 2, 4, 2});
    s.op("concat_channel", [=] { return concat({a, b}, 1); }, {a, b});
    s.op("concat_width", [=] { return concat({a, c}, 3); }, {a, c});
    s.op("slice", [=] { return slice(b, 2, 1, 2); }, {b});
    s.op("split", [=] {
      auto parts = split(b, 3, 2);
      return sub(mul_scalar(parts[0], 2.0), parts[1]);
    }, {b});
  }
  {
    Tensor a = s.leaf({2, 3, 5}, -2.0, 2.0);
    s.op("softmax_last", [=] { return softmax(a, -1); }, {a});
    s.op("softmax_mid", [=] { return softmax(a, 1); }, {a});
    s.op("l2_normalize", [=] { return l2_normalize(a, -1); }, {a});
    Tensor x = s.leaf({2, 4, 3, 3}), gamma = s.leaf({4}, 0.5, 1.5);
    s.op("layer_norm_channel", [=] { return layer_norm_channel(x, gamma); }, {x, gamma});
  }
  {
    Tensor x = s.leaf({1, 2, 5, 5}), w = s.leaf({3, 2, 3, 3}), b = s.leaf({3});
    s.op("conv2d", [=] { return conv2d(x, w, b, 1, 1, 1); }, {x, w, b});
    s.op("conv2d_stride2", [=] { return conv2d(x, w, std::nullopt, 2, 1, 1); }, {x, w});
    Tensor x4 = s.leaf({1, 4, 5, 5}), wg = s.leaf({4, 2, 3, 3}), wd = s.leaf({4, 1, 3, 3}), wp = s.leaf({3, 4, 1, 1});
    s.op("conv2d_groups", [=] { return conv2d(x4, wg, std::nullopt, 1, 1, 2); }, {x4, wg});
    s.op("conv2d_depthwise", [=] { return conv2d(x4, wd, std::nullopt, 1, 1, 4); }, {x4, wd});
    s.op("conv2d_pointwise", [=] { return conv2d(x4, wp, std::nullopt, 1, 0, 1); }, {x4, wp});
  }
  {
    Tensor x = s.leaf({1, 2, 6, 6}), y = s.leaf({1, 8, 2, 2});
    s.op("pad_reflect", [=] { return pad_reflect(x, 2); }, {x});
    s.op("pixel_unshuffle", [=] { return pixel_unshuffle(x, 2); }, {x});
    s.op("pixel_shuffle", [=] { return pixel_shuffle(y, 2); }, {y});
  }
  {
    Tensor x = s.leaf({1, 2, 4, 4});
    Tensor rr, ri;
    {
      NoGradGuard no_grad;
      rr = s.probe({1, 2, 4, 4});
      ri = s.probe({1, 2, 4, 4});
    }
    s.check("dft2", kOpTolerance, [=] {
      const Spectrum sp = dft2(x);
      return add(sum(mul(sp.re, rr)), sum(mul(sp.im, ri)));
    }, {x});
  }
  {
    Tensor x = s.leaf({1, 3, 8, 8}), small = s.leaf({1, 3, 3, 3});
    s.op("gaussian_downsample", [=] { return gaussian_downsample(x); }, {x});
    s.op("upsample_bilinear_x2", [=] { return upsample_bilinear(small, 2); }, {small});
    s.op("upsample_bilinear_x4", [=] { return upsample_bilinear(small, 4); }, {small});
    s.op("laplacian", [=] { return laplacian(x); }, {x});
    s.op("split_merge_patches", [=] {
      PatchGrid g = split_patches(x, 2, 2);
      g.patches[1] = mul_scalar(g.patches[1], 3.0);
      return merge_patches(g);
    }, {x});
    s.op("rgb_to_y", [=] { return rgb_to_y(x); }, {x});
  }
}

MDTAParams small_mdta(Initializer& init, std::vector<Parameter>& params) {
  MDTAParams p = MDTAParams::make(init, 4, 2);
  p.collect("mdta", params);
  return p;
}

void mdta_suite(SuiteBuilder& s) {
  Initializer init(s.rng().next(), f64);
  std::vector<Parameter> params;
  MDTAParams p = small_mdta(init, params);
  // Larger weights than the default init keep the attention map far from uniform.
  for (auto& prm : params) {
    if (prm.name.find("alpha") != std::string::npos) continue;
    Tensor t = prm.tensor;
    for (double& v : t.mutable_data<double>()) v *= 20.0;
  }
  Tensor x = s.leaf({1, 4, 5, 5});
  auto inputs = tensors_of(params);
  inputs.insert(inputs.begin(), x);
  s.check("mdta_forward", kCompositeTolerance, s.projected([=] { return mdta_forward(x, p); }), inputs);
  MDTAParams raw = p;
  raw.qk_l2_normalize = false;
  s.check("mdta_forward_unnormalized", kCompositeTolerance, s.projected([=] { return mdta_forward(x, raw); }),
          inputs);
}

void gdfn_suite(SuiteBuilder& s) {
  Initializer init(s.rng().next(), f64);
  std::vector<Parameter> params;
  GDFNParams g = GDFNParams::make(init, 4, 2.66);
  g.collect("gdfn", params);
  for (auto& prm : params) {
    Tensor t = prm.tensor;
    for (double& v : t.mutable_data<double>()) v *= 20.0;
  }
  Tensor x = s.leaf({1, 4, 5, 5});
  auto inputs = tensors_of(params);
  inputs.insert(inputs.begin(), x);
  s.check("gdfn_forward", kCompositeTolerance, s.projected([=] { return gdfn_forward(x, g); }), inputs);

  std::vector<Parameter> mp;
  MDTAParams m = small_mdta(init, mp);
  Tensor y = s.leaf({1, 4, 5, 5});
  s.check("mdta_then_gdfn", kCompositeTolerance, s.projected([=] { return gdfn_forward(mdta_forward(y, m), g); }),
          {y});
}

void unet_suite(SuiteBuilder& s) {
  Initializer init(s.rng().next(), f64);
  {
    std::vector<Parameter> params;
    TransformerBlock b = TransformerBlock::make(init, 4, 2, 2.66);
    b.collect("block", params);
    Tensor x = s.leaf({1, 4, 5, 5});
    auto inputs = tensors_of(params);
    inputs.insert(inputs.begin(), x);
    s.check("block_forward", kCompositeTolerance, s.projected([=] { return block_forward(x, b); }), inputs);
  }
  {
    Downsample d = Downsample::make(init, 4);
    Upsample u = Upsample::make(init, 8);
    Tensor x = s.leaf({1, 4, 4, 4}), y = s.leaf({1, 8, 2, 2});
    s.check("downsample", kCompositeTolerance, s.projected([=] { return downsample(x, d); }), {x, d.conv.weight});
    s.check("upsample", kCompositeTolerance, s.projected([=] { return upsample(y, u); }), {y, u.conv.weight});
  }
  for (FinalWidth fw : {FinalWidth::kC, FinalWidth::kTwiceC}) {
    UNetConfig cfg;
    cfg.base_channels = 4;
    cfg.blocks_per_level = {1, 1, 1};
    cfg.final_width = fw;
    UNet u = UNet::make(init, cfg);
    std::vector<Parameter> params;
    u.collect("unet", params);
    Tensor x = s.leaf({1, 4, 8, 8});
    auto inputs = tensors_of(params);
    auto entries = s.sample(inputs, 0.02, 2);
    inputs.insert(inputs.begin(), x);
    std::vector<int64_t> all(static_cast<size_t>(x.numel()));
    for (int64_t k = 0; k < x.numel(); ++k) all[size_t(k)] = k;
    entries.insert(entries.begin(), all);
    s.check(fw == FinalWidth::kC ? "unet_forward" : "unet_forward_final_2c", kCompositeTolerance,
            s.projected([=] { return unet_forward(x, u); }), inputs, entries);
  }
}

void losses_suite(SuiteBuilder& s) {
  const LossWeights w;
  Tensor p = s.leaf({1, 1, 4, 4}), t = s.leaf({1, 1, 4, 4});
  s.check("charbonnier", kOpTolerance, [=] { return charbonnier(p, t, w.epsilon); }, {p, t});
  Tensor same = s.leaf({1, 1, 4, 4});
  Tensor same_target;
  {
    NoGradGuard no_grad;
    same_target = same.detach().clone();
  }
  s.check("charbonnier_zero_difference", kOpTolerance, [=] { return charbonnier(same, same_target, w.epsilon); },
          {same});
  s.check("edge_loss", kOpTolerance, [=] { return edge_loss(p, t, w.epsilon); }, {p, t});
  s.check("fft_loss", kOpTolerance, [=] {
    SupervisionSet set;
    set.pairs.push_back({"k", p, t, 1.0});
    return fft_loss(set);
  }, {p, t});
  Tensor p2 = s.leaf({1, 1, 2, 2}), t2 = s.leaf({1, 1, 2, 2});
  s.check("total_loss", kOpTolerance, [=] {
    SupervisionSet set;
    set.pairs.push_back({"full", p, t, 1.0});
    set.pairs.push_back({"half", p2, t2, 0.5});
    return total_loss(set, w).total;
  }, {p, p2});
}

void model_suite(SuiteBuilder& s) {
  ModelConfig cfg = ModelConfig::slim();
  cfg.backbone.base_channels = 4;
  cfg.branch.base_channels = 4;
  cfg.init_seed = s.rng().next();
  DPMformer m = DPMformer::make(cfg, f64);
  const auto params = m.parameters();
  // Default-scale weights make deep gradients vanish below the error floor.
  for (const auto& p : params) {
    if (p.tensor.rank() != 4) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_data<double>()) v *= 10.0;
  }
  const auto inputs = tensors_of(params);
  const auto entries = s.sample(inputs, 0.01, 1);
  Tensor rainy;
  {
    NoGradGuard no_grad;
    std::vector<double> v(3 * 32 * 32);
    for (double& x : v) x = s.rng().uniform();
    rainy = Tensor::from_vector({1, 3, 32, 32}, v, f64);
  }
  s.check("dpmformer_forward", kCompositeTolerance, s.projected([=] { return forward(rainy, m).derained; }), inputs,
          entries);
}

}  // namespace

GradcheckSuite run_gradcheck_suite(const std::string& module, uint64_t seed) {
  SuiteBuilder s(module, seed);
  if (module == "tensor") {
    tensor_suite(s);
  } else if (module == "mdta") {
    mdta_suite(s);
  } else if (module == "gdfn") {
    gdfn_suite(s);
  } else if (module == "unet") {
    unet_suite(s);
  } else if (module == "losses") {
    losses_suite(s);
  } else if (module == "model") {
    model_suite(s);
  } else {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  return s.take();
}

}  // namespace dpm
