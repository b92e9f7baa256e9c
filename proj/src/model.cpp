#include "dpm/model.hpp"

#include <unordered_set>

#include "dpm/ops.hpp"

namespace dpm {

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::slim() {
  ModelConfig cfg;
  for (UNetConfig* u : {&cfg.backbone, &cfg.branch}) {
    u->base_channels = 16;
    u->blocks_per_level = {1, 1, 1};
  }
  return cfg;
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  for (auto [name, u] : {std::pair{"backbone", &backbone}, std::pair{"branch", &branch}}) {
    try {
      u->validate();
    } catch (const ConfigError& e) {
      problems.push_back(std::string(name) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n" + p;
    throw ConfigError(msg);
  }
}

Restorer Restorer::make(Initializer& init, const UNetConfig& cfg) {
  Restorer r;
  r.conv_in = Conv2d::make(init, 3, cfg.base_channels, 3);
  r.unet = UNet::make(init, cfg);
  r.conv_out = Conv2d::make(init, cfg.out_channels(), 3, 3);
  return r;
}

Tensor Restorer::residual(const Tensor& image) const { return conv_out(unet_forward(conv_in(image), unet)); }

void Restorer::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  conv_in.collect(join_name(prefix, "conv_in"), out);
  unet.collect(prefix, out);
  conv_out.collect(join_name(prefix, "conv_out"), out);
}

DPMformer DPMformer::make(const ModelConfig& config, DType dtype) {
  config.validate();
  Initializer init(config.init_seed, dtype);
  DPMformer m;
  m.config = config;
  m.dtype = dtype;
  m.backbone = Restorer::make(init, config.backbone);
  const UNetConfig& bc = config.branch;
  if (config.enable_multipatch) {
    MultiPatchPath mp;
    const size_t n3 = config.share_level_weights ? 1 : 4;
    const size_t n2 = config.share_level_weights ? 1 : 2;
    for (size_t i = 0; i < n3; ++i) {
      mp.level3.push_back({Conv2d::make(init, 3, bc.base_channels, 3), UNet::make(init, bc)});
    }
    for (size_t i = 0; i < n2; ++i) mp.level3_out.push_back(Conv2d::make(init, bc.out_channels(), 3, 3));
    for (size_t i = 0; i < n2; ++i) {
      mp.level2.push_back({Conv2d::make(init, 3, bc.base_channels, 3), UNet::make(init, bc)});
      mp.level2_fuse.push_back(Conv2d::make(init, bc.base_channels + bc.out_channels(), bc.base_channels, 1));
    }
    mp.level2_out = Conv2d::make(init, bc.out_channels(), 3, 3);
    m.multipatch = std::move(mp);
  }
  if (config.enable_coarse2fine) {
    CoarseToFinePath c2f;
    c2f.quarter = Restorer::make(init, bc);
    c2f.half = Restorer::make(init, bc);
    m.coarse2fine = std::move(c2f);
  }
  return m;
}

std::vector<Parameter> DPMformer::parameters() const {
  std::vector<Parameter> out;
  backbone.collect("backbone", out);
  if (multipatch) {
    const MultiPatchPath& mp = *multipatch;
    auto indexed = [](const std::string& base, size_t count, size_t i) {
      return count == 1 ? base : base + ".patch" + std::to_string(i);
    };
    for (size_t i = 0; i < mp.level3.size(); ++i) {
      const std::string p = indexed("multipatch.level3", mp.level3.size(), i);
      mp.level3[i].conv_in.collect(join_name(p, "conv_in"), out);
      mp.level3[i].unet.collect(p, out);
    }
    for (size_t i = 0; i < mp.level3_out.size(); ++i) {
      mp.level3_out[i].collect(join_name(indexed("multipatch.level3", mp.level3_out.size(), i), "conv_out"), out);
    }
    for (size_t i = 0; i < mp.level2.size(); ++i) {
      const std::string p = indexed("multipatch.level2", mp.level2.size(), i);
      mp.level2[i].conv_in.collect(join_name(p, "conv_in"), out);
      mp.level2_fuse[i].collect(join_name(p, "fuse"), out);
      mp.level2[i].unet.collect(p, out);
    }
    mp.level2_out.collect("multipatch.level2.conv_out", out);
  }
  if (coarse2fine) {
    coarse2fine->quarter.collect("coarse2fine.quarter", out);
    coarse2fine->half.collect("coarse2fine.half", out);
  }
  std::unordered_set<std::string> names;
  for (const Parameter& p : out) {
    if (!names.insert(p.name).second) throw ContractError("duplicate parameter name " + p.name);
  }
  return out;
}

namespace {

void require_divisible(const Tensor& x, int64_t factor, const char* op) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw ShapeError(std::string(op) + ": expected (N,3,H,W) with H, W divisible by " + std::to_string(factor) +
                     ", got " + shape_str(x.shape()));
  }
}

// Runs conv_in + UNet over patches; shared weights batch them along N.
std::vector<Tensor> encode_patches(const std::vector<Tensor>& patches, const std::vector<PatchEncoder>& encoders,
                                   const std::vector<Conv2d>* fuse, const std::vector<Tensor>* fused_features) {
  auto encode_one = [&](const Tensor& image, size_t i, const Tensor* extra) {
    Tensor t = encoders[i].conv_in(image);
    if (extra) t = (*fuse)[i](concat({t, *extra}, 1));
    return unet_forward(t, encoders[i].unet);
  };
  std::vector<Tensor> out;
  if (encoders.size() == 1) {
    const int64_t n = patches[0].dim(0);
    const Tensor stacked = patches.size() == 1 ? patches[0] : concat(patches, 0);
    Tensor extra;
    if (fused_features) extra = fused_features->size() == 1 ? (*fused_features)[0] : concat(*fused_features, 0);
    const Tensor features = encode_one(stacked, 0, fused_features ? &extra : nullptr);
    for (size_t i = 0; i < patches.size(); ++i) {
      out.push_back(patches.size() == 1 ? features : slice(features, 0, static_cast<int64_t>(i) * n, n));
    }
  } else {
    for (size_t i = 0; i < patches.size(); ++i) {
      out.push_back(encode_one(patches[i], i, fused_features ? &(*fused_features)[i] : nullptr));
    }
  }
  return out;
}

}  // namespace

MultiPatchOutput multipatch_forward(const Tensor& t1, const DPMformer& m) {
  if (!m.multipatch) throw ContractError("multipatch_forward: path disabled in this model");
  require_divisible(t1, 8, "multipatch_forward");
  const MultiPatchPath& mp = *m.multipatch;
  const bool by_height = m.config.patch_axis == PatchAxis::kHeight;
  // Axis along which two level-3 neighbours join into one level-2 patch, and
  // the axis separating the two level-2 patches.
  const int pair_axis = by_height ? 3 : 2;
  const int half_axis = by_height ? 2 : 3;
  // Level-3 grid indices (row-major 2x2) forming level-2 patch j.
  const int pairs[2][2] = {{0, by_height ? 1 : 2}, {by_height ? 2 : 1, 3}};

  const PatchGrid t3 = split_patches(t1, 2, 2);
  const PatchGrid t2 = by_height ? split_patches(t1, 2, 1) : split_patches(t1, 1, 2);

  // Level 3: per-patch encoder-decoder, then join neighbouring features.
  const std::vector<Tensor> w3 = encode_patches(t3.patches, mp.level3, nullptr, nullptr);
  std::vector<Tensor> w3_joined;
  MultiPatchOutput out;
  out.h3 = PatchGrid{2, 2, std::vector<Tensor>(4)};
  for (int j = 0; j < 2; ++j) {
    w3_joined.push_back(concat({w3[pairs[j][0]], w3[pairs[j][1]]}, pair_axis));
    const Conv2d& head = mp.level3_out[mp.level3_out.size() == 1 ? 0 : j];
    const Tensor restored = add(head(w3_joined[j]), t2.patches[j]);
    const auto halves = split(restored, pair_axis, 2);
    out.h3.patches[pairs[j][0]] = halves[0];
    out.h3.patches[pairs[j][1]] = halves[1];
  }

  // Level 2: image patch features fused with the joined level-3 features.
  const std::vector<Tensor> w2 = encode_patches(t2.patches, mp.level2, &mp.level2_fuse, &w3_joined);
  out.w2_features = concat(w2, half_axis);
  out.h2 = add(mp.level2_out(out.w2_features), t1);
  return out;
}

CoarseToFineOutput coarse2fine_forward(const Tensor& t1, const DPMformer& m) {
  if (!m.coarse2fine) throw ContractError("coarse2fine_forward: path disabled in this model");
  require_divisible(t1, 16, "coarse2fine_forward");
  const Pyramid pyr = gaussian_pyramid(t1, 3);
  const Tensor& f2 = pyr.levels[1];
  const Tensor& f4 = pyr.levels[2];
  CoarseToFineOutput out;
  out.quarter = add(f4, m.coarse2fine->quarter.residual(f4));
  const Tensor f2_star = add(f2, upsample_bilinear(out.quarter, 2));
  out.half = add(f2_star, m.coarse2fine->half.residual(f2_star));
  return out;
}

ModelOutput forward(const Tensor& rainy, const DPMformer& m) {
  require_divisible(rainy, 16, "forward");
  ModelOutput out;
  Tensor x0 = rainy;
  if (m.multipatch) {
    MultiPatchOutput mp = multipatch_forward(rainy, m);
    out.mp_level2 = mp.h2;
    out.mp_level3 = std::move(mp.h3);
    x0 = add(x0, out.mp_level2);
  }
  if (m.coarse2fine) {
    const CoarseToFineOutput c2f = coarse2fine_forward(rainy, m);
    out.c2f_half = c2f.half;
    out.c2f_quarter = c2f.quarter;
    x0 = add(x0, upsample_bilinear(out.c2f_half, 2));
  }
  out.residual = m.backbone.residual(x0);
  out.derained = add(rainy, out.residual);
  return out;
}

int64_t parameter_count(const DPMformer& m) { return count_parameters(m.parameters()); }

}  // namespace dpm
