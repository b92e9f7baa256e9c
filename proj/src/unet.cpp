#include "dpm/unet.hpp"

#include "dpm/ops.hpp"

namespace dpm {

void UNetConfig::validate() const {
  std::vector<std::string> problems;
  if (base_channels < 2 || base_channels % 2 != 0) {
    problems.push_back("base_channels must be a positive even number, got " + std::to_string(base_channels));
  }
  for (int level = 0; level < 3; ++level) {
    if (blocks_per_level[level] < 1) {
      problems.push_back("blocks_per_level[" + std::to_string(level) + "] must be >= 1");
    }
    const int heads = heads_per_level[level];
    if (heads < 1) {
      problems.push_back("heads_per_level[" + std::to_string(level) + "] must be >= 1");
    } else if (base_channels > 0 && level_width(level) % heads != 0) {
      problems.push_back("level " + std::to_string(level + 1) + " width " + std::to_string(level_width(level)) +
                         " not divisible by " + std::to_string(heads) + " heads");
    }
  }
  if (!(gdfn_gamma > 0.0)) problems.push_back("gdfn_gamma must be positive");
  if (!problems.empty()) {
    std::string msg = "invalid UNet config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

Downsample Downsample::make(Initializer& init, int64_t channels) {
  return {Conv2d::make(init, channels, channels / 2, 3)};
}

Tensor downsample(const Tensor& x, const Downsample& d) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("downsample: odd spatial extent in " + shape_str(x.shape()));
  }
  return pixel_unshuffle(d.conv(x), 2);
}

Upsample Upsample::make(Initializer& init, int64_t channels) {
  return {Conv2d::make(init, channels, channels * 2, 3)};
}

Tensor upsample(const Tensor& x, const Upsample& u) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0) {
    throw ShapeError("upsample: odd channel count in " + shape_str(x.shape()));
  }
  return pixel_shuffle(u.conv(x), 2);
}

namespace {

std::vector<TransformerBlock> make_stage(Initializer& init, int count, int64_t width, int heads,
                                         const UNetConfig& cfg) {
  std::vector<TransformerBlock> blocks;
  for (int i = 0; i < count; ++i) {
    blocks.push_back(TransformerBlock::make(init, width, heads, cfg.gdfn_gamma, cfg.qk_l2_normalize));
  }
  return blocks;
}

void collect_stage(const std::vector<TransformerBlock>& blocks, const std::string& prefix,
                   std::vector<Parameter>& out) {
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(join_name(prefix, "block" + std::to_string(i)), out);
  }
}

Tensor run_stage(Tensor x, const std::vector<TransformerBlock>& blocks) {
  for (const auto& b : blocks) x = block_forward(x, b);
  return x;
}

}  // namespace

UNet UNet::make(Initializer& init, const UNetConfig& config) {
  config.validate();
  const int64_t c = config.base_channels;
  const auto& nb = config.blocks_per_level;
  const auto& nh = config.heads_per_level;
  UNet u;
  u.config = config;
  u.enc1 = make_stage(init, nb[0], c, nh[0], config);
  u.down1 = Downsample::make(init, c);
  u.enc2 = make_stage(init, nb[1], 2 * c, nh[1], config);
  u.down2 = Downsample::make(init, 2 * c);
  u.latent = make_stage(init, nb[2], 4 * c, nh[2], config);
  u.up3 = Upsample::make(init, 4 * c);
  u.reduce2 = Conv2d::make(init, 4 * c, 2 * c, 1);
  u.dec2 = make_stage(init, nb[1], 2 * c, nh[1], config);
  u.up2 = Upsample::make(init, 2 * c);
  if (config.final_width == FinalWidth::kC) u.reduce1 = Conv2d::make(init, 2 * c, c, 1);
  u.dec1 = make_stage(init, nb[0], config.out_channels(), nh[0], config);
  return u;
}

void UNet::collect(const std::string& prefix, std::vector<Parameter>& out) const {
  collect_stage(enc1, join_name(prefix, "enc1"), out);
  down1.conv.collect(join_name(prefix, "down1"), out);
  collect_stage(enc2, join_name(prefix, "enc2"), out);
  down2.conv.collect(join_name(prefix, "down2"), out);
  collect_stage(latent, join_name(prefix, "latent"), out);
  up3.conv.collect(join_name(prefix, "up3"), out);
  reduce2.collect(join_name(prefix, "reduce2"), out);
  collect_stage(dec2, join_name(prefix, "dec2"), out);
  up2.conv.collect(join_name(prefix, "up2"), out);
  if (reduce1.weight.defined()) reduce1.collect(join_name(prefix, "reduce1"), out);
  collect_stage(dec1, join_name(prefix, "dec1"), out);
}

Tensor unet_forward(const Tensor& t0, const UNet& u, UNetTrace* trace) {
  if (t0.rank() != 4 || t0.dim(2) % 4 != 0 || t0.dim(3) % 4 != 0) {
    throw ShapeError("unet_forward: spatial extents of " + shape_str(t0.shape()) + " must be divisible by 4");
  }
  if (t0.dim(1) != u.config.base_channels) {
    throw ShapeError("unet_forward: expected " + std::to_string(u.config.base_channels) + " channels, got " +
                     shape_str(t0.shape()));
  }
  auto note = [trace](const Tensor& t) {
    if (trace) trace->stages.push_back(t.shape());
  };
  const Tensor e1 = run_stage(t0, u.enc1);
  note(e1);
  const Tensor e2 = run_stage(downsample(e1, u.down1), u.enc2);
  note(e2);
  const Tensor e3 = run_stage(downsample(e2, u.down2), u.latent);
  note(e3);
  Tensor d2 = concat({upsample(e3, u.up3), e2}, 1);
  d2 = run_stage(u.reduce2(d2), u.dec2);
  note(d2);
  Tensor d1 = concat({upsample(d2, u.up2), e1}, 1);
  if (u.config.final_width == FinalWidth::kC) d1 = u.reduce1(d1);
  d1 = run_stage(d1, u.dec1);
  note(d1);
  return d1;
}

int64_t parameter_count(const UNet& u) {
  std::vector<Parameter> params;
  u.collect("", params);
  return count_parameters(params);
}

}  // namespace dpm
