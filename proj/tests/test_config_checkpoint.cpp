#include <gtest/gtest.h>

#include <fstream>

#include "dpm/checkpoint.hpp"
#include "dpm/config.hpp"
#include "dpm/errors.hpp"
#include "temp_dir.hpp"

using namespace dpm;
using nlohmann::json;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::slim();
  c.backbone.base_channels = 4;
  c.branch.base_channels = 4;
  return c;
}

std::string config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsAndPresets) {
  const RunConfig r = run_config_from_json({{"data", {{"synthetic", json::object()}}}});
  EXPECT_EQ(r.model.backbone.base_channels, 16);
  EXPECT_EQ(r.train.lr_max, 1e-4);
  EXPECT_EQ(r.train.loss.lambda2, 0.05);
  const ModelConfig full = model_config_from_json({{"preset", "full"}});
  EXPECT_EQ(full.backbone.base_channels, 48);
  EXPECT_EQ(full.branch.blocks_per_level, (std::array<int, 3>{2, 2, 2}));
  const ModelConfig slim = model_config_from_json({{"preset", "slim"}, {"enable_multipatch", false}});
  EXPECT_EQ(slim.branch.base_channels, 16);
  EXPECT_FALSE(slim.enable_multipatch);
}

TEST(Config, EveryViolationIsReported) {
  const std::string msg = config_error({{"model", {{"enable_multipatc", true}, {"backbone", {{"base_channels", "x"}}}}},
                                        {"train", {{"crop", 65}, {"lr", 1}}},
                                        {"data", {{"synthetic", json::object()}}},
                                        {"extra", 1}});
  for (const char* key : {"model.enable_multipatc", "model.backbone.base_channels", "train.lr", "extra", "crop"}) {
    EXPECT_NE(msg.find(key), std::string::npos) << key << " missing from: " << msg;
  }
}

TEST(Config, DataSourceMustBeUnique) {
  EXPECT_FALSE(config_error(json::object()).empty());
  EXPECT_FALSE(config_error({{"data", {{"manifest", "m.json"}, {"synthetic", json::object()}}}}).empty());
  EXPECT_FALSE(config_error({{"data", {{"synthetic", {{"height", 50}}}}}}).empty());
}

TEST(Config, ResolvedJsonReproducesConfig) {
  RunConfig r;
  r.model = tiny();
  r.model.enable_coarse2fine = false;
  r.model.branch.final_width = FinalWidth::kTwiceC;
  r.model.patch_axis = PatchAxis::kWidth;
  r.train.epochs = 7;
  r.train.loss.lambda3 = 0.5;
  r.data.synthetic = SyntheticSource{};
  r.data.synthetic->rain.angle_deg = 30;
  r.output_dir = "somewhere";
  const json j = to_json(r);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(j["train"]["loss"]["lambda1"], 1.0);
  EXPECT_EQ(j["train"]["loss"]["lambda2"], 0.05);
  EXPECT_EQ(j["model"]["branch"]["final_width"], "2C");
}

TEST(Config, ModelValidation) {
  ModelConfig c = tiny();
  c.backbone.heads_per_level = {3, 2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  const DPMformer m = DPMformer::make(tiny());
  save_checkpoint(dir.path / "a.ckpt", m, nullptr, {{"note", "x"}});
  const Checkpoint ck = read_checkpoint(dir.path / "a.ckpt");
  EXPECT_FALSE(ck.optimizer_step);
  EXPECT_EQ(ck.meta["note"], "x");
  const DPMformer back = model_from_checkpoint(ck);
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.to_vector(), pb[i].tensor.to_vector()) << pa[i].name;
  EXPECT_EQ(to_json(back.config), to_json(m.config));
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  TempDir dir;
  const DPMformer m = DPMformer::make(tiny());
  OptimizerState s;
  s.step = 17;
  for (const auto& p : m.parameters()) {
    s.m.push_back(Tensor::full(p.tensor.shape(), 0.25));
    s.v.push_back(Tensor::full(p.tensor.shape(), 0.5));
  }
  save_checkpoint(dir.path / "o.ckpt", m, &s);
  const Checkpoint ck = read_checkpoint(dir.path / "o.ckpt");
  const OptimizerState back = optimizer_state_from_checkpoint(ck, m);
  EXPECT_EQ(back.step, 17);
  ASSERT_EQ(back.m.size(), s.m.size());
  EXPECT_EQ(back.v.back().to_vector(), s.v.back().to_vector());
}

TEST(Checkpoint, MismatchNamesFirstParameter) {
  TempDir dir;
  save_checkpoint(dir.path / "t.ckpt", DPMformer::make(tiny()));
  const Checkpoint ck = read_checkpoint(dir.path / "t.ckpt");
  DPMformer other = DPMformer::make(ModelConfig::slim());
  try {
    load_parameters(other, ck);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("first mismatched parameter"), std::string::npos);
    EXPECT_NE(msg.find(other.parameters().front().name), std::string::npos) << msg;
  }
  ModelConfig no_mp = tiny();
  no_mp.enable_multipatch = false;
  DPMformer smaller = DPMformer::make(no_mp);
  try {
    load_parameters(smaller, ck);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("multipatch"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, GarbageIsIoError) {
  TempDir dir;
  std::ofstream(dir.path / "bad.ckpt") << "nope";
  EXPECT_THROW(read_checkpoint(dir.path / "bad.ckpt"), IoError);
  EXPECT_THROW(read_checkpoint(dir.path / "missing.ckpt"), IoError);
}
