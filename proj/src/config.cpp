#include "dpm/config.hpp"

#include <fstream>
#include <set>

#include "dpm/errors.hpp"

namespace dpm {

using nlohmann::json;

namespace {

const char* final_width_name(FinalWidth w) { return w == FinalWidth::kC ? "C" : "2C"; }
const char* patch_axis_name(PatchAxis a) { return a == PatchAxis::kHeight ? "height" : "width"; }

// Collects every problem in a document instead of stopping at the first.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& problems) : problems_(problems) {}

  bool object(const json& j, const std::string& path, std::set<std::string> allowed) {
    if (!j.is_object()) {
      fail(path, "expected an object");
      return false;
    }
    for (const auto& [key, value] : j.items()) {
      if (!allowed.count(key)) fail(join(path, key), "unknown key");
    }
    return true;
  }

  template <class T>
  void field(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    const std::string where = join(path, key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail(where, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, uint64_t>) {
      if (!v.is_number_unsigned()) return fail(where, "expected a non-negative integer");
      out = v.get<uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) return fail(where, "expected an integer");
      out = static_cast<T>(v.get<int64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail(where, "expected a number");
      out = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail(where, "expected a string");
      out = v.get<std::string>();
    } else {
      static_assert(std::is_same_v<T, std::array<int, 3>>);
      if (!v.is_array() || v.size() != 3) return fail(where, "expected an array of 3 integers");
      for (size_t i = 0; i < 3; ++i) {
        if (!v[i].is_number_integer()) return fail(where, "expected an array of 3 integers");
        out[i] = v[i].get<int>();
      }
    }
  }

  void fail(const std::string& where, const std::string& what) { problems_.push_back(where + ": " + what); }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  std::vector<std::string>& problems_;
};

template <class Fn>
void collect_validation(std::vector<std::string>& problems, const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    // validate() messages are "header:\n  - item\n  - item"; keep only the items.
    const std::string msg = e.what();
    const std::string bullet = "\n  - ";
    size_t pos = msg.find(bullet);
    if (pos == std::string::npos) {
      problems.push_back(where + ": " + msg);
      return;
    }
    while (pos != std::string::npos) {
      const size_t next = msg.find(bullet, pos + bullet.size());
      problems.push_back(where + ": " + msg.substr(pos + bullet.size(), next - pos - bullet.size()));
      pos = next;
    }
  }
}

[[noreturn]] void raise(const std::vector<std::string>& problems) {
  std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                    (problems.size() == 1 ? "" : "s") + "):";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ConfigError(msg);
}

void read_unet(Reader& r, const json& j, const std::string& path, UNetConfig& c) {
  if (!r.object(j, path, {"base_channels", "blocks_per_level", "heads_per_level", "gdfn_gamma", "final_width",
                          "qk_l2_normalize"})) {
    return;
  }
  r.field(j, path, "base_channels", c.base_channels);
  r.field(j, path, "blocks_per_level", c.blocks_per_level);
  r.field(j, path, "heads_per_level", c.heads_per_level);
  r.field(j, path, "gdfn_gamma", c.gdfn_gamma);
  r.field(j, path, "qk_l2_normalize", c.qk_l2_normalize);
  std::string fw;
  r.field(j, path, "final_width", fw);
  if (fw == "C") {
    c.final_width = FinalWidth::kC;
  } else if (fw == "2C") {
    c.final_width = FinalWidth::kTwiceC;
  } else if (!fw.empty()) {
    r.fail(Reader::join(path, "final_width"), "expected \"C\" or \"2C\"");
  }
}

void read_model(Reader& r, const json& j, const std::string& path, ModelConfig& c) {
  if (!r.object(j, path, {"preset", "backbone", "branch", "enable_multipatch", "enable_coarse2fine", "patch_axis",
                          "share_level_weights", "init_seed"})) {
    return;
  }
  std::string preset;
  r.field(j, path, "preset", preset);
  if (preset == "full") {
    c = ModelConfig::full();
  } else if (preset == "slim") {
    c = ModelConfig::slim();
  } else if (!preset.empty()) {
    r.fail(Reader::join(path, "preset"), "expected \"full\" or \"slim\"");
  }
  if (j.contains("backbone")) read_unet(r, j["backbone"], Reader::join(path, "backbone"), c.backbone);
  if (j.contains("branch")) read_unet(r, j["branch"], Reader::join(path, "branch"), c.branch);
  r.field(j, path, "enable_multipatch", c.enable_multipatch);
  r.field(j, path, "enable_coarse2fine", c.enable_coarse2fine);
  r.field(j, path, "share_level_weights", c.share_level_weights);
  r.field(j, path, "init_seed", c.init_seed);
  std::string axis;
  r.field(j, path, "patch_axis", axis);
  if (axis == "height") {
    c.patch_axis = PatchAxis::kHeight;
  } else if (axis == "width") {
    c.patch_axis = PatchAxis::kWidth;
  } else if (!axis.empty()) {
    r.fail(Reader::join(path, "patch_axis"), "expected \"height\" or \"width\"");
  }
}

void read_loss(Reader& r, const json& j, const std::string& path, LossWeights& w) {
  if (!r.object(j, path, {"lambda1", "lambda2", "lambda3", "epsilon"})) return;
  r.field(j, path, "lambda1", w.lambda1);
  r.field(j, path, "lambda2", w.lambda2);
  r.field(j, path, "lambda3", w.lambda3);
  r.field(j, path, "epsilon", w.epsilon);
}

void read_train(Reader& r, const json& j, const std::string& path, TrainConfig& c) {
  if (!r.object(j, path, {"epochs", "batch_size", "crop", "lr_max", "lr_min", "beta1", "beta2", "weight_decay",
                          "adam_eps", "seed", "loss", "branch_weight", "eval_every", "checkpoint_every"})) {
    return;
  }
  r.field(j, path, "epochs", c.epochs);
  r.field(j, path, "batch_size", c.batch_size);
  r.field(j, path, "crop", c.crop);
  r.field(j, path, "lr_max", c.lr_max);
  r.field(j, path, "lr_min", c.lr_min);
  r.field(j, path, "beta1", c.beta1);
  r.field(j, path, "beta2", c.beta2);
  r.field(j, path, "weight_decay", c.weight_decay);
  r.field(j, path, "adam_eps", c.adam_eps);
  r.field(j, path, "seed", c.seed);
  r.field(j, path, "branch_weight", c.branch_weight);
  r.field(j, path, "eval_every", c.eval_every);
  r.field(j, path, "checkpoint_every", c.checkpoint_every);
  if (j.contains("loss")) read_loss(r, j["loss"], Reader::join(path, "loss"), c.loss);
}

void read_rain(Reader& r, const json& j, const std::string& path, RainParams& p) {
  if (!r.object(j, path, {"seed", "streak_density", "streak_length", "angle_deg", "intensity"})) return;
  r.field(j, path, "seed", p.seed);
  r.field(j, path, "streak_density", p.streak_density);
  r.field(j, path, "streak_length", p.streak_length);
  r.field(j, path, "angle_deg", p.angle_deg);
  r.field(j, path, "intensity", p.intensity);
}

void read_data(Reader& r, const json& j, const std::string& path, DataConfig& d) {
  if (!r.object(j, path, {"manifest", "rainy_dir", "clean_dir", "synthetic", "eval_manifest", "holdout_stride"})) {
    return;
  }
  r.field(j, path, "manifest", d.manifest);
  r.field(j, path, "rainy_dir", d.rainy_dir);
  r.field(j, path, "clean_dir", d.clean_dir);
  r.field(j, path, "eval_manifest", d.eval_manifest);
  r.field(j, path, "holdout_stride", d.holdout_stride);
  if (j.contains("synthetic") && !j["synthetic"].is_null()) {
    const json& s = j["synthetic"];
    const std::string sp = Reader::join(path, "synthetic");
    SyntheticSource src;
    if (r.object(s, sp, {"count", "height", "width", "clean_seed", "rain"})) {
      r.field(s, sp, "count", src.count);
      r.field(s, sp, "height", src.height);
      r.field(s, sp, "width", src.width);
      r.field(s, sp, "clean_seed", src.clean_seed);
      if (s.contains("rain")) read_rain(r, s["rain"], Reader::join(sp, "rain"), src.rain);
    }
    d.synthetic = src;
  }
}

void validate_data(const DataConfig& d, std::vector<std::string>& problems) {
  const int sources = int(!d.manifest.empty()) + int(!d.rainy_dir.empty() || !d.clean_dir.empty()) +
                      int(d.synthetic.has_value());
  if (sources != 1) {
    problems.push_back("data: exactly one of manifest, rainy_dir + clean_dir, synthetic must be given");
  }
  if (d.rainy_dir.empty() != d.clean_dir.empty()) {
    problems.push_back("data: rainy_dir and clean_dir must be given together");
  }
  if (d.holdout_stride < 0) problems.push_back("data.holdout_stride: must be >= 0");
  if (d.synthetic) {
    const SyntheticSource& s = *d.synthetic;
    if (s.count < 1) problems.push_back("data.synthetic.count: must be >= 1");
    if (s.height < 16 || s.width < 16 || s.height % 16 || s.width % 16) {
      problems.push_back("data.synthetic: height and width must be positive multiples of 16");
    }
    collect_validation(problems, "data.synthetic.rain", [&] { s.rain.validate(); });
  }
}

}  // namespace

json to_json(const UNetConfig& c) {
  return {{"base_channels", c.base_channels},
          {"blocks_per_level", c.blocks_per_level},
          {"heads_per_level", c.heads_per_level},
          {"gdfn_gamma", c.gdfn_gamma},
          {"final_width", final_width_name(c.final_width)},
          {"qk_l2_normalize", c.qk_l2_normalize}};
}

json to_json(const ModelConfig& c) {
  return {{"backbone", to_json(c.backbone)},
          {"branch", to_json(c.branch)},
          {"enable_multipatch", c.enable_multipatch},
          {"enable_coarse2fine", c.enable_coarse2fine},
          {"patch_axis", patch_axis_name(c.patch_axis)},
          {"share_level_weights", c.share_level_weights},
          {"init_seed", c.init_seed}};
}

json to_json(const LossWeights& w) {
  return {{"lambda1", w.lambda1}, {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"epsilon", w.epsilon}};
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"crop", c.crop},
          {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"weight_decay", c.weight_decay},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"loss", to_json(c.loss)},
          {"branch_weight", c.branch_weight},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every}};
}

json to_json(const RainParams& p) {
  return {{"seed", p.seed},
          {"streak_density", p.streak_density},
          {"streak_length", p.streak_length},
          {"angle_deg", p.angle_deg},
          {"intensity", p.intensity}};
}

json to_json(const DataConfig& d) {
  json j = json::object();
  if (!d.manifest.empty()) j["manifest"] = d.manifest;
  if (!d.rainy_dir.empty()) j["rainy_dir"] = d.rainy_dir;
  if (!d.clean_dir.empty()) j["clean_dir"] = d.clean_dir;
  if (d.synthetic) {
    const SyntheticSource& s = *d.synthetic;
    j["synthetic"] = {{"count", s.count},
                      {"height", s.height},
                      {"width", s.width},
                      {"clean_seed", s.clean_seed},
                      {"rain", to_json(s.rain)}};
  }
  if (!d.eval_manifest.empty()) j["eval_manifest"] = d.eval_manifest;
  j["holdout_stride"] = d.holdout_stride;
  return j;
}

json to_json(const RunConfig& r) {
  return {{"model", to_json(r.model)},
          {"train", to_json(r.train)},
          {"data", to_json(r.data)},
          {"output_dir", r.output_dir}};
}

ModelConfig model_config_from_json(const json& j) {
  std::vector<std::string> problems;
  Reader r(problems);
  ModelConfig c = ModelConfig::full();
  read_model(r, j, "model", c);
  if (problems.empty()) collect_validation(problems, "model", [&] { c.validate(); });
  if (!problems.empty()) raise(problems);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  std::vector<std::string> problems;
  Reader r(problems);
  TrainConfig c;
  read_train(r, j, "train", c);
  if (problems.empty()) collect_validation(problems, "train", [&] { c.validate(); });
  if (!problems.empty()) raise(problems);
  return c;
}

RunConfig run_config_from_json(const json& j) {
  std::vector<std::string> problems;
  Reader r(problems);
  RunConfig c;
  if (r.object(j, "", {"model", "train", "data", "output_dir"})) {
    if (j.contains("model")) read_model(r, j["model"], "model", c.model);
    if (j.contains("train")) read_train(r, j["train"], "train", c.train);
    if (j.contains("data")) read_data(r, j["data"], "data", c.data);
    r.field(j, "", "output_dir", c.output_dir);
  }
  collect_validation(problems, "model", [&] { c.model.validate(); });
  collect_validation(problems, "train", [&] { c.train.validate(); });
  validate_data(c.data, problems);
  if (c.output_dir.empty()) problems.push_back("output_dir: must not be empty");
  if (!problems.empty()) raise(problems);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void load_run_data(const DataConfig& d, Dataset& train, Dataset& held_out) {
  Dataset all;
  if (!d.manifest.empty()) {
    all = load_manifest_pairs(d.manifest);
  } else if (!d.rainy_dir.empty()) {
    all = load_pairs(d.rainy_dir, d.clean_dir).pairs;
  } else if (d.synthetic) {
    const SyntheticSource& s = *d.synthetic;
    for (int i = 0; i < s.count; ++i) {
      RainParams p = s.rain;
      p.seed = s.rain.seed + uint64_t(i);
      char id[16];
      std::snprintf(id, sizeof id, "%04d", i);
      all.push_back(synthesize_rain(procedural_clean(s.clean_seed + uint64_t(i), s.height, s.width), p, id));
    }
  }
  if (all.empty()) throw ConfigError("data: no image pairs found");
  if (!d.eval_manifest.empty()) {
    train = all;
    held_out = load_manifest_pairs(d.eval_manifest);
  } else {
    holdout_split(all, d.holdout_stride, train, held_out);
  }
  if (train.empty()) throw ConfigError("data: holdout leaves no training pairs");
}

}  // namespace dpm
