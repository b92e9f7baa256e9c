#include "dpm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "dpm/config.hpp"
#include "dpm/errors.hpp"

namespace dpm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'P', 'M', 'C', 'K', 'P', 'T', '\0'};

template <class U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
    return out;
  }
  return v;
}

void put_u64(std::ostream& os, uint64_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_floats(std::ostream& os, const Tensor& t) {
  const std::vector<double> values = t.to_vector();
  std::vector<uint32_t> raw(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    raw[i] = to_little(std::bit_cast<uint32_t>(static_cast<float>(values[i])));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * 4));
}

std::string mismatch(const std::string& name, const std::string& detail) {
  return "incompatible checkpoint: first mismatched parameter '" + name + "' (" + detail + ")";
}

}  // namespace

void save_checkpoint(const fs::path& path, const DPMformer& model, const OptimizerState* state, const json& meta) {
  const auto params = model.parameters();
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& p : params) entries.emplace_back(p.name, p.tensor);
  if (state) {
    if (state->m.size() != params.size() || state->v.size() != params.size()) {
      throw ContractError("save_checkpoint: optimizer state does not match the model's parameters");
    }
    for (size_t i = 0; i < params.size(); ++i) entries.emplace_back("optimizer.m." + params[i].name, state->m[i]);
    for (size_t i = 0; i < params.size(); ++i) entries.emplace_back("optimizer.v." + params[i].name, state->v[i]);
  }

  json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["model"] = to_json(model.config);
  header["tensors"] = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : entries) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += uint64_t(t.numel());
  }
  if (state) header["optimizer"] = {{"step", state->step}};
  header["meta"] = meta;
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, text.size());
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, t] : entries) put_floats(os, t);
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  uint64_t header_len = 0;
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  if (!is.read(reinterpret_cast<char*>(&header_len), 8)) throw IoError("truncated checkpoint " + path.string());
  header_len = to_little(header_len);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), std::streamsize(header_len))) throw IoError("truncated checkpoint " + path.string());

  Checkpoint ck;
  std::vector<std::tuple<std::string, Shape, uint64_t>> table;
  try {
    const json header = json::parse(text);
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw IoError("unsupported checkpoint format version " + std::to_string(version) + " in " + path.string());
    }
    ck.config = model_config_from_json(header.at("model"));
    for (const auto& e : header.at("tensors")) {
      table.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<uint64_t>());
    }
    if (header.contains("optimizer")) ck.optimizer_step = header["optimizer"].at("step").get<int64_t>();
    if (header.contains("meta")) ck.meta = header["meta"];
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }

  const std::streamoff payload = is.tellg();
  for (const auto& [name, shape, offset] : table) {
    const int64_t n = shape_numel(shape);
    std::vector<uint32_t> raw(static_cast<size_t>(n));
    is.seekg(payload + std::streamoff(offset * 4));
    if (!is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n * 4))) {
      throw IoError("truncated checkpoint payload for '" + name + "' in " + path.string());
    }
    Tensor t = Tensor::zeros(shape, DType::kFloat32);
    auto d = t.mutable_data<float>();
    for (int64_t i = 0; i < n; ++i) d[i] = std::bit_cast<float>(to_little(raw[i]));
    ck.tensors.emplace(name, t);
  }
  return ck;
}

void load_parameters(DPMformer& model, const Checkpoint& ckpt) {
  const auto params = model.parameters();
  for (const auto& p : params) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw ConfigError(mismatch(p.name, "missing from checkpoint"));
    if (it->second.shape() != p.tensor.shape()) {
      throw ConfigError(mismatch(p.name, "model shape " + shape_str(p.tensor.shape()) + ", checkpoint shape " +
                                             shape_str(it->second.shape())));
    }
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("optimizer.", 0) == 0) continue;
    const bool known = std::any_of(params.begin(), params.end(), [&](const Parameter& p) { return p.name == name; });
    if (!known) throw ConfigError(mismatch(name, "not present in the model"));
  }
  for (const auto& p : params) {
    Tensor dst = p.tensor;
    dst.copy_from(ckpt.tensors.at(p.name).to(p.tensor.dtype()));
  }
}

DPMformer model_from_checkpoint(const Checkpoint& ckpt, DType dtype) {
  DPMformer m = DPMformer::make(ckpt.config, dtype);
  load_parameters(m, ckpt);
  return m;
}

OptimizerState optimizer_state_from_checkpoint(const Checkpoint& ckpt, const DPMformer& model) {
  if (!ckpt.optimizer_step) throw ContractError("checkpoint carries no optimizer state");
  OptimizerState s;
  s.step = *ckpt.optimizer_step;
  for (const auto& p : model.parameters()) {
    for (auto [prefix, dst] : {std::pair{"optimizer.m.", &s.m}, std::pair{"optimizer.v.", &s.v}}) {
      auto it = ckpt.tensors.find(prefix + p.name);
      if (it == ckpt.tensors.end() || it->second.shape() != p.tensor.shape()) {
        throw ConfigError(mismatch(prefix + p.name, "optimizer moment missing or mis-shaped"));
      }
      dst->push_back(it->second.to(p.tensor.dtype()));
    }
  }
  return s;
}

}  // namespace dpm
