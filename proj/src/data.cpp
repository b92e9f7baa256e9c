#include "dpm/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <numbers>

#include "dpm/errors.hpp"
#include "dpm/nn.hpp"

namespace dpm {

namespace fs = std::filesystem;
using nlohmann::json;

void RainParams::validate() const {
  std::vector<std::string> problems;
  if (!(streak_density >= 0.0 && streak_density < 1.0)) problems.push_back("streak_density must be in [0, 1)");
  if (streak_length < 1) problems.push_back("streak_length must be >= 1");
  if (!std::isfinite(angle_deg)) problems.push_back("angle_deg must be finite");
  if (!(intensity >= 0.0 && intensity <= 1.0)) problems.push_back("intensity must be in [0, 1]");
  if (!problems.empty()) {
    std::string msg = "invalid rain parameters:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void require_image(const Tensor& t, const char* op) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
    throw ShapeError(std::string(op) + ": expected (1,3,H,W), got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor load_png(const fs::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed for " + path.string());
  }
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  }
  if (depth == 16) png_set_swap(png);  // host order on little-endian machines
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const size_t rowbytes = png_get_rowbytes(png, info);
  if (png_get_channels(png, info) != 3 || rowbytes != size_t(width) * 3 * (depth / 8)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG layout: " + path.string());
  }
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out = Tensor::zeros({1, 3, int64_t(height), int64_t(width)});
  auto d = out.mutable_data<float>();
  const int64_t plane = int64_t(height) * width;
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const size_t i = size_t(y * width + x) * 3 + c;
        double v;
        if (depth == 16) {
          uint16_t s;
          std::memcpy(&s, buffer.data() + 2 * i, 2);
          v = s / 65535.0;
        } else {
          v = buffer[i] / 255.0;
        }
        d[c * plane + y * width + x] = static_cast<float>(v);
      }
  return out;
}

void save_png(const fs::path& path, const Tensor& image, int bit_depth) {
  require_image(image, "save_png");
  if (bit_depth != 8 && bit_depth != 16) throw ContractError("save_png: bit depth must be 8 or 16");
  const int64_t h = image.dim(2), w = image.dim(3), plane = h * w;
  const auto v = image.to_vector();
  const int bytes = bit_depth / 8;
  const double peak = bit_depth == 8 ? 255.0 : 65535.0;
  std::vector<png_byte> buffer(size_t(plane) * 3 * bytes);
  for (int64_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) {
      const double clipped = std::clamp(v[c * plane + p], 0.0, 1.0);
      const auto q = static_cast<uint32_t>(std::lround(clipped * peak));
      const size_t i = size_t(p) * 3 + c;
      if (bytes == 1) {
        buffer[i] = static_cast<png_byte>(q);
      } else {
        buffer[2 * i] = static_cast<png_byte>(q >> 8);  // PNG is big-endian
        buffer[2 * i + 1] = static_cast<png_byte>(q & 0xff);
      }
    }

  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for " + path.string());
  }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[y] = buffer.data() + size_t(y * w) * 3 * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), bit_depth, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<double> streak_kernel(int length, double angle_deg, int* size) {
  if (length < 1) throw ContractError("streak_kernel: length must be >= 1");
  const int s = length % 2 == 1 ? length : length + 1;
  const int center = s / 2;
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(theta), dy = -std::sin(theta);
  std::vector<double> k(size_t(s) * s, 0.0);
  const int samples = 4 * length;
  const double half = (length - 1) / 2.0;
  for (int i = 0; i < samples; ++i) {
    const double t = samples == 1 ? 0.0 : -half + 2.0 * half * i / (samples - 1);
    const int x = center + static_cast<int>(std::lround(t * dx));
    const int y = center + static_cast<int>(std::lround(t * dy));
    if (x >= 0 && x < s && y >= 0 && y < s) k[size_t(y) * s + x] = 1.0;
  }
  double total = 0.0;
  for (double v : k) total += v;
  for (double& v : k) v /= total;
  if (size) *size = s;
  return k;
}

ImagePair synthesize_rain(const Tensor& clean, const RainParams& p, const std::string& id) {
  require_image(clean, "synthesize_rain");
  p.validate();
  const int64_t h = clean.dim(2), w = clean.dim(3), plane = h * w;
  int s = 0;
  const auto kernel = streak_kernel(p.streak_length, p.angle_deg, &s);
  const int half = s / 2;

  Rng rng(p.seed);
  const double threshold = 1.0 - p.streak_density;
  std::vector<double> streaks(size_t(plane), 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (rng.uniform() < threshold) continue;
      for (int ky = 0; ky < s; ++ky) {
        const int64_t yy = y + ky - half;
        if (yy < 0 || yy >= h) continue;
        for (int kx = 0; kx < s; ++kx) {
          const int64_t xx = x + kx - half;
          if (xx < 0 || xx >= w) continue;
          streaks[yy * w + xx] += kernel[size_t(ky) * s + kx];
        }
      }
    }

  const auto src = clean.to_vector();
  std::vector<double> rainy(src.size());
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      rainy[c * plane + i] = std::clamp(src[c * plane + i] + p.intensity * streaks[i], 0.0, 1.0);
  return {Tensor::from_vector(clean.shape(), rainy, clean.dtype()), clean.detach(), id};
}

Tensor procedural_clean(uint64_t seed, int64_t height, int64_t width) {
  Rng rng(seed);
  std::vector<double> img(size_t(3 * height * width));
  const int64_t plane = height * width;
  double base[3], gy[3], gx[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.2 + 0.5 * rng.uniform();
    gy[c] = 0.3 * (rng.uniform() - 0.5);
    gx[c] = 0.3 * (rng.uniform() - 0.5);
  }
  const double fy = 1.0 + 3.0 * rng.uniform(), fx = 1.0 + 3.0 * rng.uniform();
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  for (int64_t y = 0; y < height; ++y)
    for (int64_t x = 0; x < width; ++x) {
      const double u = double(y) / height, v = double(x) / width;
      const double wave = 0.08 * std::sin(2.0 * std::numbers::pi * (fy * u + fx * v) + phase);
      for (int c = 0; c < 3; ++c) img[c * plane + y * width + x] = base[c] + gy[c] * u + gx[c] * v + wave;
    }

  const int shapes = 3 + static_cast<int>(rng.below(4));
  for (int k = 0; k < shapes; ++k) {
    const bool ellipse = rng.uniform() < 0.5;
    const double cy = rng.uniform() * height, cx = rng.uniform() * width;
    const double ry = (0.08 + 0.2 * rng.uniform()) * height, rx = (0.08 + 0.2 * rng.uniform()) * width;
    double color[3];
    for (double& col : color) col = 0.1 + 0.8 * rng.uniform();
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x) {
        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
        const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img[c * plane + y * width + x] = color[c];
      }
  }
  // Quantize to 8 bits so the in-memory image equals its PNG round trip.
  for (double& v : img) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return Tensor::from_vector({1, 3, height, width}, img);
}

namespace {

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") out.emplace(entry.path().filename().string(), entry.path());
  }
  return out;
}

ImagePair load_checked_pair(const fs::path& rainy, const fs::path& clean, const std::string& id) {
  ImagePair pair{load_png(rainy), load_png(clean), id};
  if (pair.rainy.shape() != pair.clean.shape()) {
    throw ShapeError("pair '" + id + "': rainy " + shape_str(pair.rainy.shape()) + " vs clean " +
                     shape_str(pair.clean.shape()));
  }
  return pair;
}

}  // namespace

PairLoadReport load_pairs(const fs::path& rainy_dir, const fs::path& clean_dir) {
  const auto rainy = list_pngs(rainy_dir);
  const auto clean = list_pngs(clean_dir);
  PairLoadReport report;
  for (const auto& [name, path] : rainy) {
    auto it = clean.find(name);
    if (it == clean.end()) {
      report.skipped.push_back(name);
      continue;
    }
    report.pairs.push_back(load_checked_pair(path, it->second, fs::path(name).stem().string()));
  }
  for (const auto& [name, path] : clean)
    if (!rainy.count(name)) report.skipped.push_back(name);
  std::sort(report.skipped.begin(), report.skipped.end());
  return report;
}

void write_manifest(const fs::path& path, const Manifest& m) {
  json doc;
  doc["pairs"] = json::array();
  for (const auto& e : m.pairs) doc["pairs"].push_back({{"rainy", e.rainy}, {"clean", e.clean}, {"id", e.id}});
  if (m.generator) {
    const RainParams& g = *m.generator;
    doc["generator"] = {{"seed", g.seed},
                        {"streak_density", g.streak_density},
                        {"streak_length", g.streak_length},
                        {"angle_deg", g.angle_deg},
                        {"intensity", g.intensity}};
  } else {
    doc["generator"] = nullptr;
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << doc.dump(2) << "\n";
  if (!f) throw IoError("failed writing " + path.string());
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  try {
    const json doc = json::parse(f);
    for (const auto& e : doc.at("pairs")) {
      m.pairs.push_back({e.at("rainy").get<std::string>(), e.at("clean").get<std::string>(),
                         e.at("id").get<std::string>()});
    }
    if (doc.contains("generator") && !doc["generator"].is_null()) {
      const auto& g = doc["generator"];
      RainParams p;
      p.seed = g.at("seed").get<uint64_t>();
      p.streak_density = g.at("streak_density").get<double>();
      p.streak_length = g.at("streak_length").get<int>();
      p.angle_deg = g.at("angle_deg").get<double>();
      p.intensity = g.at("intensity").get<double>();
      m.generator = p;
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

Dataset load_manifest_pairs(const fs::path& path) {
  const Manifest m = read_manifest(path);
  const fs::path root = path.parent_path();
  Dataset out;
  for (const auto& e : m.pairs) out.push_back(load_checked_pair(root / e.rainy, root / e.clean, e.id));
  std::sort(out.begin(), out.end(), [](const ImagePair& a, const ImagePair& b) { return a.id < b.id; });
  return out;
}

void holdout_split(const Dataset& all, int stride, Dataset& train, Dataset& held_out) {
  train.clear();
  held_out.clear();
  for (size_t i = 0; i < all.size(); ++i) {
    if (stride > 0 && (i + 1) % size_t(stride) == 0) {
      held_out.push_back(all[i]);
    } else {
      train.push_back(all[i]);
    }
  }
}

}  // namespace dpm
