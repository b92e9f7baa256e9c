#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include "dpm/checkpoint.hpp"
#include "dpm/errors.hpp"
#include "dpm/gradcheck.hpp"
#include "dpm/metrics.hpp"

namespace dpm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v, const char* spec = "%.4f") {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<fs::path> pngs_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw IoError("failed writing " + path.string());
}

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "invalid request: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
}

SplitMetrics measure(const std::string& split, const DPMformer& model, const Dataset& data) {
  SplitMetrics m;
  m.split = split;
  m.count = int(data.size());
  const EvalMetrics e = evaluate(model, data);
  m.psnr = e.psnr;
  m.ssim = e.ssim;
  for (const auto& p : data) m.input_psnr += psnr_y(p.rainy, p.clean) / double(data.size());
  return m;
}

json split_json(const SplitMetrics& m) {
  return {{"count", m.count}, {"psnr", metric_json(m.psnr)}, {"ssim", m.ssim}, {"input_psnr", metric_json(m.input_psnr)}};
}

// ---- make-data ------------------------------------------------------------

struct MakeDataArgs {
  std::string clean_dir;
  std::string out_dir;
  RainParams rain;
  int count = 4;
  int size = 64;
};

int make_data(const MakeDataArgs& a, std::ostream& out) {
  a.rain.validate();
  if (a.count < 1) throw ConfigError("--count must be >= 1");

  std::vector<std::pair<std::string, Tensor>> cleans;
  if (!a.clean_dir.empty()) {
    const auto files = pngs_in(a.clean_dir);
    if (int(files.size()) < a.count) {
      throw ConfigError("--count " + std::to_string(a.count) + " but " + a.clean_dir + " holds only " +
                        std::to_string(files.size()) + " PNG files");
    }
    for (int i = 0; i < a.count; ++i) cleans.emplace_back(files[size_t(i)].stem().string(), load_png(files[size_t(i)]));
  } else {
    if (a.size < 16 || a.size % 16) throw ConfigError("--size must be a positive multiple of 16");
    for (int i = 0; i < a.count; ++i) {
      char id[16];
      std::snprintf(id, sizeof id, "%04d", i);
      cleans.emplace_back(id, procedural_clean(a.rain.seed + uint64_t(i), a.size, a.size));
    }
  }

  const fs::path root = a.out_dir;
  try {
    fs::create_directories(root / "rainy");
    fs::create_directories(root / "clean");
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create output directory " + root.string() + ": " + e.code().message());
  }
  Manifest manifest;
  manifest.generator = a.rain;
  for (size_t i = 0; i < cleans.size(); ++i) {
    RainParams p = a.rain;
    p.seed = a.rain.seed + i;
    const auto& [id, clean] = cleans[i];
    const ImagePair pair = synthesize_rain(clean, p, id);
    const std::string name = id + ".png";
    save_png(root / "rainy" / name, pair.rainy);
    save_png(root / "clean" / name, pair.clean);
    manifest.pairs.push_back({"rainy/" + name, "clean/" + name, id});
  }
  write_manifest(root / "manifest.json", manifest);
  out << "wrote " << cleans.size() << " pairs and manifest.json to " << root.string() << "\n";
  return kOk;
}

// ---- derain ---------------------------------------------------------------

struct DerainArgs {
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string out_dir;
  std::string config;
};

int derain(const DerainArgs& a, std::ostream& out) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  DPMformer model = a.config.empty() ? model_from_checkpoint(ck) : [&] {
    DPMformer m = DPMformer::make(load_config_file(a.config).model);
    load_parameters(m, ck);
    return m;
  }();

  std::vector<fs::path> files;
  for (const auto& in : a.inputs) {
    if (fs::is_directory(in)) {
      const auto found = pngs_in(in);
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  if (files.empty()) throw ConfigError("derain: no input images");
  std::map<std::string, fs::path> seen;
  for (const auto& f : files) {
    auto [it, fresh] = seen.emplace(f.filename().string(), f);
    if (!fresh) throw ConfigError("derain: inputs " + it->second.string() + " and " + f.string() + " share an output name");
  }

  fs::create_directories(a.out_dir);
  for (const auto& f : files) {
    const Tensor image = load_png(f);
    const int64_t h = image.dim(2), w = image.dim(3);
    const int64_t ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
    out << f.filename().string() << ": " << h << "x" << w;
    if (ph != h || pw != w) out << ", reflect-padded to " << ph << "x" << pw << " and cropped back";
    out << "\n";
    save_png(fs::path(a.out_dir) / f.filename(), restore_image(model, image));
  }
  out << "wrote " << files.size() << " images to " << a.out_dir << "\n";
  return kOk;
}

// ---- eval -----------------------------------------------------------------

int eval_dirs(const std::string& pred_dir, const std::string& gt_dir, std::ostream& out, std::ostream& err) {
  const PairLoadReport rep = load_pairs(pred_dir, gt_dir);
  if (!rep.skipped.empty()) {
    err << "unmatched files (present in only one directory):";
    for (const auto& s : rep.skipped) err << " " << s;
    err << "\n";
    return kUsage;
  }
  if (rep.pairs.empty()) throw ConfigError("eval: no PNG files in " + pred_dir);
  json images = json::array();
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto& p : rep.pairs) {
    const double ps = psnr_y(p.rainy, p.clean);
    const double ss = ssim_y(p.rainy, p.clean);
    psnr_sum += ps;
    ssim_sum += ss;
    images.push_back({{"name", p.id + ".png"}, {"psnr", metric_json(ps)}, {"ssim", ss}});
  }
  const double n = double(rep.pairs.size());
  json doc = {{"count", rep.pairs.size()},
              {"images", images},
              {"mean", {{"psnr", metric_json(psnr_sum / n)}, {"ssim", ssim_sum / n}}}};
  out << doc.dump(2) << "\n";
  return kOk;
}

// ---- gradcheck ------------------------------------------------------------

int gradcheck(const std::string& module, uint64_t seed, std::ostream& out, std::ostream& err) {
  std::vector<std::string> modules;
  if (module == "all") {
    modules = gradcheck_modules();
  } else {
    modules.push_back(module);
  }
  bool ok = true;
  for (const auto& m : modules) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradcheckSuite suite = run_gradcheck_suite(m, seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char line[160];
    std::snprintf(line, sizeof line, "%-8s cases %2zu  max rel err %.3e  %s  (%.1fs)\n", m.c_str(),
                  suite.cases.size(), suite.max_rel_err(), suite.passed() ? "PASS" : "FAIL", secs);
    out << line;
    for (const auto& c : suite.cases) {
      if (c.passed()) continue;
      ok = false;
      err << "  " << m << "/" << c.name << ": rel err " << num(c.max_rel_err, "%.3e") << " >= " << num(c.threshold, "%.0e")
          << "\n";
    }
  }
  return ok ? kOk : kCheckFailed;
}

// ---- params ---------------------------------------------------------------

int params(const std::string& config, std::ostream& out) {
  constexpr double kReference = 9.09e6;
  for (FinalWidth fw : {FinalWidth::kC, FinalWidth::kTwiceC}) {
    ModelConfig c = ModelConfig::full();
    c.backbone.final_width = fw;
    c.branch.final_width = fw;
    const int64_t n = parameter_count(DPMformer::make(c));
    const double rel = double(n) / kReference - 1.0;
    out << "full, final_width " << (fw == FinalWidth::kC ? "C " : "2C") << ": " << n << " parameters ("
        << num(double(n) / 1e6, "%.3f") << "M, " << num(100 * rel, "%+.1f") << "% vs 9.09M reference, "
        << (std::abs(rel) <= 0.3 ? "inside" : "outside") << " the +/-30% band)\n";
  }
  if (!config.empty()) {
    const RunConfig rc = load_config_file(config);
    out << config << ": " << parameter_count(DPMformer::make(rc.model)) << " parameters\n";
  }
  return kOk;
}

}  // namespace

json metric_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

RunConfig load_config_file(const fs::path& path) {
  RunConfig cfg = load_run_config(path);
  const fs::path base = path.parent_path();
  for (std::string* p : {&cfg.data.manifest, &cfg.data.rainy_dir, &cfg.data.clean_dir, &cfg.data.eval_manifest}) {
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return cfg;
}

void write_resolved_config(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_json(fs::path(cfg.output_dir) / "config.resolved.json", to_json(cfg));
}

TrainSummary train_from_config(const RunConfig& cfg, std::ostream& out, const std::string& resume) {
  write_resolved_config(cfg);
  Dataset train_set, held_out;
  load_run_data(cfg.data, train_set, held_out);
  DPMformer model = DPMformer::make(cfg.model);

  TrainOptions opts;
  opts.output_dir = cfg.output_dir;
  if (!held_out.empty()) opts.eval_data = &held_out;
  if (!resume.empty()) {
    const Checkpoint ck = read_checkpoint(resume);
    load_parameters(model, ck);
    opts.resume = optimizer_state_from_checkpoint(ck, model);
  }
  const int64_t total = int64_t(cfg.train.epochs) * steps_per_epoch(train_set.size(), cfg.train.batch_size);
  const int64_t every = std::max<int64_t>(1, total / 20);
  out << "training " << parameter_count(model) << " parameters on " << train_set.size() << " pairs ("
      << held_out.size() << " held out), " << total << " steps\n";
  opts.on_step = [&](const StepRecord& r) {
    if (r.step % every && r.step != total) return;
    out << "step " << r.step << "/" << total << "  epoch " << r.epoch << "  lr " << num(r.lr, "%.3e") << "  loss "
        << num(r.loss_total, "%.5f") << "  (char " << num(r.loss_char, "%.5f") << ", edge " << num(r.loss_edge, "%.5f")
        << ", fft " << num(r.loss_fft, "%.5f") << ")\n"
        << std::flush;
  };

  TrainSummary s;
  s.report = train(model, train_set, cfg.train, opts);
  s.final_checkpoint = s.report.checkpoints.back();
  s.metrics.push_back(measure("train", model, train_set));
  if (!held_out.empty()) s.metrics.push_back(measure("held_out", model, held_out));

  json doc;
  doc["steps"] = s.report.steps.size();
  doc["final_loss"] = s.report.steps.empty() ? json(nullptr) : json(s.report.steps.back().loss_total);
  doc["checkpoint"] = s.final_checkpoint.string();
  for (const auto& m : s.metrics) doc["splits"][m.split] = split_json(m);
  write_json(fs::path(cfg.output_dir) / "metrics.json", doc);
  for (const auto& m : s.metrics) {
    out << m.split << ": psnr " << num(m.psnr) << " dB, ssim " << num(m.ssim) << " (rainy input psnr "
        << num(m.input_psnr) << " dB, " << m.count << " images)\n";
  }
  out << "checkpoint: " << s.final_checkpoint.string() << "\n";
  return s;
}

std::vector<RunConfig> ablation_configs(const RunConfig& base) {
  const struct {
    const char* dir;
    bool mp, c2f;
  } variants[] = {{"a_multipatch", true, false}, {"b_coarse2fine", false, true}, {"c_dual_path", true, true}};
  std::vector<RunConfig> out;
  for (const auto& v : variants) {
    RunConfig c = base;
    c.model.enable_multipatch = v.mp;
    c.model.enable_coarse2fine = v.c2f;
    c.output_dir = (fs::path(base.output_dir) / v.dir).string();
    out.push_back(c);
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, std::ostream& out) {
  static const char* kLabels[] = {"multi-patch only", "coarse-to-fine only", "dual-path"};
  std::vector<AblationRow> rows;
  const auto configs = ablation_configs(base);
  for (size_t i = 0; i < configs.size(); ++i) {
    const RunConfig& c = configs[i];
    out << "== variant (" << char('a' + i) << ") " << kLabels[i] << "\n";
    const TrainSummary s = train_from_config(c, out);
    AblationRow r;
    r.variant = std::string(1, char('a' + i));
    r.label = kLabels[i];
    r.multipatch = c.model.enable_multipatch;
    r.coarse2fine = c.model.enable_coarse2fine;
    r.parameters = parameter_count(DPMformer::make(c.model));
    r.final_loss = s.report.steps.back().loss_total;
    r.train = s.metrics[0];
    if (s.metrics.size() > 1) r.held_out = s.metrics[1];
    rows.push_back(r);
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string t =
      "| variant | multi-patch | coarse-to-fine | params | final loss | rainy PSNR | train PSNR | train SSIM | "
      "held-out PSNR | held-out SSIM |\n"
      "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const bool h = r.held_out.count > 0;
    t += "| (" + r.variant + ") " + r.label + " | " + (r.multipatch ? "on" : "off") + " | " +
         (r.coarse2fine ? "on" : "off") + " | " + std::to_string(r.parameters) + " | " + num(r.final_loss, "%.5f") +
         " | " + num(r.train.input_psnr, "%.2f") + " | " + num(r.train.psnr, "%.2f") + " | " +
         num(r.train.ssim, "%.4f") + " | " + (h ? num(r.held_out.psnr, "%.2f") : "-") + " | " +
         (h ? num(r.held_out.ssim, "%.4f") : "-") + " |\n";
  }
  if (rows.size() == 3) {
    const bool h = rows[2].held_out.count > 0;
    auto score = [&](const AblationRow& r) { return h ? r.held_out.psnr : r.train.psnr; };
    const bool holds = score(rows[2]) >= score(rows[0]) && score(rows[2]) >= score(rows[1]);
    t += std::string("\ndual-path >= each single path (") + (h ? "held-out" : "train") +
         " PSNR): " + (holds ? "yes" : "no") + " (reported only; not asserted at this scale)\n";
  }
  return t;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-path multi-scale deraining transformer: data, training, inference and checks"};
  app.require_subcommand(1);

  MakeDataArgs md;
  auto* make = app.add_subcommand("make-data", "synthesize rainy/clean PNG pairs and a manifest");
  make->add_option("--clean-dir", md.clean_dir, "clean PNGs to degrade (default: procedural images)")
      ->check(CLI::ExistingDirectory);
  make->add_option("--out-dir", md.out_dir, "output directory")->required();
  make->add_option("--seed", md.rain.seed, "base seed; pair i uses seed + i");
  make->add_option("--density", md.rain.streak_density, "fraction of pixels seeding a streak, in [0, 1)");
  make->add_option("--length", md.rain.streak_length, "streak length in pixels");
  make->add_option("--angle", md.rain.angle_deg, "streak angle in degrees from horizontal");
  make->add_option("--intensity", md.rain.intensity, "streak brightness in [0, 1]");
  make->add_option("--count", md.count, "number of pairs");
  make->add_option("--size", md.size, "side of procedural clean images (multiple of 16)");

  std::string train_config, train_out, resume;
  auto* tr = app.add_subcommand("train", "train from a run config");
  tr->add_option("--config", train_config, "run config JSON")->required();
  tr->add_option("--output-dir", train_out, "override output_dir");
  tr->add_option("--resume", resume, "continue from a checkpoint written by an earlier run");

  DerainArgs dr;
  auto* der = app.add_subcommand("derain", "restore PNG images with a trained checkpoint");
  der->add_option("--checkpoint", dr.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  der->add_option("--in", dr.inputs, "input PNG files or directories")->required();
  der->add_option("--out", dr.out_dir, "output directory")->required();
  der->add_option("--config", dr.config, "run config whose model must match the checkpoint");

  std::string pred_dir, gt_dir;
  auto* ev = app.add_subcommand("eval", "Y-channel PSNR/SSIM of predictions against ground truth");
  ev->add_option("--pred-dir", pred_dir)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--gt-dir", gt_dir)->required()->check(CLI::ExistingDirectory);

  std::string gc_module = "all";
  uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "64-bit finite-difference gradient checks");
  std::vector<std::string> choices = gradcheck_modules();
  choices.insert(choices.begin(), "all");
  gc->add_option("--module", gc_module)->check(CLI::IsMember(choices));
  gc->add_option("--seed", gc_seed);

  std::string ab_config, ab_out;
  auto* ab = app.add_subcommand("ablation", "train the three path variants and compare them");
  ab->add_option("--config", ab_config, "base run config")->required();
  ab->add_option("--output-dir", ab_out, "override output_dir (one subdirectory per variant)");

  std::string params_config;
  auto* pc = app.add_subcommand("params", "parameter counts of the full model");
  pc->add_option("--config", params_config, "also count the model of this run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  return guarded(
      [&]() -> int {
        if (*make) return make_data(md, out);
        if (*tr) {
          RunConfig cfg = load_config_file(train_config);
          if (!train_out.empty()) cfg.output_dir = train_out;
          train_from_config(cfg, out, resume);
          return kOk;
        }
        if (*der) return derain(dr, out);
        if (*ev) return eval_dirs(pred_dir, gt_dir, out, err);
        if (*gc) return gradcheck(gc_module, gc_seed, out, err);
        if (*ab) {
          RunConfig cfg = load_config_file(ab_config);
          if (!ab_out.empty()) cfg.output_dir = ab_out;
          const auto rows = run_ablation(cfg, out);
          const std::string table = ablation_table(rows);
          json doc = json::array();
          for (const auto& r : rows) {
            doc.push_back({{"variant", r.variant},
                           {"label", r.label},
                           {"enable_multipatch", r.multipatch},
                           {"enable_coarse2fine", r.coarse2fine},
                           {"parameters", r.parameters},
                           {"final_loss", r.final_loss},
                           {"train", split_json(r.train)},
                           {"held_out", r.held_out.count ? split_json(r.held_out) : json(nullptr)}});
          }
          write_json(fs::path(cfg.output_dir) / "ablation.json", doc);
          std::ofstream(fs::path(cfg.output_dir) / "ablation.md") << table;
          out << "\n" << table;
          return kOk;
        }
        return params(params_config, out);
      },
      err);
}

}  // namespace dpm::cli
