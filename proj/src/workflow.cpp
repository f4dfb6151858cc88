#include "eupe/workflow.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "eupe/checkpoint.hpp"
#include "eupe/error.hpp"
#include "eupe/rng.hpp"

namespace fs = std::filesystem;

namespace eupe {

namespace {

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw IoError("missing " + what + ": " + p.string());
}

}  // namespace

fs::path RunContext::resolve(const std::string& path) const {
  fs::path p(path);
  if (p.is_absolute() || config_path.empty()) return p;
  return config_path.parent_path() / p;
}

fs::path RunContext::stage_dir(StageKind kind) const { return out_root / stage_dir_name(kind); }

fs::path RunContext::stats_path(const std::string& teacher) const { return out_root / "stats" / (teacher + ".stats"); }

RunContext open_run(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed) {
  RunContext run;
  run.config_path = config_path;
  run.config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (seed) run.config.seed = *seed;
  if (!out_dir.empty()) {
    run.out_root = out_dir;
  } else if (const char* env = std::getenv("EUPE_OUT_DIR"); env != nullptr && *env != '\0') {
    run.out_root = env;
  } else if (!run.config.out_dir.empty()) {
    run.out_root = run.resolve(run.config.out_dir);
  } else {
    run.out_root = "runs";
  }
  return run;
}

std::string stage_dir_name(StageKind kind) {
  const std::string s = to_string(kind);
  return s.size() == 1 ? "stage" + s : s;
}

void save_stats(const fs::path& path, const std::string& teacher, const TeacherStats& s) {
  Checkpoint c;
  c.meta["format"] = "eupe-stats";
  c.meta["teacher"] = teacher;
  c.meta["sample_count"] = std::to_string(s.sample_count);
  c.put("class_mean", s.class_mean);
  c.put("class_std", s.class_std);
  c.put("patch_mean", s.patch_mean);
  c.put("patch_std", s.patch_std);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, c);
}

TeacherStats load_stats(const fs::path& path) {
  Checkpoint c = load_checkpoint(path);
  if (c.get_or("format", "") != "eupe-stats") throw FormatError(path.string() + " is not a statistics file");
  TeacherStats s;
  s.class_mean = c.tensor("class_mean");
  s.class_std = c.tensor("class_std");
  s.patch_mean = c.tensor("patch_mean");
  s.patch_std = c.tensor("patch_std");
  s.sample_count = c.get_u64("sample_count");
  return s;
}

void write_teacher(const fs::path& path, const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint c;
  c.meta["format"] = "eupe-teacher";
  c.meta["seed"] = std::to_string(seed);
  store_encoder(c, "encoder", init_params(config, seed));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, c);
}

TeacherBinding load_teacher(const RunContext& run, const TeacherSpec& spec) {
  const fs::path path = run.resolve(spec.checkpoint);
  require_file(path, "teacher checkpoint for '" + spec.name + "'");
  TeacherBinding b;
  b.name = spec.name;
  b.gamma = spec.gamma;
  b.teacher = load_encoder(load_checkpoint(path), "encoder");
  b.native_resolution = b.teacher.config.image_size;
  return b;
}

SyntheticSpec split_spec(const RunConfig& config, const std::string& split) {
  SyntheticSpec spec = config.data;
  if (split == "eval") {
    spec.seed = derive_seed(config.seed, 202);
  } else if (split == "curated") {
    spec.seed = derive_seed(config.seed, 200);
  } else if (split == "web") {
    spec.seed = derive_seed(config.seed, 201);
    spec.distractors = config.web_distractors;
  } else {
    throw ConfigError("unknown split '" + split + "' (expected eval, curated or web)");
  }
  return spec;
}

std::vector<Sample> load_corpus(const RunContext& run, const std::string& dir) {
  if (dir.empty()) return generate_corpus(split_spec(run.config, "eval"));
  const fs::path p = run.resolve(dir);
  if (!fs::is_directory(p)) throw IoError("missing corpus directory: " + p.string());
  return import_corpus(p).samples;
}

Checkpoint load_stage_checkpoint(const RunContext& run, const std::string& path) {
  const fs::path p = path.empty() ? run.stage_dir(StageKind::Stage3) / "final.ckpt" : run.resolve(path);
  require_file(p, "checkpoint");
  return load_checkpoint(p);
}

std::vector<TeacherStats> calibrate_run(const RunContext& run) {
  if (run.config.teachers.empty()) throw ConfigError("no teachers configured");
  const auto pool = run.config.datasets().calibration_pool(run.config.calibration_images);
  std::vector<TeacherStats> out;
  for (const auto& spec : run.config.teachers) {
    TeacherBinding b = load_teacher(run, spec);
    out.push_back(calibrate_stats(b, pool));
    save_stats(run.stats_path(spec.name), spec.name, out.back());
  }
  return out;
}

StageResult train_run(const RunContext& run, StageKind kind, bool resume, std::size_t stop_after) {
  StageConfig sc = run.config.stage_config(kind);
  std::optional<Checkpoint> previous;
  if (auto pre = prerequisite(kind)) {
    const fs::path p = run.stage_dir(*pre) / "final.ckpt";
    if (!fs::exists(p))
      throw StateError("stage " + to_string(kind) + " needs the final stage " + to_string(*pre) + " checkpoint at " +
                       p.string());
    previous = load_checkpoint(p);
  } else {
    if (run.config.teachers.empty()) throw ConfigError("stage " + to_string(kind) + " needs at least one teacher");
    for (const auto& spec : run.config.teachers) {
      TeacherBinding b = load_teacher(run, spec);
      const fs::path sp = run.stats_path(spec.name);
      if (fs::exists(sp)) {
        b.stats = load_stats(sp);
        if (b.stats.dim() != b.dim()) throw ShapeMismatchError("statistics in " + sp.string() + " do not fit " + spec.name);
      }
      sc.teachers.push_back(std::move(b));
    }
  }

  RunOptions opt;
  opt.out_dir = run.stage_dir(kind);
  opt.previous = previous ? &*previous : nullptr;
  opt.resume = resume;
  opt.stop_after = stop_after;
  if (resume && !fs::exists(opt.out_dir / "last.ckpt")) throw IoError("nothing to resume in " + opt.out_dir.string());
  return run_stage(sc, run.config.datasets(), opt);
}

EvalReport evaluate_run(const RunContext& run, const std::string& checkpoint, const std::string& corpus,
                        std::vector<std::string> protocols) {
  if (protocols.empty()) protocols = kProtocols;
  validate_protocols(protocols);
  const RunConfig& cfg = run.config;
  const Checkpoint ckpt = load_stage_checkpoint(run, checkpoint);
  const EncoderParams encoder = load_encoder(ckpt, "student");
  const auto samples = load_corpus(run, corpus);

  std::optional<TeacherBinding> zeroshot;
  if (std::find(protocols.begin(), protocols.end(), "zeroshot") != protocols.end()) {
    auto stored = stored_teachers(ckpt);
    if (stored.empty()) throw ConfigError("checkpoint has no teacher for zero-shot");
    auto it = std::find_if(stored.begin(), stored.end(),
                           [&](const TeacherBinding& b) { return b.name == cfg.zeroshot_teacher; });
    if (!cfg.zeroshot_teacher.empty() && it == stored.end())
      throw ConfigError("checkpoint has no teacher named '" + cfg.zeroshot_teacher + "'");
    zeroshot = it == stored.end() ? stored.front() : *it;
  }
  EvalSettings settings = cfg.eval;
  settings.seed = cfg.seed;
  EvalReport report = run_protocols(encoder, samples, protocols, settings, zeroshot ? &*zeroshot : nullptr);

  const fs::path dir = run.out_root / "eval";
  fs::create_directories(dir);
  std::ofstream(dir / "report.csv", std::ios::binary) << report.csv();
  std::ofstream(dir / "report.txt", std::ios::binary) << report.text();
  return report;
}

std::vector<fs::path> visualize_run(const RunContext& run, const std::string& checkpoint, const std::string& corpus,
                                    std::size_t count, std::vector<std::size_t> resolutions) {
  const Checkpoint ckpt = load_stage_checkpoint(run, checkpoint);
  const EncoderParams encoder = load_encoder(ckpt, "student");
  const auto samples = load_corpus(run, corpus);
  if (resolutions.empty()) resolutions = run.config.visualize_resolutions;
  if (resolutions.empty()) resolutions = {encoder.config.image_size};
  for (std::size_t res : resolutions)
    if (res == 0 || res % encoder.config.patch_size != 0)
      throw ConfigError("resolution " + std::to_string(res) + " is not a multiple of the patch size");

  const fs::path dir = run.out_root / "visualize";
  fs::create_directories(dir);
  const std::size_t n = count == 0 ? samples.size() : std::min(count, samples.size());
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t res : resolutions) {
      const EncoderOutput out = encode_images(encoder, std::span<const Tensor>(&samples[i].image, 1), res);
      const PcaImage pca = pca_rgb(out.patch_tokens, out.grid);
      char name[64];
      std::snprintf(name, sizeof name, "image%03zu_r%zu.ppm", i, res);
      write_ppm(dir / name, pca.image);
      written.push_back(dir / name);
    }
  }
  return written;
}

}  // namespace eupe
