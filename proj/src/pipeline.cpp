#include "eupe/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "eupe/error.hpp"
#include "eupe/tape.hpp"

namespace eupe {

namespace {

constexpr std::uint64_t kStreamData = 1;
constexpr std::uint64_t kStreamStudentScale = 2;
constexpr std::uint64_t kStreamTeacherScale = 3;
constexpr std::uint64_t kStreamAugment = 4;
constexpr std::uint64_t kStreamStudentInit = 100;
constexpr std::uint64_t kStreamHeadInit = 101;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void store_head(Checkpoint& ckpt, const std::string& prefix, const AdapterHead& head) {
  for (const auto& [name, t] : head.named_tensors()) ckpt.put(prefix + "." + name, t);
}

AdapterHead load_head(const Checkpoint& ckpt, const std::string& prefix) {
  AdapterHead h;
  h.in_weight = ckpt.tensor(prefix + ".in_weight").clone();
  h.norm_gain = ckpt.tensor(prefix + ".norm_gain").clone();
  h.norm_bias = ckpt.tensor(prefix + ".norm_bias").clone();
  h.out_weight = ckpt.tensor(prefix + ".out_weight").clone();
  if (h.in_weight.rank() != 2 || h.out_weight.rank() != 2 || h.norm_gain.numel() != h.hidden() ||
      h.norm_bias.numel() != h.hidden() || h.out_weight.dim(0) != h.hidden()) {
    throw ShapeMismatchError("adapter head '" + prefix + "' has inconsistent shapes");
  }
  return h;
}

bool head_fits(const AdapterHead& head, std::size_t in_dim, std::size_t out_dim) {
  return head.in_weight.defined() && head.in_dim() == in_dim && head.out_dim() == out_dim;
}

void copy_into(const Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw ShapeMismatchError("tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                             shape_str(dst.shape()));
  }
  Tensor d = dst;
  std::copy(src.data().begin(), src.data().end(), d.mutable_data().begin());
}

}  // namespace

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::Stage1: return "1";
    case StageKind::Stage2: return "2";
    case StageKind::Stage3: return "3";
    case StageKind::Stage2Only: return "stage2-only";
    case StageKind::Stage1Plus3: return "stage1+3";
  }
  return "?";
}

StageKind parse_stage(const std::string& text) {
  if (text == "1") return StageKind::Stage1;
  if (text == "2") return StageKind::Stage2;
  if (text == "3") return StageKind::Stage3;
  if (text == "stage2-only") return StageKind::Stage2Only;
  if (text == "stage1+3") return StageKind::Stage1Plus3;
  throw ConfigError("unknown stage '" + text + "' (expected 1, 2, 3, stage2-only or stage1+3)");
}

bool is_multi_resolution(StageKind kind) { return kind == StageKind::Stage3 || kind == StageKind::Stage1Plus3; }

std::optional<StageKind> prerequisite(StageKind kind) {
  switch (kind) {
    case StageKind::Stage2:
    case StageKind::Stage1Plus3: return StageKind::Stage1;
    case StageKind::Stage3: return StageKind::Stage2;
    default: return std::nullopt;
  }
}

void DataMix::validate() const {
  if (!(homogeneous_prob >= 0.0 && homogeneous_prob <= 1.0)) throw ConfigError("homogeneous_prob must be in [0, 1]");
  if (heterogeneous.empty() && homogeneous_prob < 1.0) throw ConfigError("data mix needs a heterogeneous dataset");
}

void DatasetRegistry::add(const std::string& id, std::vector<Tensor> images) {
  if (images.empty()) throw ConfigError("dataset '" + id + "' is empty");
  sets_[id] = std::move(images);
}

const std::vector<Tensor>& DatasetRegistry::images(const std::string& id) const {
  auto it = sets_.find(id);
  if (it == sets_.end()) throw ConfigError("dataset '" + id + "' is not registered");
  return it->second;
}

std::vector<Tensor> DatasetRegistry::calibration_pool(std::size_t limit) const {
  std::vector<Tensor> all;
  for (const auto& [id, images] : sets_) all.insert(all.end(), images.begin(), images.end());
  if (limit == 0 || all.size() <= limit) return all;
  std::vector<Tensor> out;
  out.reserve(limit);
  for (std::size_t i = 0; i < limit; ++i) out.push_back(all[i * all.size() / limit]);
  return out;
}

BatchDraw sample_batch(const DataMix& mix, const DatasetRegistry& data, std::size_t batch_size, Rng& rng) {
  mix.validate();
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  BatchDraw draw;
  draw.homogeneous = rng.bernoulli(mix.homogeneous_prob);
  draw.images.reserve(batch_size);
  if (draw.homogeneous) {
    const auto& set = data.images(mix.homogeneous);
    for (std::size_t i = 0; i < batch_size; ++i) draw.images.push_back(set[rng.below(set.size())]);
    return draw;
  }
  for (const auto& id : mix.heterogeneous) data.images(id);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& set = data.images(mix.heterogeneous[rng.below(mix.heterogeneous.size())]);
    draw.images.push_back(set[rng.below(set.size())]);
  }
  return draw;
}

std::pair<std::size_t, std::size_t> select_scales(std::span<const std::size_t> pyramid, Rng& student_rng,
                                                  Rng& teacher_rng) {
  if (pyramid.empty()) throw ParameterError("resolution pyramid is empty");
  return {pyramid[student_rng.below(pyramid.size())], pyramid[teacher_rng.below(pyramid.size())]};
}

void StageConfig::validate() const {
  student.validate();
  datamix.validate();
  const std::string stage = "stage " + to_string(kind);
  if (resolutions.empty()) throw ConfigError(stage + " needs at least one resolution");
  if (is_multi_resolution(kind) && resolutions.size() < 2) {
    throw ConfigError(stage + " needs a pyramid of at least two resolutions");
  }
  if (!is_multi_resolution(kind) && resolutions.size() != 1) {
    throw ConfigError(stage + " trains at exactly one resolution");
  }
  for (std::size_t r : resolutions) {
    if (r == 0 || r % student.patch_size != 0) {
      throw ConfigError("resolution " + std::to_string(r) + " is not a multiple of the student patch size");
    }
  }
  const bool direct = kind == StageKind::Stage1 || kind == StageKind::Stage2Only;
  if (direct && teachers.empty()) throw ConfigError(stage + " needs at least one teacher");
  if (!direct && teachers.size() != 1) throw ConfigError(stage + " distills from exactly one teacher (the proxy)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("warmup_fraction must be in [0, 1)");
  if (flush_every == 0) throw ConfigError("flush_every must be positive");
}

Trainer::Trainer(StageConfig config, const DatasetRegistry& data) : config_(std::move(config)), data_(&data) {
  config_.validate();
  student_ = init_params(config_.student, derive_seed(config_.seed, kStreamStudentInit));
  Rng head_rng(derive_seed(config_.seed, kStreamHeadInit));
  const std::size_t ds = config_.student.dim;
  std::vector<Tensor> pool;
  for (auto& b : config_.teachers) {
    b.teacher.set_requires_grad(false);
    if (b.native_resolution == 0) b.native_resolution = b.teacher.config.image_size;
    const std::size_t dt = b.dim();
    const std::size_t hidden = config_.adapter_hidden > 0 ? config_.adapter_hidden : 4 * std::max(ds, dt);
    b.class_head = head_fits(b.class_head, ds, dt) ? b.class_head.clone() : init_adapter_head(ds, hidden, dt, head_rng);
    b.patch_head = head_fits(b.patch_head, ds, dt) ? b.patch_head.clone() : init_adapter_head(ds, hidden, dt, head_rng);
    if (!b.stats.calibrated()) {
      if (pool.empty()) pool = data.calibration_pool(config_.calibration_images);
      b.stats = calibrate_stats(b, pool);
    } else if (b.stats.dim() != dt) {
      throw ShapeMismatchError("statistics of teacher '" + b.name + "' do not match its width");
    }
  }
  state_.data = Rng(derive_seed(config_.seed, kStreamData));
  state_.student_scale = Rng(derive_seed(config_.seed, kStreamStudentScale));
  state_.teacher_scale = Rng(derive_seed(config_.seed, kStreamTeacherScale));
  state_.augment = Rng(derive_seed(config_.seed, kStreamAugment));
  auto params = trainable();
  for (auto& t : params) t.set_requires_grad(true);
  state_.adam = init_adam(params);
}

std::vector<Tensor> Trainer::trainable() const {
  std::vector<Tensor> out = student_.parameters();
  for (const auto& b : config_.teachers) {
    for (const auto& t : b.class_head.parameters()) out.push_back(t);
    for (const auto& t : b.patch_head.parameters()) out.push_back(t);
  }
  return out;
}

StepResult Trainer::step() {
  BatchDraw draw = sample_batch(config_.datamix, *data_, config_.batch_size, state_.data);
  StepResult r = train_step(draw.images);
  r.homogeneous = draw.homogeneous;
  return r;
}

StepResult Trainer::train_step(std::span<const Tensor> images) {
  if (images.empty()) throw ParameterError("training batch is empty");
  if (finished()) throw StateError("stage " + to_string(config_.kind) + " already ran all its steps");
  StepResult result;
  result.step = state_.step;
  result.lr = cosine_lr(state_.step, config_.total_steps, config_.base_lr, config_.warmup_fraction);

  std::size_t student_res = config_.resolutions.front();
  std::size_t teacher_res = 0;
  if (is_multi_resolution(config_.kind)) {
    std::tie(student_res, teacher_res) = select_scales(config_.resolutions, state_.student_scale, state_.teacher_scale);
  }
  result.student_resolution = student_res;
  result.teacher_resolution = teacher_res;

  std::size_t canvas = std::max(student_res, teacher_res);
  for (const auto& b : config_.teachers) canvas = std::max(canvas, teacher_res > 0 ? teacher_res : b.native_resolution);

  std::vector<Tensor> crops, student_inputs;
  crops.reserve(images.size());
  student_inputs.reserve(images.size());
  for (const auto& img : images) {
    crops.push_back(augment(img, state_.augment, config_.augment, canvas));
    student_inputs.push_back(prepare_input(crops.back(), student_res));
  }

  std::vector<EncoderOutput> teacher_outputs;
  teacher_outputs.reserve(config_.teachers.size());
  for (const auto& b : config_.teachers) teacher_outputs.push_back(run_teacher(b, crops, teacher_res));

  auto params = trainable();
  {
    GradientTape tape;
    TapeScope scope(tape);
    EncoderOutput student_out = encode_batch(student_, student_inputs);
    result.report = total_distill_loss(config_.teachers, student_out, teacher_outputs, config_.loss);
    tape.backward(result.report.total_tensor);
  }
  adamw_step(params, state_.adam, result.lr, config_.optimizer);
  for (auto& t : params) t.clear_grad();
  result.report.total_tensor = Tensor();
  state_.step += 1;
  return result;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.meta["format"] = "eupe-stage";
  c.meta["stage"] = to_string(config_.kind);
  c.meta["step"] = std::to_string(state_.step);
  c.meta["total_steps"] = std::to_string(config_.total_steps);
  c.meta["seed"] = std::to_string(config_.seed);
  c.meta["base_lr"] = fmt_double(config_.base_lr);
  c.meta["warmup_fraction"] = fmt_double(config_.warmup_fraction);
  c.meta["weight_decay"] = fmt_double(config_.optimizer.weight_decay);
  c.meta["batch_size"] = std::to_string(config_.batch_size);
  std::string res;
  for (std::size_t r : config_.resolutions) res += (res.empty() ? "" : ",") + std::to_string(r);
  c.meta["resolutions"] = res;
  c.meta["loss.alpha"] = fmt_double(config_.loss.alpha);
  c.meta["loss.beta"] = fmt_double(config_.loss.beta);
  c.meta["datamix.homogeneous_prob"] = fmt_double(config_.datamix.homogeneous_prob);
  c.meta["rng.data"] = state_.data.state();
  c.meta["rng.student_scale"] = state_.student_scale.state();
  c.meta["rng.teacher_scale"] = state_.teacher_scale.state();
  c.meta["rng.augment"] = state_.augment.state();
  c.meta["adam.steps"] = std::to_string(state_.adam.steps);
  c.meta["teachers"] = std::to_string(config_.teachers.size());

  store_encoder(c, "student", student_);
  for (std::size_t i = 0; i < config_.teachers.size(); ++i) {
    const auto& b = config_.teachers[i];
    const std::string p = "teacher." + std::to_string(i);
    c.meta[p + ".name"] = b.name;
    c.meta[p + ".gamma"] = fmt_double(b.gamma);
    c.meta[p + ".native_resolution"] = std::to_string(b.native_resolution);
    c.meta[p + ".stats.sample_count"] = std::to_string(b.stats.sample_count);
    store_encoder(c, p + ".encoder", b.teacher);
    store_head(c, p + ".class_head", b.class_head);
    store_head(c, p + ".patch_head", b.patch_head);
    c.put(p + ".stats.class_mean", b.stats.class_mean);
    c.put(p + ".stats.class_std", b.stats.class_std);
    c.put(p + ".stats.patch_mean", b.stats.patch_mean);
    c.put(p + ".stats.patch_std", b.stats.patch_std);
  }
  for (std::size_t k = 0; k < state_.adam.m.size(); ++k) {
    c.put("adam.m." + std::to_string(k), state_.adam.m[k]);
    c.put("adam.v." + std::to_string(k), state_.adam.v[k]);
  }
  return c;
}

std::vector<TeacherBinding> stored_teachers(const Checkpoint& ckpt) {
  std::vector<TeacherBinding> out;
  const std::size_t n = ckpt.get_u64("teachers");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "teacher." + std::to_string(i);
    TeacherBinding b;
    b.name = ckpt.get(p + ".name");
    b.gamma = static_cast<float>(ckpt.get_double(p + ".gamma"));
    b.native_resolution = ckpt.get_u64(p + ".native_resolution");
    b.teacher = load_encoder(ckpt, p + ".encoder");
    b.class_head = load_head(ckpt, p + ".class_head");
    b.patch_head = load_head(ckpt, p + ".patch_head");
    b.stats.class_mean = ckpt.tensor(p + ".stats.class_mean").clone();
    b.stats.class_std = ckpt.tensor(p + ".stats.class_std").clone();
    b.stats.patch_mean = ckpt.tensor(p + ".stats.patch_mean").clone();
    b.stats.patch_std = ckpt.tensor(p + ".stats.patch_std").clone();
    b.stats.sample_count = ckpt.get_u64(p + ".stats.sample_count");
    out.push_back(std::move(b));
  }
  return out;
}

void Trainer::load_student(const Checkpoint& ckpt) {
  EncoderParams stored = load_encoder(ckpt, "student", &config_.student);
  auto dst = student_.named_tensors();
  auto src = stored.named_tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) copy_into(dst[i].second, src[i].second, "student." + dst[i].first);
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.get_or("format", "") != "eupe-stage") throw FormatError("not a stage checkpoint");
  if (ckpt.get("stage") != to_string(config_.kind)) {
    throw StateError("checkpoint belongs to stage " + ckpt.get("stage") + ", not stage " + to_string(config_.kind));
  }
  load_student(ckpt);
  auto stored = stored_teachers(ckpt);
  if (stored.size() != config_.teachers.size()) {
    throw ShapeMismatchError("checkpoint has " + std::to_string(stored.size()) + " teachers, config has " +
                             std::to_string(config_.teachers.size()));
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    auto& b = config_.teachers[i];
    const auto& s = stored[i];
    const std::string p = "teacher." + std::to_string(i);
    auto dst = b.teacher.named_tensors();
    auto src = s.teacher.named_tensors();
    if (dst.size() != src.size()) throw ShapeMismatchError("teacher " + b.name + " differs from the checkpoint");
    for (std::size_t k = 0; k < dst.size(); ++k) copy_into(dst[k].second, src[k].second, p + "." + dst[k].first);
    auto hd = b.class_head.named_tensors(), hs = s.class_head.named_tensors();
    for (std::size_t k = 0; k < hd.size(); ++k) copy_into(hd[k].second, hs[k].second, p + ".class_head");
    hd = b.patch_head.named_tensors();
    hs = s.patch_head.named_tensors();
    for (std::size_t k = 0; k < hd.size(); ++k) copy_into(hd[k].second, hs[k].second, p + ".patch_head");
    b.stats = s.stats;
    b.gamma = s.gamma;
  }
  for (std::size_t k = 0; k < state_.adam.m.size(); ++k) {
    copy_into(state_.adam.m[k], ckpt.tensor("adam.m." + std::to_string(k)), "adam.m");
    copy_into(state_.adam.v[k], ckpt.tensor("adam.v." + std::to_string(k)), "adam.v");
  }
  state_.adam.steps = ckpt.get_u64("adam.steps");
  state_.step = ckpt.get_u64("step");
  if (state_.step > config_.total_steps) throw StateError("checkpoint step is past the configured schedule");
  state_.data.set_state(ckpt.get("rng.data"));
  state_.student_scale.set_state(ckpt.get("rng.student_scale"));
  state_.teacher_scale.set_state(ckpt.get("rng.teacher_scale"));
  state_.augment.set_state(ckpt.get("rng.augment"));
}

TeacherBinding proxy_binding(const Checkpoint& stage1) {
  TeacherBinding b;
  b.name = "proxy";
  b.teacher = load_encoder(stage1, "student");
  b.native_resolution = b.teacher.config.image_size;
  return b;
}

Trainer make_trainer(StageConfig config, const DatasetRegistry& data, const Checkpoint* previous) {
  const auto needed = prerequisite(config.kind);
  if (!needed) return Trainer(std::move(config), data);
  const std::string stage = "stage " + to_string(config.kind);
  if (previous == nullptr) {
    throw StateError(stage + " requires the stage " + to_string(*needed) + " checkpoint");
  }
  const std::string got = previous->get_or("stage", "?");
  if (got != to_string(*needed)) {
    throw StateError(stage + " requires the stage " + to_string(*needed) + " checkpoint, got a stage " + got +
                     " checkpoint");
  }
  if (config.kind == StageKind::Stage3) {
    // the proxy, its heads and its statistics carry over from stage 2
    config.teachers = stored_teachers(*previous);
    Trainer t(std::move(config), data);
    t.load_student(*previous);
    return t;
  }
  float gamma = config.teachers.empty() ? 1.0f : config.teachers.front().gamma;
  config.teachers = {proxy_binding(*previous)};
  config.teachers.front().gamma = gamma;
  return Trainer(std::move(config), data);
}

std::string metrics_rows(const StepResult& r) {
  std::string out;
  for (const auto& e : r.report.teachers) {
    out += std::to_string(r.step) + "," + fmt_float(r.lr) + "," + e.teacher + "," + fmt_float(e.class_loss) + "," +
           fmt_float(e.patch_loss) + "," + fmt_float(r.report.total) + "\n";
  }
  return out;
}

namespace {

// Keeps the header and rows for steps before `step`.
void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      if (line != kMetricsHeader) throw FormatError("unexpected metrics header in " + path.string());
      kept += line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) break;
    std::size_t row_step = 0;
    try {
      row_step = std::stoull(line.substr(0, comma));
    } catch (const std::logic_error&) {
      break;
    }
    if (row_step >= step) break;
    kept += line + "\n";
  }
  if (header) kept = std::string(kMetricsHeader) + "\n";
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

StageResult run_stage(const StageConfig& config, const DatasetRegistry& data, const RunOptions& options) {
  const bool files = !options.out_dir.empty();
  const auto last_path = options.out_dir / "last.ckpt";
  const auto metrics_path = options.out_dir / "metrics.csv";

  std::optional<Trainer> trainer;
  if (options.resume) {
    if (!files) throw ParameterError("resuming needs an output directory");
    if (!std::filesystem::exists(last_path)) {
      throw StateError("nothing to resume: " + last_path.string() + " does not exist");
    }
    const Checkpoint last = load_checkpoint(last_path);
    StageConfig restored = config;
    restored.teachers = stored_teachers(last);
    trainer.emplace(std::move(restored), data);
    trainer->restore(last);
  } else {
    trainer.emplace(make_trainer(config, data, options.previous));
  }

  std::ofstream metrics;
  if (files) {
    std::filesystem::create_directories(options.out_dir);
    if (options.resume && std::filesystem::exists(metrics_path)) {
      truncate_metrics(metrics_path, trainer->state().step);
      metrics.open(metrics_path, std::ios::app);
    } else {
      metrics.open(metrics_path, std::ios::trunc);
      metrics << kMetricsHeader << "\n";
    }
    if (!metrics) throw IoError("cannot write " + metrics_path.string());
  }

  StageResult result;
  const auto& cfg = trainer->config();
  while (!trainer->finished()) {
    if (options.stop_after > 0 && trainer->state().step >= options.stop_after) break;
    StepResult r = trainer->step();
    ++result.steps_run;
    if (files) {
      metrics << metrics_rows(r);
      if (trainer->state().step % cfg.flush_every == 0) metrics.flush();
      if (cfg.checkpoint_every > 0 && trainer->state().step % cfg.checkpoint_every == 0) {
        metrics.flush();
        save_checkpoint(last_path, trainer->checkpoint());
      }
    }
    if (options.on_step) options.on_step(r);
    result.last = std::move(r);
  }
  result.completed = trainer->finished();
  result.checkpoint = trainer->checkpoint();
  if (files) {
    metrics.flush();
    save_checkpoint(last_path, result.checkpoint);
    if (result.completed) save_checkpoint(options.out_dir / "final.ckpt", result.checkpoint);
  }
  return result;
}

}  // namespace eupe
