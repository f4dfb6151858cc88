#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eupe/checkpoint.hpp"
#include "eupe/data.hpp"
#include "eupe/distill.hpp"
#include "eupe/optim.hpp"
#include "eupe/rng.hpp"
#include "eupe/vit.hpp"

namespace eupe {

// Stage 1: teachers -> proxy. Stage 2: proxy -> student at one resolution.
// Stage 3: proxy -> student over a resolution pyramid, starting from stage 2.
// Stage2Only: teachers -> student directly. Stage1Plus3: proxy -> student
// over the pyramid directly after stage 1.
enum class StageKind { Stage1, Stage2, Stage3, Stage2Only, Stage1Plus3 };

std::string to_string(StageKind kind);
StageKind parse_stage(const std::string& text);
bool is_multi_resolution(StageKind kind);
// The stage whose checkpoint this stage starts from, if any.
std::optional<StageKind> prerequisite(StageKind kind);

struct DataMix {
  double homogeneous_prob = 0.1;
  std::string homogeneous = "curated";
  std::vector<std::string> heterogeneous{"web"};

  void validate() const;
};

// Label-free image sets keyed by id.
class DatasetRegistry {
 public:
  void add(const std::string& id, std::vector<Tensor> images);
  bool has(const std::string& id) const { return sets_.count(id) > 0; }
  const std::vector<Tensor>& images(const std::string& id) const;
  // Up to `limit` images spread evenly over all sets, in id order.
  std::vector<Tensor> calibration_pool(std::size_t limit) const;

 private:
  std::map<std::string, std::vector<Tensor>> sets_;
};

struct BatchDraw {
  std::vector<Tensor> images;
  bool homogeneous = false;
};

// One Bernoulli(homogeneous_prob) decision per batch: the whole batch comes
// from the homogeneous set, or every image from a uniformly chosen
// heterogeneous set.
BatchDraw sample_batch(const DataMix& mix, const DatasetRegistry& data, std::size_t batch_size, Rng& rng);

// Independent uniform draws for the student and the teacher.
std::pair<std::size_t, std::size_t> select_scales(std::span<const std::size_t> pyramid, Rng& student_rng,
                                                  Rng& teacher_rng);

struct StageConfig {
  StageKind kind = StageKind::Stage1;
  ViTConfig student;
  // Teachers for Stage1 and Stage2Only. The other stages take the proxy from
  // the previous checkpoint.
  std::vector<TeacherBinding> teachers;
  std::vector<std::size_t> resolutions{32};
  std::size_t batch_size = 16;
  std::size_t total_steps = 100;
  double base_lr = 2e-5;
  double warmup_fraction = 0.02;
  AdamWConfig optimizer;
  LossConfig loss;
  AugmentConfig augment;
  DataMix datamix;
  std::size_t adapter_hidden = 0;  // 0 selects 4 * max(d_S, d_T)
  std::size_t calibration_images = 512;
  std::uint64_t seed = 0;
  std::size_t flush_every = 10;
  std::size_t checkpoint_every = 0;

  void validate() const;
};

struct TrainState {
  std::size_t step = 0;
  AdamState adam;
  Rng data;
  Rng student_scale;
  Rng teacher_scale;
  Rng augment;
};

struct StepResult {
  std::size_t step = 0;  // index of the step just taken
  double lr = 0.0;
  std::size_t student_resolution = 0;
  std::size_t teacher_resolution = 0;  // 0 when teachers ran at native resolution
  bool homogeneous = false;
  LossReport report;
};

class Trainer {
 public:
  // Initializes the student from the seed, adapter heads from the bindings
  // when they already fit the student (fresh otherwise), and calibrates any
  // teacher without statistics.
  Trainer(StageConfig config, const DatasetRegistry& data);

  const StageConfig& config() const { return config_; }
  const EncoderParams& student() const { return student_; }
  const std::vector<TeacherBinding>& teachers() const { return config_.teachers; }
  const TrainState& state() const { return state_; }
  bool finished() const { return state_.step >= config_.total_steps; }

  // Samples a batch from the data mix and trains on it.
  StepResult step();
  // Trains on the given raw [0,1] images.
  StepResult train_step(std::span<const Tensor> images);

  Checkpoint checkpoint() const;
  // Restores student, heads, statistics, optimizer and RNG state.
  void restore(const Checkpoint& ckpt);
  // Replaces the student weights; the stored config must match.
  void load_student(const Checkpoint& ckpt);

 private:
  std::vector<Tensor> trainable() const;

  StageConfig config_;
  const DatasetRegistry* data_;
  EncoderParams student_;
  TrainState state_;
};

// Proxy encoder of a stage-1 checkpoint as a teacher (heads and statistics
// left empty).
TeacherBinding proxy_binding(const Checkpoint& stage1);
// Teachers stored in a stage checkpoint, with heads and statistics.
std::vector<TeacherBinding> stored_teachers(const Checkpoint& ckpt);

// Builds the trainer for a stage, taking the proxy and (for stage 3) the
// student from the previous stage's checkpoint. Throws StateError naming the
// missing stage when a required checkpoint is absent or of the wrong kind.
Trainer make_trainer(StageConfig config, const DatasetRegistry& data, const Checkpoint* previous);

inline constexpr const char* kMetricsHeader = "step,lr,teacher_id,class_loss,patch_loss,total";

struct RunOptions {
  std::filesystem::path out_dir;  // metrics.csv, last.ckpt, final.ckpt; empty keeps everything in memory
  const Checkpoint* previous = nullptr;
  bool resume = false;
  std::size_t stop_after = 0;  // stop once this many steps are done (0 runs to the end)
  std::function<void(const StepResult&)> on_step;
};

struct StageResult {
  Checkpoint checkpoint;
  bool completed = false;
  std::size_t steps_run = 0;
  std::optional<StepResult> last;
};

StageResult run_stage(const StageConfig& config, const DatasetRegistry& data, const RunOptions& options = {});

std::string metrics_rows(const StepResult& result);

}  // namespace eupe
