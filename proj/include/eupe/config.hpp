#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eupe/data.hpp"
#include "eupe/distill.hpp"
#include "eupe/eval.hpp"
#include "eupe/pipeline.hpp"

namespace eupe {

struct TeacherSpec {
  std::string name;
  std::string checkpoint;  // written by `eupe make-teacher`
  float gamma = 1.0f;
};

struct StageSettings {
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  double base_lr = 2e-5;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.02;
  std::vector<std::size_t> resolutions;
};

// One document describing a whole run: data, teachers, the three stages and
// evaluation. Sections are JSON objects; unknown sections or keys are
// rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir;

  SyntheticSpec data;
  std::size_t web_distractors = 3;
  AugmentConfig augment;
  DataMix datamix;

  std::vector<TeacherSpec> teachers;
  ViTConfig proxy;
  ViTConfig student;

  LossConfig loss;
  std::size_t stage1_hidden = 0;
  std::size_t stage23_hidden = 0;
  std::size_t calibration_images = 512;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  StageSettings stage1;
  StageSettings stage2;
  StageSettings stage3;
  std::size_t flush_every = 10;
  std::size_t checkpoint_every = 0;

  EvalSettings eval;
  std::string zeroshot_teacher;
  std::vector<std::size_t> visualize_resolutions;

  RunConfig();

  // Stage hyperparameters; teachers are left for the caller to bind.
  StageConfig stage_config(StageKind kind) const;
  // Curated set from the data section, web set with extra distractors and a
  // different seed.
  DatasetRegistry datasets() const;
  std::string to_json() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Reference table of every key with its default and meaning.
std::string config_reference();

}  // namespace eupe
