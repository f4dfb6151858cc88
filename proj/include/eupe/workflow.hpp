#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eupe/config.hpp"
#include "eupe/eval.hpp"
#include "eupe/pipeline.hpp"

namespace eupe {

// A run configuration bound to a place on disk. Relative paths in the config
// resolve against the config file's directory; artifacts go under out_root.
struct RunContext {
  RunConfig config;
  std::filesystem::path config_path;
  std::filesystem::path out_root;

  std::filesystem::path resolve(const std::string& path) const;
  std::filesystem::path stage_dir(StageKind kind) const;
  std::filesystem::path stats_path(const std::string& teacher) const;
};

// Output root precedence: out_dir, then $EUPE_OUT_DIR, then run.out_dir, then "runs".
RunContext open_run(const std::string& config_path, const std::string& out_dir = "",
                    std::optional<std::uint64_t> seed = std::nullopt);

// "stage1", "stage2", "stage3", "stage2-only" or "stage1+3".
std::string stage_dir_name(StageKind kind);

void save_stats(const std::filesystem::path& path, const std::string& teacher, const TeacherStats& stats);
TeacherStats load_stats(const std::filesystem::path& path);

void write_teacher(const std::filesystem::path& path, const ViTConfig& config, std::uint64_t seed);
TeacherBinding load_teacher(const RunContext& run, const TeacherSpec& spec);

// Synthetic split "eval", "curated" or "web" with the run's derived seeds.
SyntheticSpec split_spec(const RunConfig& config, const std::string& split);
// Empty dir means the generated eval split.
std::vector<Sample> load_corpus(const RunContext& run, const std::string& dir);
// Empty path means <out>/stage3/final.ckpt.
Checkpoint load_stage_checkpoint(const RunContext& run, const std::string& path);

// Measures and stores statistics for every configured teacher.
std::vector<TeacherStats> calibrate_run(const RunContext& run);
// Stage 1 and stage2-only bind the configured teachers (with stored
// statistics when present); other stages need their prerequisite's final
// checkpoint and throw StateError without it.
StageResult train_run(const RunContext& run, StageKind kind, bool resume = false, std::size_t stop_after = 0);
// Writes <out>/eval/report.csv and report.txt.
EvalReport evaluate_run(const RunContext& run, const std::string& checkpoint, const std::string& corpus,
                        std::vector<std::string> protocols);
// Writes <out>/visualize/imageNNN_rR.ppm; count 0 renders every image.
std::vector<std::filesystem::path> visualize_run(const RunContext& run, const std::string& checkpoint,
                                                 const std::string& corpus, std::size_t count,
                                                 std::vector<std::size_t> resolutions);

}  // namespace eupe
