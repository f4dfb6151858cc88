// eupe: calibrate teachers, train the three distillation stages, evaluate and
// visualize frozen encoders.
//
// Exit codes: 0 success, 1 internal error, 2 missing or invalid input,
// 3 missing prerequisite stage, 4 unknown evaluation protocol, 5 bad data.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "eupe/checkpoint.hpp"
#include "eupe/config.hpp"
#include "eupe/error.hpp"
#include "eupe/eval.hpp"
#include "eupe/pipeline.hpp"
#include "eupe/workflow.hpp"

namespace fs = std::filesystem;
using namespace eupe;

namespace {

enum Exit { kOk = 0, kInternal = 1, kMissingInput = 2, kPrerequisite = 3, kBadProtocol = 4, kBadData = 5 };

struct Common {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;

  RunContext open() const { return open_run(config, out_dir, seed); }
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_make_corpus(const Common& common, const std::string& split) {
  const RunContext run = common.open();
  const SyntheticSpec spec = split_spec(run.config, split);
  const fs::path dir = run.out_root / ("corpus-" + split);
  export_corpus(dir, generate_corpus(spec), spec.num_classes);
  std::cout << "wrote " << spec.size() << " samples to " << dir.string() << "\n";
  return kOk;
}

int cmd_calibrate(const Common& common) {
  const RunContext run = common.open();
  const auto stats = calibrate_run(run);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const auto& name = run.config.teachers[i].name;
    std::cout << "calibrated " << name << " on " << stats[i].sample_count << " images -> "
              << run.stats_path(name).string() << "\n";
  }
  return kOk;
}

int cmd_train(const Common& common, const std::string& stage_text, bool resume, std::size_t stop_after) {
  const RunContext run = common.open();
  const StageKind kind = parse_stage(stage_text);
  const StageResult r = train_run(run, kind, resume, stop_after);
  std::cout << "stage " << to_string(kind) << (r.completed ? " finished" : " stopped") << " after "
            << r.checkpoint.get("step") << "/" << run.config.stage_config(kind).total_steps << " steps -> "
            << run.stage_dir(kind).string() << "\n";
  if (r.last) {
    for (const auto& t : r.last->report.teachers) {
      std::printf("  %-12s class %.6f  patch %.6f  gamma %.3g\n", t.teacher.c_str(), t.class_loss, t.patch_loss,
                  t.gamma);
    }
    std::printf("  total %.6f\n", r.last->report.total);
  }
  return kOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& corpus,
             const std::string& protocols_text) {
  const auto protocols = split_list(protocols_text);
  try {
    validate_protocols(protocols);
  } catch (const ConfigError& e) {
    std::cerr << "eupe: " << e.what() << "\n";
    return kBadProtocol;
  }
  const EvalReport report = evaluate_run(common.open(), checkpoint, corpus, protocols);
  std::cout << report.text();
  return kOk;
}

int cmd_visualize(const Common& common, const std::string& checkpoint, const std::string& corpus,
                  std::size_t count, const std::string& resolutions_text) {
  std::vector<std::size_t> resolutions;
  for (const auto& r : split_list(resolutions_text)) {
    try {
      resolutions.push_back(std::stoul(r));
    } catch (const std::exception&) {
      throw ConfigError("bad resolution '" + r + "'");
    }
  }
  const RunContext run = common.open();
  const auto written = visualize_run(run, checkpoint, corpus, count, resolutions);
  std::cout << "wrote " << written.size() << " pixmaps to " << (run.out_root / "visualize").string() << "\n";
  return kOk;
}

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Io:
    case ErrorKind::Config:
      return kMissingInput;
    case ErrorKind::State:
      return kPrerequisite;
    case ErrorKind::Data:
    case ErrorKind::Format:
    case ErrorKind::Version:
    case ErrorKind::Truncated:
    case ErrorKind::ShapeMismatch:
      return kBadData;
    default:
      return kInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher distillation of compact vision encoders"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* cmd) {
    cmd->add_option("--config", common.config, "run configuration (JSON)");
    cmd->add_option("--out-dir", common.out_dir, "output directory (default: $EUPE_OUT_DIR, then run.out_dir)");
    cmd->add_option("--seed", common.seed, "override run.seed");
  };

  auto* calibrate = app.add_subcommand("calibrate", "measure teacher feature statistics");
  add_common(calibrate);

  std::string stage;
  bool resume = false;
  std::size_t stop_after = 0;
  auto* train = app.add_subcommand("train", "run one distillation stage");
  add_common(train);
  train->add_option("--stage", stage, "1, 2, 3, stage2-only or stage1+3")->required();
  train->add_flag("--resume", resume, "continue from the stage's last checkpoint");
  train->add_option("--stop-after", stop_after, "stop once this many steps are done");

  std::string checkpoint, corpus, protocols, resolutions;
  std::size_t images = 4;
  auto* eval = app.add_subcommand("eval", "run frozen-feature protocols");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "stage checkpoint (default: <out>/stage3/final.ckpt)");
  eval->add_option("--corpus", corpus, "corpus directory (default: generated held-out set)");
  eval->add_option("--protocols", protocols, "comma-separated subset of knn,zeroshot,seg,depth,pck");

  auto* visualize = app.add_subcommand("visualize", "render PCA projections of patch tokens");
  add_common(visualize);
  visualize->add_option("--checkpoint", checkpoint, "stage checkpoint (default: <out>/stage3/final.ckpt)");
  visualize->add_option("--corpus", corpus, "corpus directory (default: generated held-out set)");
  visualize->add_option("--images", images, "images to render (0 = all)");
  visualize->add_option("--resolutions", resolutions, "comma-separated input resolutions");

  std::string split = "eval";
  auto* make_corpus = app.add_subcommand("make-corpus", "export a synthetic corpus directory");
  add_common(make_corpus);
  make_corpus->add_option("--split", split, "eval, curated or web");

  std::string teacher_out;
  ViTConfig vit;
  std::uint64_t teacher_seed = 0;
  auto* make_teacher = app.add_subcommand("make-teacher", "write a randomly initialized toy teacher");
  make_teacher->add_option("--out", teacher_out, "checkpoint path")->required();
  make_teacher->add_option("--dim", vit.dim);
  make_teacher->add_option("--depth", vit.depth);
  make_teacher->add_option("--heads", vit.heads);
  make_teacher->add_option("--image-size", vit.image_size);
  make_teacher->add_option("--patch-size", vit.patch_size);
  make_teacher->add_option("--registers", vit.num_registers);
  make_teacher->add_option("--seed", teacher_seed);

  auto* docs = app.add_subcommand("config-docs", "print the configuration key reference");
  auto* dump = app.add_subcommand("config-dump", "print the resolved configuration");
  add_common(dump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kMissingInput;
  }

  try {
    if (*calibrate) return cmd_calibrate(common);
    if (*train) return cmd_train(common, stage, resume, stop_after);
    if (*eval) return cmd_eval(common, checkpoint, corpus, protocols);
    if (*visualize) return cmd_visualize(common, checkpoint, corpus, images, resolutions);
    if (*make_corpus) return cmd_make_corpus(common, split);
    if (*make_teacher) {
      write_teacher(teacher_out, vit, teacher_seed);
      std::cout << "wrote teacher " << teacher_out << " (" << count_params(vit) << " parameters)\n";
      return kOk;
    }
    if (*docs) {
      std::cout << config_reference();
      return kOk;
    }
    if (*dump) {
      std::cout << common.open().config.to_json();
      return kOk;
    }
  } catch (const Error& e) {
    std::cerr << "eupe: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "eupe: internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
