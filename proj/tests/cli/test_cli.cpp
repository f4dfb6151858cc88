#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eupe/checkpoint.hpp"
#include "eupe/data.hpp"
#include "eupe/eval.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "eupe_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args) {
  const fs::path log = kRoot / "last_output.txt";
  const std::string cmd = std::string(EUPE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

std::string toy_config(const std::string& extra = "") {
  return R"({
  "data": {"num_classes": 4, "images_per_class": 8},
  "teachers": [
    {"name": "a", "checkpoint": "teachers/a.ckpt"},
    {"name": "b", "checkpoint": "teachers/b.ckpt", "gamma": 2.0}
  ],
  "proxy": {"dim": 24, "depth": 1, "heads": 2},
  "student": {"dim": 16, "depth": 1, "heads": 2},
  "distill": {"calibration_images": 32},
  "stage1": {"steps": 12, "batch_size": 4, "base_lr": 1e-3},
  "stage2": {"steps": 8, "batch_size": 4, "base_lr": 1e-3},
  "stage3": {"steps": 6, "batch_size": 4, "base_lr": 5e-4},
  "pipeline": {"flush_every": 3, "checkpoint_every": 4},
  "eval": {"seg_steps": 40, "depth_steps": 40})" +
         extra + "\n}\n";
}

struct Workspace {
  fs::path dir;
  std::string config;

  explicit Workspace(const std::string& name, const std::string& extra = "") : dir(kRoot / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "run.json").string();
    write_text(config, toy_config(extra));
  }
  std::string flags(const std::string& out = "out") const {
    return "--config " + config + " --out-dir " + (dir / out).string();
  }
  void make_teachers() const {
    REQUIRE(cli("make-teacher --out " + (dir / "teachers/a.ckpt").string() + " --dim 16 --depth 1 --heads 2 --seed 1")
                .code == 0);
    REQUIRE(cli("make-teacher --out " + (dir / "teachers/b.ckpt").string() +
                 " --dim 24 --depth 1 --heads 2 --image-size 48 --seed 2")
                .code == 0);
  }
};

}  // namespace

TEST_CASE("config reference and validation") {
  fs::create_directories(kRoot);
  auto r = cli("config-docs");
  CHECK(r.code == 0);
  CHECK(r.output.find("`distill.alpha` | `0.9`") != std::string::npos);
  CHECK(r.output.find("`datamix.homogeneous_prob` | `0.1`") != std::string::npos);
  CHECK(r.output.find("`stage3.resolutions` | `[32,48,64]`") != std::string::npos);

  Workspace w("config", R"(, "distill_typo": {"alpha": 1})");
  r = cli("config-dump " + w.flags());
  CHECK(r.code == 2);
  CHECK(r.output.find("distill_typo") != std::string::npos);
  write_text(w.config, R"({"distill": {"alpah": 0.5}})");
  CHECK(cli("config-dump " + w.flags()).code == 2);
  CHECK(cli("config-dump --config " + (w.dir / "absent.json").string()).code == 2);
  CHECK(cli("train").code == 2);
}

TEST_CASE("calibrate") {
  Workspace w("calibrate");
  CHECK(cli("calibrate " + w.flags()).code == 2);  // teachers not written yet
  w.make_teachers();
  CHECK(cli("calibrate " + w.flags()).code == 0);
  const auto a = slurp(w.dir / "out/stats/a.stats");
  auto stats = eupe::load_checkpoint(w.dir / "out/stats/a.stats");
  CHECK(stats.get("format") == "eupe-stats");
  CHECK(stats.tensor("patch_std").numel() == 16);
  CHECK(cli("calibrate " + w.flags()).code == 0);
  CHECK(slurp(w.dir / "out/stats/a.stats") == a);
  CHECK(cli("calibrate " + w.flags() + " --seed 5").code == 0);
  CHECK(slurp(w.dir / "out/stats/a.stats") != a);
}

TEST_CASE("train stages, eval and visualize") {
  Workspace w("pipeline");
  w.make_teachers();
  CHECK(cli("train --stage 2 " + w.flags()).code == 3);
  CHECK(cli("train --stage 3 " + w.flags()).code == 3);
  CHECK(cli("train --stage 7 " + w.flags()).code == 2);
  CHECK(cli("calibrate " + w.flags()).code == 0);
  auto r = cli("train --stage 1 " + w.flags());
  CHECK(r.code == 0);
  CHECK(r.output.find("total") != std::string::npos);
  CHECK(cli("train --stage 3 " + w.flags()).code == 3);
  CHECK(cli("train --stage 2 " + w.flags()).code == 0);
  CHECK(cli("train --stage 3 " + w.flags()).code == 0);
  CHECK(cli("train --stage stage2-only " + w.flags()).code == 0);
  CHECK(cli("train --stage stage1+3 " + w.flags()).code == 0);
  for (const char* s : {"stage1", "stage2", "stage3", "stage2-only", "stage1+3"}) {
    CHECK(fs::exists(w.dir / "out" / s / "final.ckpt"));
    CHECK(slurp(w.dir / "out" / s / "metrics.csv").rfind("step,lr,teacher_id,class_loss,patch_loss,total\n", 0) == 0);
  }
  CHECK(eupe::load_checkpoint(w.dir / "out/stage2-only/final.ckpt").get("teachers") == "2");

  // evaluation
  r = cli("eval --protocols knn " + w.flags());
  CHECK(r.code == 0);
  CHECK(slurp(w.dir / "out/eval/report.csv").find("\nknn,accuracy,") != std::string::npos);
  r = cli("eval " + w.flags());
  CHECK(r.code == 0);
  const auto report = slurp(w.dir / "out/eval/report.csv");
  for (const char* p : {"knn,", "zeroshot,", "seg,", "depth,", "pck,"}) CHECK(report.find(std::string("\n") + p) != std::string::npos);
  CHECK(cli("eval " + w.flags()).code == 0);
  CHECK(slurp(w.dir / "out/eval/report.csv") == report);
  r = cli("eval --protocols knn,imagenet " + w.flags());
  CHECK(r.code == 4);
  CHECK(r.output.find("knn, zeroshot, seg, depth, pck") != std::string::npos);
  CHECK(cli("eval --checkpoint " + (w.dir / "none.ckpt").string() + " " + w.flags()).code == 2);
  CHECK(cli("eval --corpus " + (w.dir / "nowhere").string() + " " + w.flags()).code == 2);

  // visualization
  CHECK(cli("visualize --images 1 " + w.flags()).code == 0);
  auto img = eupe::read_ppm(w.dir / "out/visualize/image000_r32.ppm");
  CHECK(img.shape() == eupe::Shape{4, 4, 3});
  const std::string ckpt = " --checkpoint " + (w.dir / "out/stage3/final.ckpt").string() + " ";
  CHECK(cli("visualize --images 1 --resolutions 32,48,64" + ckpt + w.flags("multi")).code == 0);
  CHECK(eupe::read_ppm(w.dir / "multi/visualize/image000_r48.ppm").shape() == eupe::Shape{6, 6, 3});
  CHECK(eupe::read_ppm(w.dir / "multi/visualize/image000_r64.ppm").shape() == eupe::Shape{8, 8, 3});
  CHECK(std::distance(fs::directory_iterator(w.dir / "multi/visualize"), fs::directory_iterator{}) == 3);

  // a constant image goes through the degenerate PCA path
  eupe::SyntheticSpec spec;
  spec.num_classes = 1;
  spec.images_per_class = 1;
  auto samples = eupe::generate_corpus(spec);
  for (float& v : samples[0].image.mutable_data()) v = 0.5f;
  eupe::export_corpus(w.dir / "flat", samples, 1);
  CHECK(cli("visualize --corpus " + (w.dir / "flat").string() + ckpt + w.flags("flatout")).code == 0);
  CHECK(fs::exists(w.dir / "flatout/visualize/image000_r32.ppm"));

  // an unreadable record
  fs::path record;
  for (const auto& e : fs::directory_iterator(w.dir / "flat"))
    if (e.path().extension() != ".txt" && e.path().filename() != "manifest") record = e.path();
  REQUIRE(!record.empty());
  fs::resize_file(record, 40);
  CHECK(cli("visualize --corpus " + (w.dir / "flat").string() + ckpt + w.flags("flatout")).code == 5);
}

TEST_CASE("resume and determinism") {
  Workspace w("resume");
  w.make_teachers();
  CHECK(cli("train --stage 1 " + w.flags("full")).code == 0);
  CHECK(cli("train --stage 1 " + w.flags("again")).code == 0);
  CHECK(slurp(w.dir / "full/stage1/metrics.csv") == slurp(w.dir / "again/stage1/metrics.csv"));
  CHECK(cli("train --stage 1 --resume " + w.flags("part")).code == 2);
  auto r = cli("train --stage 1 --stop-after 5 " + w.flags("part"));
  CHECK(r.code == 0);
  CHECK(r.output.find("stopped") != std::string::npos);
  CHECK(cli("train --stage 1 --resume " + w.flags("part")).code == 0);
  CHECK(slurp(w.dir / "full/stage1/metrics.csv") == slurp(w.dir / "part/stage1/metrics.csv"));
  CHECK(slurp(w.dir / "full/stage1/final.ckpt") == slurp(w.dir / "part/stage1/final.ckpt"));

  // output directory from the environment
  setenv("EUPE_OUT_DIR", (w.dir / "env").string().c_str(), 1);
  CHECK(cli("make-corpus --config " + w.config).code == 0);
  unsetenv("EUPE_OUT_DIR");
  auto corpus = eupe::import_corpus(w.dir / "env/corpus-eval");
  CHECK(corpus.samples.size() == 32);
}
