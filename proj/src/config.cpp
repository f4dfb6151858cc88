#include "eupe/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <set>
#include <sstream>

#include "eupe/error.hpp"
#include "eupe/rng.hpp"

namespace eupe {

using nlohmann::json;

namespace {

struct Field {
  std::string section;
  std::string key;
  std::string doc;
  std::function<void(const json&)> set;
  std::function<json()> get;
};

// Shortest decimal that round-trips the float, so 0.9f reads back as 0.9.
json float_json(float v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return json(std::stod(std::string(buf, r.ptr)));
}

template <typename T>
json to_field_json(const T& v) {
  if constexpr (std::is_same_v<T, float>) return float_json(v);
  else if constexpr (std::is_same_v<T, std::vector<float>>) {
    json a = json::array();
    for (float x : v) a.push_back(float_json(x));
    return a;
  } else {
    return json(v);
  }
}

template <typename T>
Field field(std::string section, std::string key, T& target, std::string doc) {
  return {std::move(section), std::move(key), std::move(doc), [&target](const json& v) { target = v.get<T>(); },
          [&target]() { return to_field_json(target); }};
}

void bind_vit(std::vector<Field>& f, const std::string& s, ViTConfig& c, const std::string& role) {
  f.push_back(field(s, "image_size", c.image_size, role + " base input resolution in pixels"));
  f.push_back(field(s, "patch_size", c.patch_size, role + " patch size"));
  f.push_back(field(s, "dim", c.dim, role + " token width"));
  f.push_back(field(s, "depth", c.depth, role + " transformer blocks"));
  f.push_back(field(s, "heads", c.heads, role + " attention heads"));
  f.push_back(field(s, "num_registers", c.num_registers, role + " register tokens (the large proxy of the recipe uses 4)"));
  f.push_back(field(s, "mlp_ratio", c.mlp_ratio, role + " MLP expansion ratio"));
}

void bind_stage(std::vector<Field>& f, const std::string& s, StageSettings& st, const std::string& lr_doc,
                const std::string& res_doc) {
  f.push_back(field(s, "steps", st.steps, "optimizer steps"));
  f.push_back(field(s, "batch_size", st.batch_size, "images per step"));
  f.push_back(field(s, "base_lr", st.base_lr, lr_doc));
  f.push_back(field(s, "weight_decay", st.weight_decay, "decoupled AdamW weight decay (recipe: 1e-4)"));
  f.push_back(field(s, "warmup_fraction", st.warmup_fraction, "linear warmup share of the cosine schedule"));
  f.push_back(field(s, "resolutions", st.resolutions, res_doc));
}

void bind_probe(std::vector<Field>& f, const std::string& prefix, ProbeConfig& p, const std::string& recipe) {
  f.push_back(field("eval", prefix + "_lr", p.lr, "probe learning rate (" + recipe + ")"));
  f.push_back(field("eval", prefix + "_weight_decay", p.weight_decay, "probe weight decay (recipe: 1e-3)"));
  f.push_back(field("eval", prefix + "_steps", p.steps, "probe optimizer steps"));
  f.push_back(field("eval", prefix + "_batch_size", p.batch_size, "pixel rows per probe step"));
  f.push_back(field("eval", prefix + "_standardize", p.standardize, "standardize probe inputs with training statistics"));
}

std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(field("run", "seed", c.seed, "master seed; every random stream derives from it"));
  f.push_back(field("run", "out_dir", c.out_dir, "output directory (overridden by --out-dir, then EUPE_OUT_DIR)"));

  auto& d = c.data;
  f.push_back(field("data", "num_classes", d.num_classes, "synthetic classes"));
  f.push_back(field("data", "images_per_class", d.images_per_class, "images per class in each training set"));
  f.push_back(field("data", "image_size", d.image_size, "synthetic image side in pixels"));
  f.push_back(field("data", "distractors", d.distractors, "distractor blobs per curated image"));
  f.push_back(field("data", "web_distractors", c.web_distractors, "distractor blobs per web image"));
  f.push_back(field("data", "object_scale_min", d.object_scale_min, "smallest object radius, fraction of the side"));
  f.push_back(field("data", "object_scale_max", d.object_scale_max, "largest object radius, fraction of the side"));
  f.push_back(field("data", "texture_amplitude", d.texture_amplitude, "texture intensity amplitude"));
  f.push_back(field("data", "texture_frequency", d.texture_frequency, "texture base frequency"));

  auto& a = c.augment;
  f.push_back(field("augment", "crop_scale_min", a.crop_scale_min, "random resized crop, smallest area share"));
  f.push_back(field("augment", "crop_scale_max", a.crop_scale_max, "random resized crop, largest area share"));
  f.push_back(field("augment", "hflip_prob", a.hflip_prob, "horizontal flip probability"));
  f.push_back(field("augment", "jitter_prob", a.jitter_prob, "color jitter probability"));
  f.push_back(field("augment", "brightness", a.brightness, "color jitter brightness range"));
  f.push_back(field("augment", "contrast", a.contrast, "color jitter contrast range"));
  f.push_back(field("augment", "saturation", a.saturation, "color jitter saturation range"));
  f.push_back(field("augment", "blur_prob", a.blur_prob, "Gaussian blur probability"));
  f.push_back(field("augment", "blur_sigma_min", a.blur_sigma_min, "Gaussian blur smallest sigma (pixels)"));
  f.push_back(field("augment", "blur_sigma_max", a.blur_sigma_max, "Gaussian blur largest sigma (pixels)"));
  f.push_back(field("augment", "solarize_prob", a.solarize_prob, "solarization probability"));
  f.push_back(field("augment", "solarize_threshold", a.solarize_threshold, "solarization threshold"));

  f.push_back(field("datamix", "homogeneous_prob", c.datamix.homogeneous_prob,
                   "probability that a whole batch comes from the curated set (recipe: 0.1)"));
  f.push_back(field("datamix", "homogeneous", c.datamix.homogeneous, "id of the homogeneous set"));
  f.push_back(field("datamix", "heterogeneous", c.datamix.heterogeneous, "ids of the heterogeneous sets"));

  bind_vit(f, "proxy", c.proxy, "proxy");
  bind_vit(f, "student", c.student, "student");

  f.push_back(field("distill", "alpha", c.loss.alpha, "cosine weight in the patch loss (recipe: 0.9)"));
  f.push_back(field("distill", "beta", c.loss.beta, "smooth-L1 weight in the patch loss (recipe: 0.1)"));
  f.push_back(field("distill", "cosine_eps", c.loss.cosine_eps, "norm floor in the cosine loss"));
  f.push_back(field("distill", "smooth_l1_beta", c.loss.smooth_l1_beta, "smooth-L1 transition point"));
  f.push_back(field("distill", "stage1_hidden", c.stage1_hidden,
                   "adapter hidden width for stage 1; 0 = 4 x max(d_S, d_T) (recipe: 1536 at full scale)"));
  f.push_back(field("distill", "stage23_hidden", c.stage23_hidden,
                   "adapter hidden width for stages 2 and 3; 0 = 4 x max(d_S, d_T) (recipe: 3072 at full scale)"));
  f.push_back(field("distill", "calibration_images", c.calibration_images,
                   "images used to measure teacher feature statistics before training"));

  f.push_back(field("optim", "beta1", c.adam_beta1, "AdamW first-moment decay"));
  f.push_back(field("optim", "beta2", c.adam_beta2, "AdamW second-moment decay"));
  f.push_back(field("optim", "eps", c.adam_eps, "AdamW denominator epsilon"));

  bind_stage(f, "stage1", c.stage1, "base learning rate", "proxy training resolution (one entry; empty = proxy.image_size)");
  bind_stage(f, "stage2", c.stage2, "base learning rate (recipe: 2e-5)",
             "fixed student resolution (one entry; empty = student.image_size; recipe: 256)");
  bind_stage(f, "stage3", c.stage3, "base learning rate (recipe: 1e-5)",
             "resolution pyramid (at least two entries; recipe: 256, 384, 512)");
  f.push_back(field("pipeline", "flush_every", c.flush_every, "metrics rows buffered between flushes"));
  f.push_back(field("pipeline", "checkpoint_every", c.checkpoint_every, "steps between periodic checkpoints (0 = only at the end)"));

  auto& e = c.eval;
  f.push_back(field("eval", "knn_k", e.knn_k, "neighbors in the KNN protocol (recipe: 10)"));
  f.push_back(field("eval", "pck_threshold", e.pck_threshold, "PCK threshold as a share of the max box side (recipe: 0.1)"));
  f.push_back(field("eval", "test_fraction", e.test_fraction, "held-out share of each class"));
  f.push_back(field("eval", "resolution", e.resolution, "encoding resolution (0 = encoder image size)"));
  f.push_back(field("eval", "zeroshot_teacher", c.zeroshot_teacher,
                   "stored teacher whose class head and prototypes drive zero-shot (empty = first)"));
  bind_probe(f, "seg", e.segmentation, "recipe: 1e-3");
  bind_probe(f, "depth", e.depth, "recipe: 3e-4");

  f.push_back(field("visualize", "resolutions", c.visualize_resolutions,
                   "resolutions to render (empty = student.image_size)"));
  return f;
}

std::string key_of(const Field& f) { return f.section + "." + f.key; }

}  // namespace

RunConfig::RunConfig() {
  proxy.dim = 64;
  proxy.depth = 4;
  proxy.heads = 4;
  student.dim = 32;
  student.depth = 2;
  student.heads = 2;
  stage1.resolutions = {};
  stage2.resolutions = {};
  stage3.base_lr = 1e-5;
  stage3.resolutions = {32, 48, 64};
  stage1.steps = stage2.steps = 200;
  stage3.steps = 100;
  visualize_resolutions = {};
}

StageConfig RunConfig::stage_config(StageKind kind) const {
  const StageSettings& st = kind == StageKind::Stage1                                  ? stage1
                            : (kind == StageKind::Stage2 || kind == StageKind::Stage2Only) ? stage2
                                                                                          : stage3;
  StageConfig c;
  c.kind = kind;
  c.student = kind == StageKind::Stage1 ? proxy : student;
  c.resolutions = st.resolutions.empty() ? std::vector<std::size_t>{c.student.image_size} : st.resolutions;
  c.batch_size = st.batch_size;
  c.total_steps = st.steps;
  c.base_lr = st.base_lr;
  c.warmup_fraction = st.warmup_fraction;
  c.optimizer = {adam_beta1, adam_beta2, adam_eps, st.weight_decay};
  c.loss = loss;
  c.augment = augment;
  c.datamix = datamix;
  c.adapter_hidden = kind == StageKind::Stage1 ? stage1_hidden : stage23_hidden;
  c.calibration_images = calibration_images;
  c.seed = derive_seed(seed, 10 + static_cast<std::uint64_t>(kind));
  c.flush_every = flush_every;
  c.checkpoint_every = checkpoint_every;
  return c;
}

DatasetRegistry RunConfig::datasets() const {
  SyntheticSpec curated = data;
  curated.seed = derive_seed(seed, 200);
  SyntheticSpec web = data;
  web.distractors = web_distractors;
  web.seed = derive_seed(seed, 201);
  DatasetRegistry reg;
  reg.add("curated", images_of(generate_corpus(curated)));
  reg.add("web", images_of(generate_corpus(web)));
  return reg;
}

std::string RunConfig::to_json() const {
  RunConfig copy = *this;
  json doc = json::object();
  for (const auto& f : fields(copy)) doc[f.section][f.key] = f.get();
  json t = json::array();
  for (const auto& s : teachers) t.push_back({{"name", s.name}, {"checkpoint", s.checkpoint}, {"gamma", float_json(s.gamma)}});
  doc["teachers"] = t;
  return doc.dump(2) + "\n";
}

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object of sections");

  RunConfig c;
  auto fs = fields(c);
  std::set<std::string> sections{"teachers"};
  for (const auto& f : fs) sections.insert(f.section);

  for (const auto& [section, body] : doc.items()) {
    if (!sections.count(section)) throw ConfigError("unknown config section '" + section + "'");
    if (section == "teachers") {
      if (!body.is_array()) throw ConfigError("'teachers' must be an array");
      for (const auto& t : body) {
        if (!t.is_object()) throw ConfigError("each teacher must be an object");
        TeacherSpec spec;
        for (const auto& [k, v] : t.items()) {
          try {
            if (k == "name") spec.name = v.get<std::string>();
            else if (k == "checkpoint") spec.checkpoint = v.get<std::string>();
            else if (k == "gamma") spec.gamma = v.get<float>();
            else throw ConfigError("unknown key 'teachers[]." + k + "'");
          } catch (const json::exception& e) {
            throw ConfigError("bad value for 'teachers[]." + k + "': " + e.what());
          }
        }
        if (spec.name.empty() || spec.checkpoint.empty()) throw ConfigError("teachers need a name and a checkpoint");
        c.teachers.push_back(spec);
      }
      continue;
    }
    if (!body.is_object()) throw ConfigError("section '" + section + "' must be an object");
    for (const auto& [k, v] : body.items()) {
      auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return f.section == section && f.key == k; });
      if (it == fs.end()) throw ConfigError("unknown config key '" + section + "." + k + "'");
      try {
        it->set(v);
      } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key_of(*it) + "': " + e.what());
      }
    }
  }

  c.data.validate();
  c.proxy.validate();
  c.student.validate();
  c.datamix.validate();
  std::set<std::string> names;
  for (const auto& t : c.teachers)
    if (!names.insert(t.name).second) throw ConfigError("duplicate teacher name '" + t.name + "'");
  if (c.stage2.resolutions.size() > 1) throw ConfigError("stage2.resolutions takes a single resolution");
  if (c.stage3.resolutions.size() < 2) throw ConfigError("stage3.resolutions needs at least two scales");
  if (c.eval.knn_k == 0) throw ConfigError("eval.knn_k must be positive");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string config_reference() {
  RunConfig defaults;
  std::ostringstream os;
  os << "# Configuration keys\n\n"
     << "A config file is a JSON object of sections. Unknown sections or keys are rejected.\n"
     << "`teachers` is an array of {name, checkpoint, gamma}; gamma weights that teacher's\n"
     << "patch loss (default 1).\n\n"
     << "| key | default | meaning |\n|---|---|---|\n";
  for (const auto& f : fields(defaults)) os << "| `" << key_of(f) << "` | `" << f.get().dump() << "` | " << f.doc << " |\n";
  return os.str();
}

}  // namespace eupe
