#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>

#include "eupe/checkpoint.hpp"
#include "eupe/config.hpp"
#include "eupe/distill.hpp"
#include "eupe/error.hpp"
#include "eupe/eval.hpp"
#include "eupe/optim.hpp"
#include "eupe/tape.hpp"
#include "eupe/workflow.hpp"

namespace py = pybind11;
using namespace eupe;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

std::vector<int> to_labels(const py::array_t<int, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict encoder_output(const EncoderOutput& out) {
  py::dict d;
  d["class_token"] = to_array(out.class_token);
  d["patch_tokens"] = to_array(out.patch_tokens);
  d["grid"] = py::make_tuple(out.grid.rows, out.grid.cols);
  return d;
}

py::dict stats_dict(const TeacherStats& s) {
  py::dict d;
  d["class_mean"] = to_array(s.class_mean);
  d["class_std"] = to_array(s.class_std);
  d["patch_mean"] = to_array(s.patch_mean);
  d["patch_std"] = to_array(s.patch_std);
  d["sample_count"] = s.sample_count;
  return d;
}

py::dict sample_dict(const Sample& s) {
  py::dict d;
  d["image"] = to_array(s.image);
  d["label"] = s.class_label;
  py::array_t<int> dense({s.height(), s.width()});
  std::copy(s.dense_label.begin(), s.dense_label.end(), dense.mutable_data());
  d["dense_label"] = dense;
  d["depth"] = to_array(s.depth);
  py::list kps;
  for (const auto& k : s.keypoints) kps.append(py::make_tuple(k.id, k.x, k.y));
  d["keypoints"] = kps;
  d["bbox"] = py::make_tuple(s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1);
  return d;
}

std::vector<Tensor> image_list(const Array& images) {
  if (images.ndim() == 3) return {to_tensor(images)};
  if (images.ndim() != 4) throw DimensionError("images must be [H, W, 3] or [B, H, W, 3]");
  std::vector<Tensor> out;
  const auto per = static_cast<std::size_t>(images.shape(1) * images.shape(2) * images.shape(3));
  for (py::ssize_t b = 0; b < images.shape(0); ++b) {
    const float* p = images.data() + b * per;
    out.emplace_back(Shape{static_cast<std::size_t>(images.shape(1)), static_cast<std::size_t>(images.shape(2)),
                           static_cast<std::size_t>(images.shape(3))},
                     std::vector<float>(p, p + per));
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_eupe, m) {
  m.doc() = "Multi-teacher distillation of compact vision encoders";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  std::map<ErrorKind, py::object> errors;
  auto sub = [&](ErrorKind kind, const char* name, PyObject* extra = nullptr) {
    py::tuple bases = extra ? py::tuple(py::make_tuple(base, py::handle(extra))) : py::tuple(py::make_tuple(base));
    errors[kind] = py::reinterpret_steal<py::object>(
        PyErr_NewException((std::string("eupe._eupe.") + name).c_str(), bases.ptr(), nullptr));
    m.attr(name) = errors[kind];
  };
  sub(ErrorKind::Dimension, "DimensionError", PyExc_ValueError);
  sub(ErrorKind::Parameter, "ParameterError", PyExc_ValueError);
  sub(ErrorKind::Contract, "ContractError", PyExc_ValueError);
  sub(ErrorKind::State, "StateError");
  sub(ErrorKind::Config, "ConfigError", PyExc_ValueError);
  sub(ErrorKind::Format, "FormatError");
  sub(ErrorKind::Version, "VersionError");
  sub(ErrorKind::Truncated, "TruncatedError");
  sub(ErrorKind::ShapeMismatch, "ShapeMismatchError", PyExc_ValueError);
  sub(ErrorKind::Io, "IoError", PyExc_OSError);
  sub(ErrorKind::Data, "DataError");
  static std::map<ErrorKind, py::object>* table = new std::map<ErrorKind, py::object>(std::move(errors));
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(table->at(e.kind()).ptr(), e.what());
    }
  });

  py::class_<ViTConfig>(m, "ViTConfig")
      .def(py::init([](std::size_t dim, std::size_t depth, std::size_t heads, std::size_t image_size,
                       std::size_t patch_size, std::size_t num_registers, float mlp_ratio) {
             ViTConfig c{image_size, patch_size, dim, depth, heads, num_registers, mlp_ratio};
             c.validate();
             return c;
           }),
           py::arg("dim") = 64, py::arg("depth") = 4, py::arg("heads") = 4, py::arg("image_size") = 32,
           py::arg("patch_size") = 8, py::arg("num_registers") = 0, py::arg("mlp_ratio") = 4.0f)
      .def_readwrite("dim", &ViTConfig::dim)
      .def_readwrite("depth", &ViTConfig::depth)
      .def_readwrite("heads", &ViTConfig::heads)
      .def_readwrite("image_size", &ViTConfig::image_size)
      .def_readwrite("patch_size", &ViTConfig::patch_size)
      .def_readwrite("num_registers", &ViTConfig::num_registers)
      .def_readwrite("mlp_ratio", &ViTConfig::mlp_ratio)
      .def_property_readonly("num_parameters", [](const ViTConfig& c) { return count_params(c); })
      .def("__eq__", &ViTConfig::operator==)
      .def("__repr__", [](const ViTConfig& c) {
        return "ViTConfig(dim=" + std::to_string(c.dim) + ", depth=" + std::to_string(c.depth) +
               ", heads=" + std::to_string(c.heads) + ", image_size=" + std::to_string(c.image_size) +
               ", patch_size=" + std::to_string(c.patch_size) + ")";
      });

  py::class_<EncoderParams>(m, "Encoder")
      .def(py::init([](const ViTConfig& c, std::uint64_t seed) { return init_params(c, seed); }), py::arg("config"),
           py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& path, const std::string& prefix) {
            return load_encoder(load_checkpoint(path), prefix);
          },
          py::arg("path"), py::arg("prefix") = "student",
          "Encoder stored under a prefix: 'student' in stage checkpoints, 'encoder' in teacher files.")
      .def("save",
           [](const EncoderParams& p, const std::filesystem::path& path, const std::string& prefix) {
             Checkpoint c;
             c.meta["format"] = "eupe-teacher";
             store_encoder(c, prefix, p);
             save_checkpoint(path, c);
           },
           py::arg("path"), py::arg("prefix") = "encoder")
      .def_readonly("config", &EncoderParams::config)
      .def("state_dict",
           [](const EncoderParams& p) {
             py::dict d;
             for (const auto& [name, t] : p.named_tensors()) d[py::str(name)] = to_array(t);
             return d;
           })
      .def(
          "encode",
          [](const EncoderParams& p, const Array& images, std::size_t resolution) {
            const auto list = image_list(images);
            py::gil_scoped_release release;
            EncoderOutput out = encode_images(p, list, resolution == 0 ? p.config.image_size : resolution);
            py::gil_scoped_acquire acquire;
            if (images.ndim() == 3) out.class_token = out.class_token.view({out.class_token.numel()});
            return encoder_output(out);
          },
          py::arg("images"), py::arg("resolution") = 0,
          "Encodes [H, W, 3] or [B, H, W, 3] images in [0, 1]. Returns class_token, patch_tokens and grid.");

  m.def("resize_image", [](const Array& image, std::size_t h, std::size_t w) {
    return to_array(resize_image(to_tensor(image), h, w));
  }, py::arg("image"), py::arg("height"), py::arg("width"), "Bicubic resize of an [H, W, C] image.");

  m.def("class_token_loss", [](const Array& z, const Array& y) {
    NoGradScope ng;
    return class_token_loss(to_tensor(z), to_tensor(y)).data()[0];
  }, py::arg("student"), py::arg("teacher"));
  m.def("patch_token_loss", [](const Array& z, const Array& y, float alpha, float beta) {
    NoGradScope ng;
    LossConfig cfg;
    cfg.alpha = alpha;
    cfg.beta = beta;
    return patch_token_loss(to_tensor(z), to_tensor(y), cfg).data()[0];
  }, py::arg("student"), py::arg("teacher"), py::arg("alpha") = 0.9f, py::arg("beta") = 0.1f);
  m.def("compute_stats", [](const Array& cls, const Array& patches) {
    return stats_dict(compute_stats(to_tensor(cls), to_tensor(patches)));
  }, py::arg("class_tokens"), py::arg("patch_tokens"));
  m.def("normalize_features", [](const Array& x, const Array& mean, const Array& std) {
    NoGradScope ng;
    return to_array(normalize_features(to_tensor(x), to_tensor(mean), to_tensor(std)));
  }, py::arg("tokens"), py::arg("mean"), py::arg("std"));
  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total_steps"), py::arg("base_lr"),
        py::arg("warmup_fraction") = 0.0);

  m.def("generate_corpus", [](std::size_t num_classes, std::size_t images_per_class, std::size_t image_size,
                              std::size_t distractors, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_classes = num_classes;
    spec.images_per_class = images_per_class;
    spec.image_size = image_size;
    spec.distractors = distractors;
    spec.seed = seed;
    py::list out;
    for (const auto& s : generate_corpus(spec)) out.append(sample_dict(s));
    return out;
  }, py::arg("num_classes") = 4, py::arg("images_per_class") = 16, py::arg("image_size") = 32,
        py::arg("distractors") = 1, py::arg("seed") = 0);

  m.def("knn_classify", [](const Array& features, const py::array_t<int>& labels, const Array& query, std::size_t k) {
    FeatureBank bank{to_tensor(features), to_labels(labels), "python"};
    const Tensor q = to_tensor(query);
    if (q.rank() == 1) return std::vector<int>{knn_classify(bank, q.data(), k)};
    if (q.rank() != 2) throw DimensionError("query must be [d] or [M, d]");
    std::vector<int> out;
    const std::size_t d = q.dim(1);
    for (std::size_t i = 0; i < q.dim(0); ++i) out.push_back(knn_classify(bank, q.data().subspan(i * d, d), k));
    return out;
  }, py::arg("features"), py::arg("labels"), py::arg("query"), py::arg("k") = 10);

  m.def("build_prototypes", [](const Array& features, const py::array_t<int>& labels) {
    const auto l = to_labels(labels);
    PrototypeMatrix p = build_prototypes(to_tensor(features), l);
    return py::make_tuple(to_array(p.weights), p.classes);
  }, py::arg("features"), py::arg("labels"));

  m.def("linear_probe", [](const Array& train_x, const Array& train_y, const Array& test_x, const Array& test_y,
                           const std::string& mode, double lr, std::size_t steps, std::size_t batch_size,
                           std::uint64_t seed) {
    if (mode != "classify" && mode != "regress") throw ConfigError("mode must be 'classify' or 'regress'");
    const ProbeMode pm = mode == "classify" ? ProbeMode::Classify : ProbeMode::Regress;
    ProbeConfig cfg = pm == ProbeMode::Classify ? segmentation_probe_defaults() : depth_probe_defaults();
    if (lr > 0) cfg.lr = lr;
    cfg.steps = steps;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    const ProbeResult r = linear_probe(to_tensor(train_x), to_tensor(train_y), to_tensor(test_x), to_tensor(test_y),
                                       pm, cfg);
    py::dict d;
    if (pm == ProbeMode::Classify) {
      d["accuracy"] = r.classification.accuracy;
      d["mean_iou"] = r.classification.mean_iou;
    } else {
      d["rmse"] = r.rmse;
    }
    d["weight"] = to_array(r.probe.weight);
    d["bias"] = to_array(r.probe.bias);
    return d;
  }, py::arg("train_x"), py::arg("train_y"), py::arg("test_x"), py::arg("test_y"), py::arg("mode") = "classify",
        py::arg("lr") = 0.0, py::arg("steps") = 2000, py::arg("batch_size") = 1024, py::arg("seed") = 0,
        "lr 0 keeps the protocol default (1e-3 classify, 3e-4 regress).");

  m.def("pck", [](const Array& src_tokens, const Array& tgt_tokens, std::pair<std::size_t, std::size_t> grid,
                  std::pair<std::size_t, std::size_t> image, const std::vector<std::tuple<float, float, float, float>>& pairs,
                  std::tuple<float, float, float, float> box, double threshold) {
    const GridSize g{grid.first, grid.second};
    DenseFeatures s{to_tensor(src_tokens), g, image.first, image.second};
    DenseFeatures t{to_tensor(tgt_tokens), g, image.first, image.second};
    std::vector<KeypointPair> kp;
    int id = 0;
    for (const auto& [sx, sy, tx, ty] : pairs) {
      kp.push_back({Keypoint{sx, sy, id}, Keypoint{tx, ty, id}});
      ++id;
    }
    BoundingBox b{std::get<0>(box), std::get<1>(box), std::get<2>(box), std::get<3>(box)};
    return pck_correspondence(s, t, kp, b, threshold).score();
  }, py::arg("source_tokens"), py::arg("target_tokens"), py::arg("grid"), py::arg("image_size"), py::arg("pairs"),
        py::arg("target_box"), py::arg("threshold") = kPckThreshold,
        "pairs are (source_x, source_y, target_x, target_y) in pixel indices; box is (x0, y0, x1, y1).");

  m.def("pca_rgb", [](const Array& tokens, std::pair<std::size_t, std::size_t> grid) {
    const PcaImage p = pca_rgb(to_tensor(tokens), GridSize{grid.first, grid.second});
    py::dict d;
    d["image"] = to_array(p.image);
    d["eigenvalues"] = p.eigenvalues;
    d["explained"] = p.explained;
    return d;
  }, py::arg("tokens"), py::arg("grid"));
  m.def("write_ppm", [](const std::filesystem::path& path, const Array& image) { write_ppm(path, to_tensor(image)); });
  m.def("read_ppm", [](const std::filesystem::path& path) { return to_array(read_ppm(path)); });

  m.def("parse_config", [](const std::string& text) { return parse_run_config(text).to_json(); }, py::arg("text"),
        "Validates a run configuration and returns it with every default filled in.");
  m.def("config_reference", &config_reference);
  m.def("protocols", [] { return kProtocols; });

  m.def("write_teacher", &write_teacher, py::arg("path"), py::arg("config"), py::arg("seed") = 0);

  py::class_<RunContext>(m, "Run")
      .def(py::init([](const std::string& config, const std::string& out_dir, std::optional<std::uint64_t> seed) {
             return open_run(config, out_dir, seed);
           }),
           py::arg("config") = "", py::arg("out_dir") = "", py::arg("seed") = py::none())
      .def_property_readonly("out_dir", [](const RunContext& r) { return r.out_root; })
      .def_property_readonly("config", [](const RunContext& r) { return r.config.to_json(); })
      .def("calibrate",
           [](const RunContext& r) {
             py::list out;
             for (const auto& s : calibrate_run(r)) out.append(stats_dict(s));
             return out;
           })
      .def(
          "train",
          [](const RunContext& r, const std::string& stage, bool resume, std::size_t stop_after) {
            StageResult res;
            {
              py::gil_scoped_release release;
              res = train_run(r, parse_stage(stage), resume, stop_after);
            }
            py::dict d;
            d["completed"] = res.completed;
            d["steps_run"] = res.steps_run;
            d["step"] = res.checkpoint.get_u64("step");
            d["directory"] = r.stage_dir(parse_stage(stage));
            if (res.last) d["total_loss"] = res.last->report.total;
            return d;
          },
          py::arg("stage"), py::arg("resume") = false, py::arg("stop_after") = 0)
      .def(
          "evaluate",
          [](const RunContext& r, const std::string& checkpoint, const std::string& corpus,
             const std::vector<std::string>& protocols) {
            EvalReport rep;
            {
              py::gil_scoped_release release;
              rep = evaluate_run(r, checkpoint, corpus, protocols);
            }
            py::dict d;
            for (const auto& row : rep.rows) d[py::str(row.protocol + "." + row.metric)] = row.value;
            return d;
          },
          py::arg("checkpoint") = "", py::arg("corpus") = "", py::arg("protocols") = std::vector<std::string>{})
      .def("visualize", &visualize_run, py::arg("checkpoint") = "", py::arg("corpus") = "", py::arg("count") = 4,
           py::arg("resolutions") = std::vector<std::size_t>{});
}
