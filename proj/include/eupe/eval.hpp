#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eupe/data.hpp"
#include "eupe/distill.hpp"
#include "eupe/optim.hpp"
#include "eupe/vit.hpp"

namespace eupe {

// Frozen features with one label per row.
struct FeatureBank {
  Tensor features;  // [M, d]
  std::vector<int> labels;
  std::string source;

  void validate() const;
  std::size_t size() const { return labels.size(); }
};

// Majority label among the k nearest rows by L2 distance. Ties go to the
// smallest summed distance, then to the lowest class id.
int knn_classify(const FeatureBank& bank, std::span<const float> query, std::size_t k = 10);

// Rows are L2-normalized class prototypes in a teacher's feature space.
struct PrototypeMatrix {
  Tensor weights;  // [C, d_T]
  std::vector<int> classes;

  void validate() const;
};

// Mean of each class's rows, L2-normalized, classes in ascending id order.
PrototypeMatrix build_prototypes(const Tensor& features, std::span<const int> labels);

// Argmax of prototype dot products with the normalized feature; lowest row
// wins ties. Returns the class id.
int nearest_prototype(std::span<const float> feature, const PrototypeMatrix& prototypes);
int zeroshot_classify(const Tensor& class_token, const AdapterHead& head, const PrototypeMatrix& prototypes);

enum class ProbeMode { Classify, Regress };

struct ProbeConfig {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 1024;  // rows per step
  double warmup_fraction = 0.0;
  // Standardize inputs with training-set statistics before the linear layer.
  bool standardize = true;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
};

inline ProbeConfig segmentation_probe_defaults() { return {}; }
inline ProbeConfig depth_probe_defaults() {
  ProbeConfig c;
  c.lr = 3e-4;
  return c;
}

struct LinearProbe {
  ProbeMode mode = ProbeMode::Classify;
  Tensor mean, inv_std;  // input standardization, [d]
  Tensor weight;         // [d, outputs]
  Tensor bias;           // [outputs]
  std::size_t num_classes = 0;

  // [M, d] -> [M, outputs]
  Tensor apply(const Tensor& features) const;
  std::vector<int> predict_classes(const Tensor& features) const;
};

// Trains a single linear layer on frozen features. Classify targets are
// integer class ids stored as floats in a [M] tensor; Regress targets are [M]
// or [M, k].
LinearProbe train_linear_probe(const Tensor& features, const Tensor& targets, ProbeMode mode,
                               const ProbeConfig& config = {});

struct ClassMetrics {
  double accuracy = 0.0;
  double mean_iou = 0.0;  // over classes present in the prediction or the truth
};

ClassMetrics class_metrics(std::span<const int> predicted, std::span<const int> truth);
double rmse(const Tensor& predicted, const Tensor& truth);

struct ProbeResult {
  LinearProbe probe;
  ClassMetrics classification;
  double rmse = 0.0;
};

// Trains on (train_x, train_y) and scores on (test_x, test_y).
ProbeResult linear_probe(const Tensor& train_x, const Tensor& train_y, const Tensor& test_x, const Tensor& test_y,
                         ProbeMode mode, const ProbeConfig& config = {});

// Patch tokens of one image laid out on a grid, plus the pixel size of the
// image they came from.
struct DenseFeatures {
  Tensor tokens;  // [rows*cols, d]
  GridSize grid;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Bilinear upsampling of the token grid to [height*width, d] with corner
// alignment: the outer token centers land on the outer pixels, so no two
// pixels share a feature unless the tokens themselves are degenerate.
Tensor upsample_features(const DenseFeatures& features);

struct KeypointPair {
  Keypoint source;
  Keypoint target;
};

// Keypoints with matching ids.
std::vector<KeypointPair> match_keypoints(const Sample& source, const Sample& target);

struct PckResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double score() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

inline constexpr double kPckThreshold = 0.1;

// Both feature maps are upsampled to pixel resolution. The source feature is
// read at the rounded keypoint, the prediction is the target pixel of highest
// cosine similarity (first in row-major order on ties), and it counts as
// correct within threshold * max side of the target box.
PckResult pck_correspondence(const DenseFeatures& source, const DenseFeatures& target,
                             std::span<const KeypointPair> pairs, const BoundingBox& target_box,
                             double threshold = kPckThreshold);

struct PcaImage {
  Tensor image;                     // [rows, cols, 3] in [0, 1]
  std::vector<double> eigenvalues;  // all, descending
  double explained = 0.0;           // share of variance in the top three
};

// Projects centered tokens on their top three principal axes and min-max
// scales each channel. Missing components (rank < 3) and constant channels
// come out as zeros.
PcaImage pca_rgb(const Tensor& tokens, GridSize grid);

// Binary P6 pixmap of a [H, W, 3] image with values in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
// Reads back a P6 pixmap as [H, W, 3] floats.
Tensor read_ppm(const std::filesystem::path& path);

// Corpus-level protocol runner.
inline const std::vector<std::string> kProtocols{"knn", "zeroshot", "seg", "depth", "pck"};

// Throws ConfigError listing the valid names when any protocol is unknown.
void validate_protocols(std::span<const std::string> protocols);

struct EvalSettings {
  std::size_t knn_k = 10;
  double pck_threshold = kPckThreshold;
  double test_fraction = 0.25;
  std::size_t resolution = 0;  // 0 uses the encoder's image size
  ProbeConfig segmentation = segmentation_probe_defaults();
  ProbeConfig depth = depth_probe_defaults();
  std::uint64_t seed = 0;

  std::string canonical() const;
};

struct EvalRow {
  std::string protocol;
  std::string metric;
  double value = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  std::string csv() const;
  std::string text() const;
};

std::uint64_t fnv1a(std::string_view text);

// Stratified split: the last test_fraction of each class (at least one
// image) is held out.
void split_corpus(std::span<const Sample> corpus, double test_fraction, std::vector<Sample>& train,
                  std::vector<Sample>& test);

// Encodes raw [0,1] images at the given resolution without recording
// gradients.
EncoderOutput encode_images(const EncoderParams& encoder, std::span<const Tensor> images, std::size_t resolution,
                            std::size_t chunk = 32);

// Runs the selected protocols on a frozen encoder. Zero-shot uses the given
// teacher binding for its prototypes and class adapter head.
EvalReport run_protocols(const EncoderParams& encoder, std::span<const Sample> corpus,
                         std::span<const std::string> protocols, const EvalSettings& settings,
                         const TeacherBinding* zeroshot = nullptr);

}  // namespace eupe
