#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "eupe/rng.hpp"
#include "eupe/tensor.hpp"

namespace eupe {

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t images_per_class = 16;
  std::size_t image_size = 32;
  // Extra small objects drawn from other classes' palettes.
  std::size_t distractors = 1;
  // Relative object radius range (fraction of image size).
  float object_scale_min = 0.28f;
  float object_scale_max = 0.38f;
  // Sinusoidal texture modulating object and background intensity.
  float texture_amplitude = 0.04f;
  float texture_frequency = 2.0f;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t size() const { return num_classes * images_per_class; }
};

struct Keypoint {
  float x = 0.0f;
  float y = 0.0f;
  int id = 0;
};

struct BoundingBox {
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  float max_side() const { return std::max(x1 - x0, y1 - y0); }
};

struct Sample {
  Tensor image;                 // [H, W, 3] in [0, 1]
  int class_label = 0;
  std::vector<int> dense_label; // H*W palette class per pixel
  Tensor depth;                 // [H, W]
  std::vector<Keypoint> keypoints;
  BoundingBox bbox;             // main object

  std::size_t height() const { return image.dim(0); }
  std::size_t width() const { return image.dim(1); }
};

// Palette color of a class. Classes differ in hue and in mean intensity
// (channel mean is 0.25 + 0.5 c/(C-1); the hue term averages out).
std::array<float, 3> class_color(std::size_t cls, std::size_t num_classes);

// Sample i depends only on (spec.seed, i); samples are ordered by class.
std::vector<Sample> generate_corpus(const SyntheticSpec& spec);
Sample generate_sample(const SyntheticSpec& spec, std::size_t index);

std::vector<Tensor> images_of(std::span<const Sample> samples);

struct AugmentConfig {
  float crop_scale_min = 0.4f;
  float crop_scale_max = 1.0f;
  float hflip_prob = 0.5f;
  float jitter_prob = 0.8f;
  float brightness = 0.2f;
  float contrast = 0.2f;
  float saturation = 0.2f;
  float blur_prob = 0.5f;
  float blur_sigma_min = 0.1f;
  float blur_sigma_max = 1.0f;
  float solarize_prob = 0.2f;
  float solarize_threshold = 0.5f;

  static AugmentConfig none();
};

Tensor random_resized_crop(const Tensor& image, Rng& rng, float scale_min, float scale_max,
                           std::size_t out_size);
Tensor hflip(const Tensor& image);
Sample hflip(const Sample& sample);
Tensor color_jitter(const Tensor& image, Rng& rng, float brightness, float contrast, float saturation);
Tensor gaussian_blur(const Tensor& image, float sigma);
Tensor solarize(const Tensor& image, float threshold);
// crop -> hflip -> color jitter -> gaussian blur -> solarize, clamped to [0, 1].
Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& config, std::size_t out_size);

// Bicubic resize of an [H, W, 3] image, clamped to [0, 1].
Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width);
Tensor normalize_input(const Tensor& image);
Tensor denormalize_input(const Tensor& image);
// Resize to a square resolution (when needed) and normalize.
Tensor prepare_input(const Tensor& image, std::size_t resolution);

// Corpus directory: manifest.txt plus one binary record per sample.
void export_corpus(const std::filesystem::path& dir, std::span<const Sample> samples,
                   std::size_t num_classes);
struct Corpus {
  std::size_t num_classes = 0;
  std::vector<Sample> samples;
};
Corpus import_corpus(const std::filesystem::path& dir);
void write_sample(const std::filesystem::path& path, const Sample& sample);
Sample read_sample(const std::filesystem::path& path);

}  // namespace eupe
