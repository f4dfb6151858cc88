#include "eupe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eupe/error.hpp"
#include "eupe/ops.hpp"
#include "eupe/tape.hpp"

namespace eupe {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void check_image(const Tensor& image, const char* what) {
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) == 0 || image.dim(1) == 0) {
    throw DimensionError(std::string(what) + " expects an [H,W,3] image, got " + shape_str(image.shape()));
  }
}

enum class ShapeKind { Disk, Square, Diamond };

bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::Disk: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r * 1.15;
  }
  return false;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_classes == 0 || images_per_class == 0) throw ParameterError("synthetic corpus needs classes and images");
  if (image_size < 8) throw ParameterError("synthetic image_size must be at least 8");
  if (!(object_scale_min > 0.0f) || object_scale_max < object_scale_min || object_scale_max > 0.5f) {
    throw ParameterError("synthetic object scale range must satisfy 0 < min <= max <= 0.5");
  }
  if (texture_amplitude < 0.0f) throw ParameterError("texture_amplitude must be non-negative");
}

std::array<float, 3> class_color(std::size_t cls, std::size_t num_classes) {
  if (num_classes == 0 || cls >= num_classes) throw ParameterError("class index out of range");
  const double b = num_classes == 1 ? 0.5 : 0.25 + 0.5 * static_cast<double>(cls) / static_cast<double>(num_classes - 1);
  const double theta = kTwoPi * static_cast<double>(cls) / static_cast<double>(num_classes);
  std::array<float, 3> rgb{};
  for (int k = 0; k < 3; ++k) rgb[k] = static_cast<float>(b + 0.22 * std::cos(theta - kTwoPi * k / 3.0));
  return rgb;
}

Sample generate_sample(const SyntheticSpec& spec, std::size_t index) {
  spec.validate();
  if (index >= spec.size()) throw ParameterError("sample index out of range");
  const std::size_t C = spec.num_classes;
  const std::size_t S = spec.image_size;
  const int cls = static_cast<int>(index / spec.images_per_class);
  Rng rng(derive_seed(spec.seed, index));

  const int bg = C > 1 ? static_cast<int>((cls + 1 + rng.below(C - 1)) % C) : cls;
  const double cx = S * (0.5 + rng.uniform(-0.08, 0.08));
  const double cy = S * (0.5 + rng.uniform(-0.08, 0.08));
  const double r = S * rng.uniform(spec.object_scale_min, spec.object_scale_max);
  const auto kind = static_cast<ShapeKind>(cls % 3);
  const double freq = spec.texture_frequency * (1.0 + static_cast<double>(cls % 3));
  const double phase = rng.uniform(0.0, kTwoPi);

  struct Blob {
    double x, y, r;
    int cls;
  };
  std::vector<Blob> blobs;
  for (std::size_t i = 0; i < spec.distractors && C > 1; ++i) {
    const int dc = static_cast<int>((cls + 1 + rng.below(C - 1)) % C);
    blobs.push_back({rng.uniform(0.1, 0.9) * S, rng.uniform(0.1, 0.9) * S, 0.09 * S, dc});
  }

  Sample s;
  s.class_label = cls;
  s.image = Tensor(Shape{S, S, 3});
  s.depth = Tensor(Shape{S, S});
  s.dense_label.assign(S * S, bg);
  auto img = s.image.mutable_data();
  auto depth = s.depth.mutable_data();
  const auto bg_rgb = class_color(bg, C);
  const auto fg_rgb = class_color(cls, C);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double wave = spec.texture_amplitude * std::sin(kTwoPi * freq * (px + py) / S + phase);
      int label = bg;
      auto rgb = bg_rgb;
      double z = 1.0 + 0.5 * py / S;
      for (const auto& b : blobs) {
        if ((px - b.x) * (px - b.x) + (py - b.y) * (py - b.y) <= b.r * b.r) {
          label = b.cls;
          rgb = class_color(b.cls, C);
          z = 0.8;
        }
      }
      const double dx = px - cx, dy = py - cy;
      if (inside(kind, dx, dy, r)) {
        label = cls;
        rgb = fg_rgb;
        z = 0.3 + 0.2 * std::min(1.0, std::sqrt(dx * dx + dy * dy) / r);
      }
      s.dense_label[y * S + x] = label;
      depth[y * S + x] = static_cast<float>(z);
      for (int k = 0; k < 3; ++k) img[(y * S + x) * 3 + k] = clamp01(static_cast<float>(rgb[k] + wave));
    }
  }
  // keypoints and boxes use pixel-index coordinates: pixel i is centered at i
  auto clampc = [S](double v) { return static_cast<float>(std::clamp(v - 0.5, 0.0, static_cast<double>(S - 1))); };
  const double ext = kind == ShapeKind::Square ? r * 0.85 : (kind == ShapeKind::Diamond ? r * 1.15 : r);
  s.keypoints = {{clampc(cx), clampc(cy), 0},
                 {clampc(cx), clampc(cy - ext), 1},
                 {clampc(cx), clampc(cy + ext), 2},
                 {clampc(cx - ext), clampc(cy), 3},
                 {clampc(cx + ext), clampc(cy), 4}};
  s.bbox = {clampc(cx - ext), clampc(cy - ext), clampc(cx + ext), clampc(cy + ext)};
  return s;
}

std::vector<Sample> generate_corpus(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) out.push_back(generate_sample(spec, i));
  return out;
}

std::vector<Tensor> images_of(std::span<const Sample> samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.crop_scale_min = 1.0f;
  c.crop_scale_max = 1.0f;
  c.hflip_prob = 0.0f;
  c.jitter_prob = 0.0f;
  c.blur_prob = 0.0f;
  c.solarize_prob = 0.0f;
  return c;
}

Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width) {
  check_image(image, "resize_image");
  if (image.dim(0) == height && image.dim(1) == width) return image;
  NoGradScope no_grad;
  Tensor out = bicubic_resize(image, height, width).clone();
  for (float& v : out.mutable_data()) v = clamp01(v);
  out.set_requires_grad(false);
  return out;
}

Tensor random_resized_crop(const Tensor& image, Rng& rng, float scale_min, float scale_max, std::size_t out_size) {
  check_image(image, "random_resized_crop");
  if (!(scale_min > 0.0f) || scale_max < scale_min || scale_max > 1.0f) {
    throw ParameterError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  const std::size_t H = image.dim(0), W = image.dim(1);
  const double area = static_cast<double>(H * W);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h < 2 || w < 2 || w > W || h > H) continue;
    const std::size_t x0 = rng.below(W - w + 1), y0 = rng.below(H - h + 1);
    Tensor crop(Shape{h, w, 3});
    auto src = image.data();
    auto dst = crop.mutable_data();
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src.begin() + ((y0 + y) * W + x0) * 3, w * 3, dst.begin() + y * w * 3);
    return resize_image(crop, out_size, out_size);
  }
  return resize_image(image, out_size, out_size);
}

Tensor hflip(const Tensor& image) {
  check_image(image, "hflip");
  const std::size_t H = image.dim(0), W = image.dim(1);
  Tensor out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) dst[(y * W + x) * 3 + c] = src[(y * W + (W - 1 - x)) * 3 + c];
  return out;
}

Sample hflip(const Sample& sample) {
  Sample out = sample;
  const std::size_t H = sample.height(), W = sample.width();
  out.image = hflip(sample.image);
  out.depth = Tensor(sample.depth.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      out.dense_label[y * W + x] = sample.dense_label[y * W + (W - 1 - x)];
      out.depth.mutable_data()[y * W + x] = sample.depth[y * W + (W - 1 - x)];
    }
  const auto fw = static_cast<float>(W - 1);
  for (auto& k : out.keypoints) k.x = fw - k.x;
  out.bbox = {fw - sample.bbox.x1, sample.bbox.y0, fw - sample.bbox.x0, sample.bbox.y1};
  return out;
}

Tensor color_jitter(const Tensor& image, Rng& rng, float brightness, float contrast, float saturation) {
  check_image(image, "color_jitter");
  const double fb = rng.uniform(1.0 - brightness, 1.0 + brightness);
  const double fc = rng.uniform(1.0 - contrast, 1.0 + contrast);
  const double fs = rng.uniform(1.0 - saturation, 1.0 + saturation);
  Tensor out = image.clone();
  auto x = out.mutable_data();
  const std::size_t P = image.dim(0) * image.dim(1);
  auto gray = [&x](std::size_t p) { return 0.299 * x[p * 3] + 0.587 * x[p * 3 + 1] + 0.114 * x[p * 3 + 2]; };
  for (float& v : x) v = clamp01(static_cast<float>(v * fb));
  double m = 0;
  for (std::size_t p = 0; p < P; ++p) m += gray(p);
  m /= static_cast<double>(P);
  for (float& v : x) v = clamp01(static_cast<float>((v - m) * fc + m));
  for (std::size_t p = 0; p < P; ++p) {
    const double g = gray(p);
    for (int c = 0; c < 3; ++c) x[p * 3 + c] = clamp01(static_cast<float>((x[p * 3 + c] - g) * fs + g));
  }
  return out;
}

Tensor gaussian_blur(const Tensor& image, float sigma) {
  check_image(image, "gaussian_blur");
  if (!(sigma > 0.0f)) throw ParameterError("blur sigma must be positive");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (double(sigma) * sigma));
  for (auto& v : k) v /= total;

  const int H = static_cast<int>(image.dim(0)), W = static_cast<int>(image.dim(1));
  auto pass = [&](const Tensor& in, bool horizontal) {
    Tensor out(in.shape());
    auto src = in.data();
    auto dst = out.mutable_data();
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          double acc = 0;
          for (int i = -radius; i <= radius; ++i) {
            const int sx = horizontal ? std::clamp(x + i, 0, W - 1) : x;
            const int sy = horizontal ? y : std::clamp(y + i, 0, H - 1);
            acc += k[i + radius] * src[(sy * W + sx) * 3 + c];
          }
          dst[(y * W + x) * 3 + c] = static_cast<float>(acc);
        }
    return out;
  };
  return pass(pass(image, true), false);
}

Tensor solarize(const Tensor& image, float threshold) {
  check_image(image, "solarize");
  Tensor out = image.clone();
  for (float& v : out.mutable_data())
    if (v >= threshold) v = 1.0f - v;
  return out;
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentConfig& cfg, std::size_t out_size) {
  Tensor x = cfg.crop_scale_min >= 1.0f ? resize_image(image, out_size, out_size)
                                         : random_resized_crop(image, rng, cfg.crop_scale_min, cfg.crop_scale_max, out_size);
  if (rng.bernoulli(cfg.hflip_prob)) x = hflip(x);
  if (rng.bernoulli(cfg.jitter_prob)) x = color_jitter(x, rng, cfg.brightness, cfg.contrast, cfg.saturation);
  if (rng.bernoulli(cfg.blur_prob)) x = gaussian_blur(x, static_cast<float>(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)));
  if (rng.bernoulli(cfg.solarize_prob)) x = solarize(x, cfg.solarize_threshold);
  if (x.shares_storage(image)) x = x.clone();
  for (float& v : x.mutable_data()) v = clamp01(v);
  return x;
}

Tensor normalize_input(const Tensor& image) {
  check_image(image, "normalize_input");
  Tensor out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - kImageNetMean[i % 3]) / kImageNetStd[i % 3];
  return out;
}

Tensor denormalize_input(const Tensor& image) {
  check_image(image, "denormalize_input");
  Tensor out(image.shape());
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * kImageNetStd[i % 3] + kImageNetMean[i % 3];
  return out;
}

Tensor prepare_input(const Tensor& image, std::size_t resolution) {
  return normalize_input(resize_image(image, resolution, resolution));
}

namespace {

constexpr char kSampleMagic[8] = {'E', 'U', 'P', 'E', 'S', 'M', 'P', 'L'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated sample file " + path.string());
  return v;
}

template <typename T>
void get_array(std::istream& is, T* dst, std::size_t n, const std::filesystem::path& path) {
  if (!is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * sizeof(T)))) {
    throw DataError("truncated sample file " + path.string());
  }
}

}  // namespace

void write_sample(const std::filesystem::path& path, const Sample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kSampleMagic, sizeof(kSampleMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.height()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.width()));
  put<std::int32_t>(os, s.class_label);
  auto img = s.image.data();
  os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size() * sizeof(float)));
  for (int v : s.dense_label) put<std::int32_t>(os, v);
  auto depth = s.depth.data();
  os.write(reinterpret_cast<const char*>(depth.data()), static_cast<std::streamsize>(depth.size() * sizeof(float)));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.keypoints.size()));
  for (const auto& k : s.keypoints) {
    put<float>(os, k.x);
    put<float>(os, k.y);
    put<std::int32_t>(os, k.id);
  }
  for (float v : {s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1}) put<float>(os, v);
  if (!os) throw IoError("failed writing " + path.string());
}

Sample read_sample(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open sample file " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kSampleMagic, 8) != 0) {
    throw DataError("not a sample file: " + path.string());
  }
  const auto H = get<std::uint32_t>(is, path);
  const auto W = get<std::uint32_t>(is, path);
  if (H == 0 || W == 0 || H > 16384 || W > 16384) throw DataError("implausible image size in " + path.string());
  Sample s;
  s.class_label = get<std::int32_t>(is, path);
  s.image = Tensor(Shape{H, W, 3});
  get_array(is, s.image.mutable_data().data(), std::size_t(H) * W * 3, path);
  std::vector<std::int32_t> dense(std::size_t(H) * W);
  get_array(is, dense.data(), dense.size(), path);
  s.dense_label.assign(dense.begin(), dense.end());
  s.depth = Tensor(Shape{H, W});
  get_array(is, s.depth.mutable_data().data(), std::size_t(H) * W, path);
  const auto nk = get<std::uint32_t>(is, path);
  if (nk > 1024) throw DataError("implausible keypoint count in " + path.string());
  for (std::uint32_t i = 0; i < nk; ++i) {
    Keypoint k;
    k.x = get<float>(is, path);
    k.y = get<float>(is, path);
    k.id = get<std::int32_t>(is, path);
    s.keypoints.push_back(k);
  }
  s.bbox.x0 = get<float>(is, path);
  s.bbox.y0 = get<float>(is, path);
  s.bbox.x1 = get<float>(is, path);
  s.bbox.y1 = get<float>(is, path);
  return s;
}

void export_corpus(const std::filesystem::path& dir, std::span<const Sample> samples, std::size_t num_classes) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  manifest << "eupe-corpus 1\nnum_classes " << num_classes << "\nsamples " << samples.size() << "\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%06zu.bin", i);
    write_sample(dir / name, samples[i]);
    manifest << name << "\n";
  }
}

Corpus import_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("no corpus manifest in " + dir.string());
  std::string tag, key;
  int version = 0;
  std::size_t count = 0;
  Corpus corpus;
  if (!(manifest >> tag >> version) || tag != "eupe-corpus" || version != 1) {
    throw DataError("unrecognized corpus manifest in " + dir.string());
  }
  if (!(manifest >> key >> corpus.num_classes) || key != "num_classes" || !(manifest >> key >> count) ||
      key != "samples") {
    throw DataError("malformed corpus manifest in " + dir.string());
  }
  std::string name;
  while (manifest >> name) {
    if (name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
      throw DataError("invalid sample name '" + name + "' in manifest");
    }
    corpus.samples.push_back(read_sample(dir / name));
  }
  if (corpus.samples.size() != count) {
    throw DataError("manifest lists " + std::to_string(corpus.samples.size()) + " samples but declares " +
                    std::to_string(count));
  }
  for (const auto& s : corpus.samples) {
    if (s.class_label < 0 || static_cast<std::size_t>(s.class_label) >= corpus.num_classes) {
      throw DataError("sample label out of range in " + dir.string());
    }
  }
  return corpus;
}

}  // namespace eupe
