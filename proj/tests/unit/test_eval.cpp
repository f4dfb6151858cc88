#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "eupe/error.hpp"
#include "eupe/eval.hpp"

using namespace eupe;
using eupe::testing::brute_force_knn;
using eupe::testing::values;

namespace {

// Two Gaussian clusters per class id, centers 10 sigma apart.
FeatureBank gaussian_bank(std::size_t per_class, std::size_t d, Rng& rng, std::vector<int> classes = {0, 1}) {
  FeatureBank bank;
  std::vector<float> rows;
  for (int c : classes) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < d; ++j) rows.push_back(static_cast<float>((j == 0 ? 10.0 * c : 0.0) + rng.normal()));
      bank.labels.push_back(c);
    }
  }
  bank.features = Tensor(Shape{per_class * classes.size(), d}, std::move(rows));
  return bank;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) { return eupe::testing::random_tensor({r, c}, rng); }

}  // namespace

TEST_CASE("knn_classify") {
  Rng rng(5);
  auto bank = gaussian_bank(100, 4, rng);
  const auto rows = values(bank.features);
  CHECK(knn_classify(bank, std::span<const float>(rows).subspan(4 * 7, 4), 1) == bank.labels[7]);
  CHECK(knn_classify(bank, std::span<const float>(rows).subspan(4 * 150, 4), 1) == bank.labels[150]);

  std::size_t correct = 0, agree = 0;
  for (int i = 0; i < 200; ++i) {
    const int truth = i % 2;
    std::vector<float> q(4);
    for (std::size_t j = 0; j < 4; ++j) q[j] = static_cast<float>((j == 0 ? 10.0 * truth : 0.0) + rng.normal());
    const int pred = knn_classify(bank, q, 10);
    correct += pred == truth;
    agree += pred == brute_force_knn(bank, q, 10);
  }
  CHECK(correct >= 198);
  CHECK(agree == 200);

  SUBCASE("ties") {
    FeatureBank tie;
    tie.features = Tensor::matrix({{0.0f}, {3.0f}, {-1.0f}, {5.0f}});
    tie.labels = {2, 1, 1, 2};
    // k=2 at 1: distances 1 (label 2) and 2 (label 1 at 3) -> one vote each, label 2 is closer
    std::vector<float> q{1.0f};
    CHECK(knn_classify(tie, q, 2) == 2);
    // k=4 at 1.5: two votes each, summed 1.5+3.5=5 for label 2, 1.5+2.5=4 for label 1
    q = {1.5f};
    CHECK(knn_classify(tie, q, 4) == 1);
    FeatureBank sym;
    sym.features = Tensor::matrix({{1.0f}, {-1.0f}});
    sym.labels = {3, 1};
    q = {0.0f};
    CHECK(knn_classify(sym, q, 2) == 1);
  }
  SUBCASE("invariant to uniform positive scaling") {
    FeatureBank scaled = bank;
    scaled.features = Tensor(bank.features.shape(), values(bank.features));
    for (float& v : scaled.features.mutable_data()) v *= 4.0f;
    Rng qrng(9);
    for (int i = 0; i < 100; ++i) {
      std::vector<float> q(4), q4(4);
      for (std::size_t j = 0; j < 4; ++j) {
        q[j] = static_cast<float>(qrng.uniform(-2, 12));
        q4[j] = 4.0f * q[j];
      }
      CHECK(knn_classify(bank, q, 10) == knn_classify(scaled, q4, 10));
    }
  }
  FeatureBank empty;
  empty.features = Tensor(Shape{0, 4});
  std::vector<float> q(4);
  CHECK_THROWS_AS(knn_classify(empty, q, 1), ParameterError);
  CHECK_THROWS_AS(knn_classify(bank, q, 0), ParameterError);
  CHECK_THROWS_AS(knn_classify(bank, q, 201), ParameterError);
  std::vector<float> q3(3);
  CHECK_THROWS_AS(knn_classify(bank, q3, 1), DimensionError);
  CHECK(EvalSettings{}.knn_k == 10);
}

TEST_CASE("zero-shot prototypes") {
  Rng rng(21);
  const std::size_t d = 6;
  Tensor feats = random_matrix(40, d, rng);
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(i % 5 == 0 ? 7 : i % 3);
  auto protos = build_prototypes(feats, labels);
  CHECK(protos.classes == std::vector<int>{0, 1, 2, 7});
  protos.validate();
  // Rows are the normalized class means
  auto f = values(feats);
  auto w = values(protos.weights);
  for (std::size_t c = 0; c < protos.classes.size(); ++c) {
    std::vector<double> mean(d, 0.0);
    double norm = 0.0;
    for (std::size_t i = 0; i < 40; ++i)
      if (labels[i] == protos.classes[c])
        for (std::size_t j = 0; j < d; ++j) mean[j] += f[i * d + j];
    for (double v : mean) norm += v * v;
    for (std::size_t j = 0; j < d; ++j) CHECK(w[c * d + j] == doctest::Approx(mean[j] / std::sqrt(norm)).epsilon(1e-5));
  }

  for (std::size_t c = 0; c < protos.classes.size(); ++c)
    CHECK(nearest_prototype(std::span<const float>(w).subspan(c * d, d), protos) == protos.classes[c]);

  // uniformly rescaling the source features leaves the prototypes, and so the predictions, unchanged
  Tensor scaled(feats.shape(), values(feats));
  for (float& v : scaled.mutable_data()) v *= 3.0f;
  auto protos3 = build_prototypes(scaled, labels);

  Rng hrng(3);
  AdapterHead head = init_adapter_head(5, 16, d, hrng);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor token = eupe::testing::random_tensor({5}, rng);
    const int pred = zeroshot_classify(token, head, protos);
    Tensor adapted = adapt_tokens(head, token);
    auto a = values(adapted);
    double an = 0;
    for (float v : a) an += static_cast<double>(v) * v;
    int oracle = -1;
    double best = -2;
    for (std::size_t c = 0; c < protos.classes.size(); ++c) {
      double dot = 0, pn = 0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += static_cast<double>(a[j]) * w[c * d + j];
        pn += static_cast<double>(w[c * d + j]) * w[c * d + j];
      }
      const double cosine = dot / std::sqrt(an * pn);
      if (cosine > best) {
        best = cosine;
        oracle = protos.classes[c];
      }
    }
    CHECK(pred == oracle);
    std::vector<float> big(a);
    for (float& v : big) v *= 8.0f;
    CHECK(nearest_prototype(big, protos) == pred);
    CHECK(zeroshot_classify(token, head, protos3) == pred);
  }
  CHECK_THROWS_AS(zeroshot_classify(Tensor(Shape{4}), head, protos), DimensionError);
  AdapterHead wide = init_adapter_head(5, 16, d + 1, hrng);
  CHECK_THROWS_AS(zeroshot_classify(Tensor(Shape{5}), wide, protos), DimensionError);
}

TEST_CASE("linear probes") {
  Rng rng(8);
  SUBCASE("separable two-class features") {
    const std::size_t m = 400;
    std::vector<float> x, y;
    for (std::size_t i = 0; i < m; ++i) {
      const int c = static_cast<int>(i % 2);
      const double margin = c ? 1.0 : -1.0;
      const double a = rng.uniform(-3, 3);
      x.push_back(static_cast<float>(a));
      x.push_back(static_cast<float>(a * 0.5 + margin * rng.uniform(0.5, 1.5)));
      x.push_back(static_cast<float>(rng.normal()));
      y.push_back(static_cast<float>(c));
    }
    Tensor X(Shape{m, 3}, x), Y(Shape{m}, y);
    ProbeConfig cfg;
    cfg.steps = 3000;
    cfg.batch_size = 64;
    auto r = linear_probe(X, Y, X, Y, ProbeMode::Classify, cfg);
    CHECK(r.classification.accuracy >= 0.99);
    CHECK(r.probe.num_classes == 2);
  }
  SUBCASE("realizable linear regression") {
    const std::size_t m = 512, d = 5;
    Tensor X = random_matrix(m, d, rng);
    std::vector<float> y(m * 2);
    auto x = values(X);
    for (std::size_t i = 0; i < m; ++i) {
      double a = 0.3, b = -1.2;
      for (std::size_t j = 0; j < d; ++j) {
        a += (0.5 - 0.2 * j) * x[i * d + j];
        b += (j % 2 ? 0.7 : -0.4) * x[i * d + j];
      }
      y[i * 2] = static_cast<float>(a);
      y[i * 2 + 1] = static_cast<float>(b);
    }
    Tensor Y(Shape{m, 2}, y);
    ProbeConfig cfg = depth_probe_defaults();
    cfg.lr = 3e-2;
    cfg.steps = 3000;
    cfg.batch_size = 128;
    auto r = linear_probe(X, Y, X, Y, ProbeMode::Regress, cfg);
    MESSAGE("regression rmse " << r.rmse);
    CHECK(r.rmse <= 1e-3);
  }
  SUBCASE("mode and target mismatch") {
    Tensor X = random_matrix(4, 2, rng);
    CHECK_THROWS_AS(train_linear_probe(X, Tensor::from({0.f, 1.f, 0.5f, 1.f}), ProbeMode::Classify), ContractError);
    CHECK_THROWS_AS(train_linear_probe(X, Tensor::from({0.f, 1.f, -1.f, 1.f}), ProbeMode::Classify), ContractError);
    CHECK_THROWS_AS(train_linear_probe(X, Tensor::from({0.f, 1.f}), ProbeMode::Regress), ContractError);
    CHECK_THROWS_AS(train_linear_probe(X, Tensor(Shape{4, 2, 1}), ProbeMode::Regress), ContractError);
  }
  CHECK(segmentation_probe_defaults().lr == 1e-3);
  CHECK(segmentation_probe_defaults().weight_decay == 1e-3);
  CHECK(depth_probe_defaults().lr == 3e-4);
  CHECK(depth_probe_defaults().weight_decay == 1e-3);
}

TEST_CASE("class metrics") {
  std::vector<int> pred{0, 0, 0, 1, 0}, truth{0, 0, 1, 1, 2};
  // class 0: tp 2, pred 4, truth 2 -> 2/4; class 1: tp 1, pred 1, truth 2 -> 1/2; class 2: tp 0, pred 0, truth 1 -> 0
  auto m = class_metrics(pred, truth);
  CHECK(m.accuracy == doctest::Approx(0.6));
  CHECK(m.mean_iou == doctest::Approx((0.5 + 0.5 + 0.0) / 3));
  CHECK(rmse(Tensor::from({1, 2, 3}), Tensor::from({1, 2, 5})) == doctest::Approx(std::sqrt(4.0 / 3)));
  CHECK_THROWS_AS(class_metrics(std::vector<int>{1}, std::vector<int>{}), DimensionError);
}

TEST_CASE("upsample_features") {
  // a field linear in (row, col) is reproduced exactly by corner-aligned bilinear interpolation
  const GridSize g{3, 4};
  Tensor tokens(Shape{12, 2});
  auto t = tokens.mutable_data();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      t[(r * 4 + c) * 2] = static_cast<float>(r);
      t[(r * 4 + c) * 2 + 1] = static_cast<float>(2.0 * c + 1);
    }
  Tensor up = upsample_features({tokens, g, 9, 13});
  auto u = values(up);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 13; ++x) {
      CHECK(u[(y * 13 + x) * 2] == doctest::Approx(y * 2.0 / 8).epsilon(1e-6));
      CHECK(u[(y * 13 + x) * 2 + 1] == doctest::Approx(2.0 * x * 3.0 / 12 + 1).epsilon(1e-6));
    }
  CHECK_THROWS_AS(upsample_features({tokens, {2, 2}, 4, 4}), DimensionError);
}

namespace {

// Similarity argmax with interpolation weights from a tent kernel summed over
// every token, then distance check.
double brute_force_pck(const DenseFeatures& s, const DenseFeatures& t, std::span<const KeypointPair> pairs,
                       const BoundingBox& box, double threshold) {
  auto pixel_feature = [](const DenseFeatures& f, double py, double px) {
    const std::size_t d = f.tokens.dim(1);
    auto tok = values(f.tokens);
    const double gy = f.height > 1 ? py * (f.grid.rows - 1.0) / (f.height - 1.0) : 0.0;
    const double gx = f.width > 1 ? px * (f.grid.cols - 1.0) / (f.width - 1.0) : 0.0;
    std::vector<double> v(d, 0.0);
    for (std::size_t r = 0; r < f.grid.rows; ++r)
      for (std::size_t c = 0; c < f.grid.cols; ++c) {
        const double w = std::max(0.0, 1 - std::abs(gy - r)) * std::max(0.0, 1 - std::abs(gx - c));
        for (std::size_t j = 0; j < d; ++j) v[j] += w * tok[(r * f.grid.cols + c) * d + j];
      }
    return v;
  };
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    return ab / std::sqrt(aa * bb);
  };
  std::vector<std::vector<double>> target;
  for (std::size_t y = 0; y < t.height; ++y)
    for (std::size_t x = 0; x < t.width; ++x) target.push_back(pixel_feature(t, y, x));
  std::size_t hits = 0;
  for (const auto& p : pairs) {
    auto q = pixel_feature(s, std::round(p.source.y), std::round(p.source.x));
    std::size_t best = 0;
    for (std::size_t i = 1; i < target.size(); ++i)
      if (cosine(q, target[i]) > cosine(q, target[best])) best = i;
    const double dx = static_cast<double>(best % t.width) - p.target.x;
    const double dy = static_cast<double>(best / t.width) - p.target.y;
    hits += std::sqrt(dx * dx + dy * dy) <= threshold * box.max_side();
  }
  return static_cast<double>(hits) / pairs.size();
}

std::vector<KeypointPair> random_pairs(std::size_t n, std::size_t size, Rng& rng, bool same) {
  std::vector<KeypointPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    Keypoint a{static_cast<float>(rng.uniform(0, size - 1)), static_cast<float>(rng.uniform(0, size - 1)),
               static_cast<int>(i)};
    Keypoint b = same ? a
                      : Keypoint{static_cast<float>(rng.uniform(0, size - 1)),
                                 static_cast<float>(rng.uniform(0, size - 1)), static_cast<int>(i)};
    if (same) {
      a.x = std::round(a.x);
      a.y = std::round(a.y);
      b = a;
    }
    out.push_back({a, b});
  }
  return out;
}

}  // namespace

TEST_CASE("pck_correspondence") {
  Rng rng(13);
  const BoundingBox box{4, 4, 20, 24};
  DenseFeatures f{random_matrix(16, 8, rng), {4, 4}, 32, 32};
  auto self_pairs = random_pairs(60, 32, rng, true);
  CHECK(pck_correspondence(f, f, self_pairs, box).score() == 1.0);
  CHECK(pck_correspondence(f, f, self_pairs, box, 0.0).score() == 1.0);

  DenseFeatures g{random_matrix(16, 8, rng), {4, 4}, 32, 32};
  auto pairs = random_pairs(40, 32, rng, false);
  for (double th : {0.0, 0.05, 0.1, 0.5}) {
    const double got = pck_correspondence(f, g, pairs, box, th).score();
    CHECK(got == doctest::Approx(brute_force_pck(f, g, pairs, box, th)).epsilon(1e-12));
  }
  double prev = -1;
  for (double th = 0.0; th <= 2.0; th += 0.1) {
    const double s = pck_correspondence(f, g, pairs, box, th).score();
    CHECK(s >= prev);
    prev = s;
  }
  CHECK(prev == 1.0);  // 2 * max side covers the image diagonal

  // orthogonal token features: a source pixel on a token center only matches that token
  Tensor eye(Shape{16, 16});
  for (std::size_t i = 0; i < 16; ++i) eye.mutable_data()[i * 16 + i] = 1.0f;
  DenseFeatures o{eye, {4, 4}, 31, 31};
  std::vector<KeypointPair> centers;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) centers.push_back({{c * 10.0f, r * 10.0f, 0}, {c * 10.0f, r * 10.0f, 0}});
  CHECK(pck_correspondence(o, o, centers, box, 0.0).score() == 1.0);
  auto shuffled = random_pairs(30, 31, rng, false);
  const double tiny = pck_correspondence(o, o, shuffled, box, 1e-3).score();
  CHECK(tiny <= brute_force_pck(o, o, shuffled, box, 1e-3) + 1e-12);

  CHECK_THROWS_AS(pck_correspondence(f, g, std::vector<KeypointPair>{}, box), ParameterError);
  std::vector<KeypointPair> outside{{{40, 1, 0}, {1, 1, 0}}};
  CHECK_THROWS_AS(pck_correspondence(f, g, outside, box), ContractError);
  CHECK(kPckThreshold == 0.1);
}

TEST_CASE("pca_rgb") {
  Rng rng(17);
  const std::size_t n = 48, d = 10;
  SUBCASE("rank-3 tokens") {
    Tensor a = random_matrix(n, 3, rng), b = random_matrix(3, d, rng);
    auto av = values(a), bv = values(b);
    Tensor tokens(Shape{n, d});
    auto t = tokens.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < 3; ++k) t[i * d + j] += av[i * 3 + k] * bv[k * d + j];
    auto p = pca_rgb(tokens, {6, 8});
    CHECK(p.explained >= 1 - 1e-6);
    // eigenvalues sum to the trace of the covariance
    double trace = 0;
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) mean += t[i * d + j];
      mean /= n;
      for (std::size_t i = 0; i < n; ++i) var += (t[i * d + j] - mean) * (t[i * d + j] - mean);
      trace += var / n;
    }
    CHECK(std::accumulate(p.eigenvalues.begin(), p.eigenvalues.end(), 0.0) == doctest::Approx(trace).epsilon(1e-6));
    CHECK(p.image.shape() == Shape{6, 8, 3});
  }
  SUBCASE("identical tokens give a uniform image") {
    Tensor tokens(Shape{n, d}, 0.7f);
    auto p = pca_rgb(tokens, {6, 8});
    for (float v : values(p.image)) CHECK(v == 0.0f);
  }
  SUBCASE("rank below three pads with zeros") {
    Tensor tokens(Shape{n, d});
    auto t = tokens.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) t[i * d + j] = static_cast<float>(i) * (j + 1.0f);
    auto p = pca_rgb(tokens, {6, 8});
    auto img = values(p.image);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(img[i * 3] == doctest::Approx(i / 47.0).epsilon(1e-5));
      CHECK(img[i * 3 + 1] == 0.0f);
      CHECK(img[i * 3 + 2] == 0.0f);
    }
  }
  SUBCASE("range and rotation invariance") {
    Tensor tokens = random_matrix(n, d, rng);
    // well-separated spectrum so the top axes are unambiguous
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 3; ++j) tokens.mutable_data()[i * d + j] *= static_cast<float>(8 - 2 * j);
    auto p = pca_rgb(tokens, {8, 6});
    for (float v : values(p.image)) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    // random orthogonal matrix from Gram-Schmidt
    std::vector<double> q(d * d);
    for (auto& v : q) v = rng.normal();
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t k = 0; k < c; ++k) {
        double dot = 0;
        for (std::size_t r = 0; r < d; ++r) dot += q[r * d + c] * q[r * d + k];
        for (std::size_t r = 0; r < d; ++r) q[r * d + c] -= dot * q[r * d + k];
      }
      double nrm = 0;
      for (std::size_t r = 0; r < d; ++r) nrm += q[r * d + c] * q[r * d + c];
      for (std::size_t r = 0; r < d; ++r) q[r * d + c] /= std::sqrt(nrm);
    }
    Tensor rotated(Shape{n, d});
    auto tv = values(tokens);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0;
        for (std::size_t r = 0; r < d; ++r) s += tv[i * d + r] * q[r * d + c];
        rotated.mutable_data()[i * d + c] = static_cast<float>(s);
      }
    auto pr = pca_rgb(rotated, {8, 6});
    auto a = values(p.image), b = values(pr.image);
    for (std::size_t c = 0; c < 3; ++c) {
      double same = 0, flipped = 0;
      for (std::size_t i = 0; i < n; ++i) {
        same = std::max(same, std::abs(static_cast<double>(a[i * 3 + c]) - b[i * 3 + c]));
        flipped = std::max(flipped, std::abs(1.0 - a[i * 3 + c] - b[i * 3 + c]));
      }
      CHECK(std::min(same, flipped) <= 1e-4);
    }
  }
  CHECK_THROWS_AS(pca_rgb(Tensor(Shape{2, 5}), {1, 2}), ParameterError);
  CHECK_THROWS_AS(pca_rgb(Tensor(Shape{6, 5}), {2, 2}), DimensionError);
}

TEST_CASE("pixmap round trip") {
  Rng rng(2);
  Tensor img(Shape{5, 7, 3});
  for (float& v : img.mutable_data()) v = static_cast<float>(rng.uniform());
  auto path = std::filesystem::temp_directory_path() / "eupe_eval_test.ppm";
  write_ppm(path, img);
  Tensor back = read_ppm(path);
  CHECK(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255 + 1e-6f);
  CHECK(std::filesystem::file_size(path) == std::string("P6\n7 5\n255\n").size() + 105);
  std::filesystem::remove(path);
}

TEST_CASE("protocol runner") {
  SyntheticSpec spec;
  spec.images_per_class = 8;
  auto corpus = generate_corpus(spec);
  std::vector<Sample> train, test;
  split_corpus(corpus, 0.25, train, test);
  CHECK(train.size() == 24);
  CHECK(test.size() == 8);
  for (int c = 0; c < 4; ++c)
    CHECK(std::count_if(test.begin(), test.end(), [c](const Sample& s) { return s.class_label == c; }) == 2);

  ViTConfig cfg;
  cfg.dim = 16;
  cfg.depth = 1;
  cfg.heads = 2;
  EncoderParams enc = init_params(cfg, 4);
  EncoderParams before = enc.clone();
  TeacherBinding t;
  t.name = "t";
  t.teacher = init_params(cfg, 5);
  t.native_resolution = 32;
  t.class_head = identity_adapter_head(16);
  t.stats = calibrate_stats(t, images_of(corpus));

  EvalSettings settings;
  settings.segmentation.steps = 50;
  settings.depth.steps = 50;
  std::vector<std::string> all = kProtocols;
  auto r1 = run_protocols(enc, corpus, all, settings, &t);
  auto r2 = run_protocols(enc, corpus, all, settings, &t);
  CHECK(r1.csv() == r2.csv());
  CHECK(r1.rows.size() == 7);
  auto names = enc.named_tensors(), old = before.named_tensors();
  for (std::size_t i = 0; i < names.size(); ++i) CHECK(bitwise_equal(names[i].second, old[i].second));
  for (const auto& row : r1.rows) CHECK(std::isfinite(row.value));
  CHECK(r1.csv().rfind("protocol,metric,value,seed,config_hash\nknn,accuracy,", 0) == 0);

  settings.seed = 1;
  auto r3 = run_protocols(enc, corpus, std::vector<std::string>{"knn"}, settings);
  CHECK(r3.config_hash != r1.config_hash);

  std::vector<std::string> bad{"knn", "imagenet"};
  CHECK_THROWS_WITH_AS(validate_protocols(bad), doctest::Contains("knn, zeroshot, seg, depth, pck"), ConfigError);
  CHECK_THROWS_AS(run_protocols(enc, corpus, std::vector<std::string>{"zeroshot"}, settings), ConfigError);
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}
