#include "eupe/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "eupe/error.hpp"
#include "eupe/ops.hpp"
#include "eupe/tape.hpp"

namespace eupe {

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<RowMatrixF>;
using ConstMapF = Eigen::Map<const RowMatrixF>;

ConstMapF as_matrix(const Tensor& t) {
  return ConstMapF(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

void require_matrix(const Tensor& t, const char* what) {
  if (!t.defined() || t.rank() != 2) throw DimensionError(std::string(what) + " must be a [rows, dim] tensor");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void FeatureBank::validate() const {
  require_matrix(features, "feature bank");
  if (features.dim(0) != labels.size()) throw DimensionError("feature bank has " + std::to_string(features.dim(0)) +
                                                             " rows but " + std::to_string(labels.size()) + " labels");
  if (!all_finite(features)) throw DataError("feature bank contains non-finite values");
}

int knn_classify(const FeatureBank& bank, std::span<const float> query, std::size_t k) {
  if (bank.labels.empty()) throw ParameterError("knn on an empty feature bank");
  bank.validate();
  const std::size_t m = bank.size(), d = bank.features.dim(1);
  if (query.size() != d) throw DimensionError("knn query has dim " + std::to_string(query.size()) + ", bank " +
                                              std::to_string(d));
  if (k == 0 || k > m) throw ParameterError("knn k must be in [1, " + std::to_string(m) + "]");

  auto rows = bank.features.data();
  std::vector<double> dist(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(rows[i * d + j]) - query[j];
      s += diff * diff;
    }
    dist[i] = s;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; });

  std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, summed distance)
  for (std::size_t i = 0; i < k; ++i) {
    auto& v = votes[bank.labels[order[i]]];
    v.first += 1;
    v.second += std::sqrt(dist[order[i]]);
  }
  int best = votes.begin()->first;
  auto best_vote = votes.begin()->second;
  for (const auto& [label, vote] : votes) {
    if (vote.first > best_vote.first || (vote.first == best_vote.first && vote.second < best_vote.second)) {
      best = label;
      best_vote = vote;
    }
  }
  return best;
}

void PrototypeMatrix::validate() const {
  require_matrix(weights, "prototype matrix");
  if (weights.dim(0) != classes.size()) throw DimensionError("prototype rows and class ids differ in count");
  const std::size_t d = weights.dim(1);
  auto w = weights.data();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    double n = 0.0;
    for (std::size_t j = 0; j < d; ++j) n += static_cast<double>(w[c * d + j]) * w[c * d + j];
    if (std::abs(std::sqrt(n) - 1.0) > 1e-5) throw ContractError("prototype rows must be L2-normalized");
  }
}

PrototypeMatrix build_prototypes(const Tensor& features, std::span<const int> labels) {
  require_matrix(features, "prototype features");
  if (features.dim(0) != labels.size()) throw DimensionError("prototype features and labels differ in count");
  if (labels.empty()) throw ParameterError("no features to build prototypes from");
  const std::size_t d = features.dim(1);
  std::set<int> ids(labels.begin(), labels.end());
  PrototypeMatrix p;
  p.classes.assign(ids.begin(), ids.end());
  p.weights = Tensor(Shape{p.classes.size(), d});
  auto out = p.weights.mutable_data();
  auto in = features.data();
  for (std::size_t c = 0; c < p.classes.size(); ++c) {
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == p.classes[c])
        for (std::size_t j = 0; j < d; ++j) acc[j] += in[i * d + j];
    double n = 0.0;
    for (double v : acc) n += v * v;
    n = std::sqrt(n);
    if (n == 0.0) throw DataError("class " + std::to_string(p.classes[c]) + " has a zero mean feature");
    for (std::size_t j = 0; j < d; ++j) out[c * d + j] = static_cast<float>(acc[j] / n);
  }
  return p;
}

int nearest_prototype(std::span<const float> feature, const PrototypeMatrix& prototypes) {
  prototypes.validate();
  const std::size_t d = prototypes.weights.dim(1);
  if (feature.size() != d) throw DimensionError("feature has dim " + std::to_string(feature.size()) +
                                                ", prototypes " + std::to_string(d));
  double n = 0.0;
  for (float v : feature) n += static_cast<double>(v) * v;
  n = std::sqrt(n);
  if (n == 0.0) n = 1.0;
  auto w = prototypes.weights.data();
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < prototypes.classes.size(); ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (feature[j] / n) * w[c * d + j];
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  return prototypes.classes[best];
}

int zeroshot_classify(const Tensor& class_token, const AdapterHead& head, const PrototypeMatrix& prototypes) {
  if (class_token.rank() != 1) throw DimensionError("zero-shot expects a single class token");
  if (class_token.numel() != head.in_dim())
    throw DimensionError("class token dim " + std::to_string(class_token.numel()) + " does not match head input " +
                         std::to_string(head.in_dim()));
  if (head.out_dim() != prototypes.weights.dim(1)) throw DimensionError("head output does not match prototype dim");
  NoGradScope no_grad;
  Tensor adapted = adapt_tokens(head, class_token);
  return nearest_prototype(adapted.data(), prototypes);
}

Tensor LinearProbe::apply(const Tensor& features) const {
  require_matrix(features, "probe input");
  if (features.dim(1) != weight.dim(0)) throw DimensionError("probe input dim does not match the probe");
  const auto m = static_cast<Eigen::Index>(features.dim(0));
  const auto d = static_cast<Eigen::Index>(weight.dim(0));
  const auto k = static_cast<Eigen::Index>(weight.dim(1));
  Eigen::Map<const Eigen::RowVectorXf> mu(mean.data().data(), d), is(inv_std.data().data(), d);
  RowMatrixF x = (as_matrix(features).rowwise() - mu).array().rowwise() * is.array();
  Tensor out(Shape{static_cast<std::size_t>(m), static_cast<std::size_t>(k)});
  MapF(out.mutable_data().data(), m, k) =
      (x * as_matrix(weight)).rowwise() + Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), k);
  return out;
}

std::vector<int> LinearProbe::predict_classes(const Tensor& features) const {
  if (mode != ProbeMode::Classify) throw ContractError("class predictions from a regression probe");
  Tensor logits = apply(features);
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  auto z = logits.data();
  std::vector<int> out(m);
  for (std::size_t i = 0; i < m; ++i)
    out[i] = static_cast<int>(std::max_element(z.begin() + i * k, z.begin() + (i + 1) * k) - (z.begin() + i * k));
  return out;
}

namespace {

std::vector<int> class_targets(const Tensor& targets, std::size_t rows) {
  if (targets.rank() != 1 || targets.numel() != rows)
    throw ContractError("classification targets must be a [M] tensor of class ids");
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const float v = targets[i];
    if (!(v >= 0.0f) || v != std::floor(v)) throw ContractError("classification targets must be non-negative integers");
    out[i] = static_cast<int>(v);
  }
  return out;
}

Tensor regression_targets(const Tensor& targets, std::size_t rows) {
  if (targets.rank() == 1 && targets.numel() == rows) return targets.view({rows, 1});
  if (targets.rank() == 2 && targets.dim(0) == rows) return targets;
  throw ContractError("regression targets must be [M] or [M, k]");
}

}  // namespace

LinearProbe train_linear_probe(const Tensor& features, const Tensor& targets, ProbeMode mode,
                               const ProbeConfig& config) {
  require_matrix(features, "probe features");
  const std::size_t m = features.dim(0), d = features.dim(1);
  if (m == 0) throw ParameterError("no rows to train the probe on");
  if (config.steps == 0 || config.batch_size == 0) throw ParameterError("probe steps and batch size must be positive");

  LinearProbe probe;
  probe.mode = mode;
  std::vector<int> labels;
  Tensor y;
  std::size_t k = 0;
  if (mode == ProbeMode::Classify) {
    labels = class_targets(targets, m);
    probe.num_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    k = probe.num_classes;
  } else {
    y = regression_targets(targets, m);
    k = y.dim(1);
  }

  probe.mean = Tensor(Shape{d});
  probe.inv_std = Tensor(Shape{d}, 1.0f);
  if (config.standardize) {
    auto x = features.data();
    auto mu = probe.mean.mutable_data();
    auto is = probe.inv_std.mutable_data();
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += x[i * d + j];
      const double mean = s / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) s2 += (x[i * d + j] - mean) * (x[i * d + j] - mean);
      mu[j] = static_cast<float>(mean);
      is[j] = static_cast<float>(1.0 / std::max(std::sqrt(s2 / static_cast<double>(m)), static_cast<double>(kStdFloor)));
    }
  }
  probe.weight = Tensor(Shape{d, k});
  probe.bias = Tensor(Shape{k});
  if (mode == ProbeMode::Regress) {
    // start from the mean target so the step budget goes into the slope
    auto b = probe.bias.mutable_data();
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += y.data()[i * k + c];
      b[c] = static_cast<float>(s / static_cast<double>(m));
    }
  }
  probe.weight.set_requires_grad();
  probe.bias.set_requires_grad();
  std::vector<Tensor> params{probe.weight, probe.bias};
  AdamState state = init_adam(params);

  const Eigen::Index D = static_cast<Eigen::Index>(d), K = static_cast<Eigen::Index>(k);
  Eigen::Map<const Eigen::RowVectorXf> mu(probe.mean.data().data(), D), is(probe.inv_std.data().data(), D);
  const std::size_t batch = std::min(config.batch_size, m);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = m;
  Rng rng(config.seed);
  RowMatrixF xb(batch, D), yb;
  auto x = features.data();

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == m) {
        for (std::size_t i = m - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        cursor = 0;
      }
      rows[b] = order[cursor++];
    }
    for (std::size_t b = 0; b < batch; ++b)
      xb.row(static_cast<Eigen::Index>(b)) =
          (Eigen::Map<const Eigen::RowVectorXf>(x.data() + rows[b] * d, D) - mu).array() * is.array();
    RowMatrixF z = (xb * as_matrix(probe.weight)).rowwise() +
                   Eigen::Map<const Eigen::RowVectorXf>(probe.bias.data().data(), K);
    // dz holds the gradient of the mean batch loss with respect to the outputs
    RowMatrixF dz(batch, K);
    if (mode == ProbeMode::Classify) {
      for (Eigen::Index b = 0; b < static_cast<Eigen::Index>(batch); ++b) {
        const float zmax = z.row(b).maxCoeff();
        Eigen::RowVectorXf e = (z.row(b).array() - zmax).exp().matrix();
        dz.row(b) = e / e.sum();
        dz(b, labels[rows[b]]) -= 1.0f;
      }
      dz /= static_cast<float>(batch);
    } else {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < k; ++c)
          dz(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) =
              z(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c)) - y.data()[rows[b] * k + c];
      dz /= static_cast<float>(batch * k);
    }
    MapF(probe.weight.grad_buffer().data(), D, K) = xb.transpose() * dz;
    Eigen::Map<Eigen::RowVectorXf>(probe.bias.grad_buffer().data(), K) = dz.colwise().sum();
    adamw_step(params, state, cosine_lr(step, config.steps, config.lr, config.warmup_fraction), config.optimizer);
  }
  probe.weight.clear_grad();
  probe.bias.clear_grad();
  probe.weight.set_requires_grad(false);
  probe.bias.set_requires_grad(false);
  return probe;
}

ClassMetrics class_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("prediction and truth differ in length");
  if (truth.empty()) throw ParameterError("no predictions to score");
  std::map<int, std::array<std::size_t, 3>> counts;  // intersection, predicted, truth
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == truth[i]) {
      ++hits;
      ++counts[truth[i]][0];
    }
    ++counts[predicted[i]][1];
    ++counts[truth[i]][2];
  }
  double iou = 0.0;
  for (const auto& [label, c] : counts) iou += static_cast<double>(c[0]) / static_cast<double>(c[1] + c[2] - c[0]);
  return {static_cast<double>(hits) / static_cast<double>(truth.size()), iou / static_cast<double>(counts.size())};
}

double rmse(const Tensor& predicted, const Tensor& truth) {
  if (predicted.numel() != truth.numel()) throw DimensionError("rmse inputs differ in size");
  if (truth.numel() == 0) throw ParameterError("rmse of nothing");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.numel(); ++i) {
    const double e = static_cast<double>(predicted[i]) - truth[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(truth.numel()));
}

ProbeResult linear_probe(const Tensor& train_x, const Tensor& train_y, const Tensor& test_x, const Tensor& test_y,
                         ProbeMode mode, const ProbeConfig& config) {
  require_matrix(test_x, "probe test features");
  ProbeResult r;
  r.probe = train_linear_probe(train_x, train_y, mode, config);
  if (mode == ProbeMode::Classify) {
    auto truth = class_targets(test_y, test_x.dim(0));
    auto pred = r.probe.predict_classes(test_x);
    r.classification = class_metrics(pred, truth);
  } else {
    r.rmse = rmse(r.probe.apply(test_x), regression_targets(test_y, test_x.dim(0)));
  }
  return r;
}

Tensor upsample_features(const DenseFeatures& f) {
  require_matrix(f.tokens, "dense features");
  if (f.tokens.dim(0) != f.grid.count()) throw DimensionError("token count does not match the grid");
  if (f.height == 0 || f.width == 0) throw ParameterError("dense features need a pixel size");
  const std::size_t d = f.tokens.dim(1), H = f.height, W = f.width, R = f.grid.rows, C = f.grid.cols;
  auto coord = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
    return n_out > 1 ? static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1) : 0.0;
  };
  Tensor out(Shape{H * W, d});
  auto o = out.mutable_data();
  auto t = f.tokens.data();
  for (std::size_t y = 0; y < H; ++y) {
    const double sy = coord(y, H, R);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), R - 1), y1 = std::min(y0 + 1, R - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double sx = coord(x, W, C);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), C - 1), x1 = std::min(x0 + 1, C - 1);
      const double wx = sx - static_cast<double>(x0);
      const float* a = &t[(y0 * C + x0) * d];
      const float* b = &t[(y0 * C + x1) * d];
      const float* c = &t[(y1 * C + x0) * d];
      const float* e = &t[(y1 * C + x1) * d];
      float* dst = &o[(y * W + x) * d];
      for (std::size_t j = 0; j < d; ++j)
        dst[j] = static_cast<float>((1 - wy) * ((1 - wx) * a[j] + wx * b[j]) + wy * ((1 - wx) * c[j] + wx * e[j]));
    }
  }
  return out;
}

std::vector<KeypointPair> match_keypoints(const Sample& source, const Sample& target) {
  std::vector<KeypointPair> out;
  for (const auto& s : source.keypoints)
    for (const auto& t : target.keypoints)
      if (s.id == t.id) out.push_back({s, t});
  return out;
}

PckResult pck_correspondence(const DenseFeatures& source, const DenseFeatures& target,
                             std::span<const KeypointPair> pairs, const BoundingBox& target_box, double threshold) {
  if (pairs.empty()) throw ParameterError("no keypoint pairs for correspondence");
  if (threshold < 0.0) throw ParameterError("PCK threshold must be non-negative");
  if (source.tokens.dim(1) != target.tokens.dim(1)) throw DimensionError("source and target features differ in dim");
  auto in_bounds = [](const Keypoint& k, const DenseFeatures& f) {
    return k.x >= 0.0f && k.y >= 0.0f && k.x <= static_cast<float>(f.width - 1) &&
           k.y <= static_cast<float>(f.height - 1);
  };
  for (const auto& p : pairs)
    if (!in_bounds(p.source, source) || !in_bounds(p.target, target))
      throw ContractError("keypoint outside the image");

  const std::size_t d = source.tokens.dim(1);
  const Tensor src = upsample_features(source);
  const Tensor tgt = upsample_features(target);
  const std::size_t n = target.height * target.width;
  std::vector<double> unit(n * d);
  auto t = tgt.data();
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(t[i * d + j]) * t[i * d + j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = norm > 0.0 ? t[i * d + j] / norm : 0.0;
  }

  const double tolerance = threshold * static_cast<double>(target_box.max_side());
  PckResult r;
  auto s = src.data();
  for (const auto& p : pairs) {
    const std::size_t sx = static_cast<std::size_t>(std::lround(p.source.x));
    const std::size_t sy = static_cast<std::size_t>(std::lround(p.source.y));
    const float* q = &s[(sy * source.width + sx) * d];
    double qn = 0.0;
    for (std::size_t j = 0; j < d; ++j) qn += static_cast<double>(q[j]) * q[j];
    qn = std::sqrt(qn);
    if (qn == 0.0) qn = 1.0;
    std::vector<double> qu(d);
    for (std::size_t j = 0; j < d; ++j) qu[j] = q[j] / qn;
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      double sim = 0.0;
      for (std::size_t j = 0; j < d; ++j) sim += qu[j] * unit[i * d + j];
      if (sim > best_sim) {
        best_sim = sim;
        best = i;
      }
    }
    const double px = static_cast<double>(best % target.width), py = static_cast<double>(best / target.width);
    const double dist = std::hypot(px - p.target.x, py - p.target.y);
    r.correct += dist <= tolerance;
    ++r.total;
  }
  return r;
}

PcaImage pca_rgb(const Tensor& tokens, GridSize grid) {
  require_matrix(tokens, "PCA tokens");
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (n < 3 || d < 3) throw ParameterError("PCA needs at least 3 tokens of dim at least 3");
  if (grid.count() != n) throw DimensionError("token count does not match the grid");

  const Eigen::MatrixXd x = as_matrix(tokens).cast<double>();
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("PCA eigendecomposition failed");

  PcaImage out;
  const Eigen::VectorXd values = solver.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
  double total = 0.0, top = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = std::max(values(i), 0.0);
    out.eigenvalues.push_back(v);
    total += v;
    if (i < 3) top += v;
  }
  out.explained = total > 0.0 ? top / total : 1.0;

  out.image = Tensor(Shape{grid.rows, grid.cols, 3});
  auto img = out.image.mutable_data();
  const double floor = 1e-12 * std::max(out.eigenvalues.front(), 1e-300);
  for (int c = 0; c < 3; ++c) {
    if (out.eigenvalues[static_cast<std::size_t>(c)] <= floor || out.eigenvalues.front() == 0.0) continue;
    Eigen::VectorXd axis = vectors.col(c);
    Eigen::Index arg;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    const Eigen::VectorXd proj = xc * axis;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (hi - lo <= 1e-12 * std::max(std::abs(hi), std::abs(lo))) continue;
    for (std::size_t i = 0; i < n; ++i)
      img[i * 3 + static_cast<std::size_t>(c)] = static_cast<float>((proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("pixmap images must be [H, W, 3]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  std::string bytes(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f)));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw FormatError(path.string() + " is not an 8-bit P6 pixmap");
  is.get();
  std::string bytes(w * h * 3, '\0');
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) throw TruncatedError(path.string() + " is truncated");
  Tensor out(Shape{h, w, 3});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < bytes.size(); ++i) o[i] = static_cast<unsigned char>(bytes[i]) / 255.0f;
  return out;
}

void validate_protocols(std::span<const std::string> protocols) {
  for (const auto& p : protocols) {
    if (std::find(kProtocols.begin(), kProtocols.end(), p) == kProtocols.end()) {
      std::string valid;
      for (const auto& k : kProtocols) valid += (valid.empty() ? "" : ", ") + k;
      throw ConfigError("unknown protocol '" + p + "' (valid: " + valid + ")");
    }
  }
}

std::string EvalSettings::canonical() const {
  std::ostringstream os;
  auto probe = [&os](const char* name, const ProbeConfig& p) {
    os << name << ".lr=" << format_double(p.lr) << "\n"
       << name << ".weight_decay=" << format_double(p.weight_decay) << "\n"
       << name << ".steps=" << p.steps << "\n"
       << name << ".batch_size=" << p.batch_size << "\n"
       << name << ".standardize=" << p.standardize << "\n";
  };
  os << "knn_k=" << knn_k << "\npck_threshold=" << format_double(pck_threshold)
     << "\ntest_fraction=" << format_double(test_fraction) << "\nresolution=" << resolution << "\nseed=" << seed
     << "\n";
  probe("segmentation", segmentation);
  probe("depth", depth);
  return os.str();
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string EvalReport::csv() const {
  std::string out = "protocol,metric,value,seed,config_hash\n";
  for (const auto& r : rows)
    out += r.protocol + "," + r.metric + "," + format_double(r.value) + "," + std::to_string(seed) + "," +
           hex64(config_hash) + "\n";
  return out;
}

std::string EvalReport::text() const {
  std::ostringstream os;
  os << "evaluation report (seed " << seed << ", config " << hex64(config_hash) << ")\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "  %-10s %-16s %.6f\n", r.protocol.c_str(), r.metric.c_str(), r.value);
    os << line;
  }
  return os.str();
}

void split_corpus(std::span<const Sample> corpus, double test_fraction, std::vector<Sample>& train,
                  std::vector<Sample>& test) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ParameterError("test fraction must be in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_class[corpus[i].class_label].push_back(i);
  std::vector<bool> held(corpus.size(), false);
  for (const auto& [label, idx] : by_class) {
    if (idx.size() < 2) throw DataError("class " + std::to_string(label) + " needs at least two images to split");
    auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(idx.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    for (std::size_t j = idx.size() - n_test; j < idx.size(); ++j) held[idx[j]] = true;
  }
  train.clear();
  test.clear();
  for (std::size_t i = 0; i < corpus.size(); ++i) (held[i] ? test : train).push_back(corpus[i]);
}

EncoderOutput encode_images(const EncoderParams& encoder, std::span<const Tensor> images, std::size_t resolution,
                            std::size_t chunk) {
  if (images.empty()) throw ParameterError("no images to encode");
  if (resolution == 0) resolution = encoder.config.image_size;
  NoGradScope no_grad;
  std::vector<Tensor> cls, patches;
  EncoderOutput out;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<Tensor> inputs;
    for (std::size_t i = start; i < end; ++i) inputs.push_back(prepare_input(images[i], resolution));
    EncoderOutput o = encode_batch(encoder, inputs);
    cls.push_back(o.class_token.view({end - start, encoder.config.dim}));
    patches.push_back(o.patch_tokens);
    out.grid = o.grid;
  }
  out.class_token = concat_rows(cls);
  out.patch_tokens = concat_rows(patches);
  out.batch = images.size();
  return out;
}

namespace {

// Per-pixel features of every image, [count*H*W, d].
Tensor pixel_features(const EncoderOutput& enc, std::span<const Sample> samples) {
  const std::size_t n = enc.grid.count(), d = enc.patch_tokens.dim(1);
  std::size_t rows = 0;
  for (const auto& s : samples) rows += s.image.dim(0) * s.image.dim(1);
  Tensor out(Shape{rows, d});
  auto o = out.mutable_data();
  std::size_t at = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), i * n);
    DenseFeatures f{take_rows(enc.patch_tokens, idx), enc.grid, samples[i].image.dim(0), samples[i].image.dim(1)};
    Tensor up = upsample_features(f);
    std::copy(up.data().begin(), up.data().end(), o.begin() + static_cast<std::ptrdiff_t>(at));
    at += up.numel();
  }
  return out;
}

Tensor dense_targets(std::span<const Sample> samples, bool depth) {
  std::vector<float> v;
  for (const auto& s : samples) {
    if (depth)
      v.insert(v.end(), s.depth.data().begin(), s.depth.data().end());
    else
      for (int l : s.dense_label) v.push_back(static_cast<float>(l));
  }
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

DenseFeatures dense_of(const EncoderOutput& enc, std::size_t i, const Sample& s) {
  const std::size_t n = enc.grid.count();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), i * n);
  return {take_rows(enc.patch_tokens, idx), enc.grid, s.image.dim(0), s.image.dim(1)};
}

}  // namespace

EvalReport run_protocols(const EncoderParams& encoder, std::span<const Sample> corpus,
                         std::span<const std::string> protocols, const EvalSettings& settings,
                         const TeacherBinding* zeroshot) {
  validate_protocols(protocols);
  EvalReport report;
  report.seed = settings.seed;
  std::string key = settings.canonical() + "protocols=";
  for (const auto& p : protocols) key += p + ";";
  report.config_hash = fnv1a(key);

  std::vector<Sample> train, test;
  split_corpus(corpus, settings.test_fraction, train, test);
  const auto train_images = images_of(train), test_images = images_of(test);
  const EncoderOutput tr = encode_images(encoder, train_images, settings.resolution);
  const EncoderOutput te = encode_images(encoder, test_images, settings.resolution);
  std::vector<int> train_labels, test_labels;
  for (const auto& s : train) train_labels.push_back(s.class_label);
  for (const auto& s : test) test_labels.push_back(s.class_label);

  for (const auto& protocol : protocols) {
    if (protocol == "knn") {
      FeatureBank bank{tr.class_token, train_labels, "encoder"};
      const std::size_t k = std::min(settings.knn_k, bank.size());
      std::size_t hits = 0;
      const std::size_t d = te.class_token.dim(1);
      for (std::size_t i = 0; i < test.size(); ++i)
        hits += knn_classify(bank, te.class_token.data().subspan(i * d, d), k) == test_labels[i];
      report.rows.push_back({"knn", "accuracy", static_cast<double>(hits) / static_cast<double>(test.size())});
    } else if (protocol == "zeroshot") {
      if (zeroshot == nullptr || !zeroshot->stats.calibrated())
        throw ConfigError("zero-shot needs a calibrated teacher binding with a class head");
      const EncoderOutput teacher_out = run_teacher(*zeroshot, train_images);
      Tensor normalized;
      {
        NoGradScope no_grad;
        normalized = normalize_features(teacher_out.class_token.view({train.size(), zeroshot->dim()}),
                                        zeroshot->stats.class_mean, zeroshot->stats.class_std);
      }
      const PrototypeMatrix protos = build_prototypes(normalized, train_labels);
      std::size_t hits = 0;
      const std::size_t d = te.class_token.dim(1);
      for (std::size_t i = 0; i < test.size(); ++i) {
        Tensor token(Shape{d}, std::vector<float>(te.class_token.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                                                  te.class_token.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
        hits += zeroshot_classify(token, zeroshot->class_head, protos) == test_labels[i];
      }
      report.rows.push_back({"zeroshot", "accuracy", static_cast<double>(hits) / static_cast<double>(test.size())});
    } else if (protocol == "seg") {
      ProbeConfig cfg = settings.segmentation;
      cfg.seed = derive_seed(settings.seed, 11);
      auto r = linear_probe(pixel_features(tr, train), dense_targets(train, false), pixel_features(te, test),
                            dense_targets(test, false), ProbeMode::Classify, cfg);
      report.rows.push_back({"seg", "miou", r.classification.mean_iou});
      report.rows.push_back({"seg", "pixel_accuracy", r.classification.accuracy});
    } else if (protocol == "depth") {
      ProbeConfig cfg = settings.depth;
      cfg.seed = derive_seed(settings.seed, 12);
      auto r = linear_probe(pixel_features(tr, train), dense_targets(train, true), pixel_features(te, test),
                            dense_targets(test, true), ProbeMode::Regress, cfg);
      report.rows.push_back({"depth", "rmse", r.rmse});
    } else if (protocol == "pck") {
      PckResult total;
      for (std::size_t i = 0; i + 1 < test.size(); ++i) {
        if (test[i].class_label != test[i + 1].class_label) continue;
        auto pairs = match_keypoints(test[i], test[i + 1]);
        if (pairs.empty()) continue;
        auto r = pck_correspondence(dense_of(te, i, test[i]), dense_of(te, i + 1, test[i + 1]), pairs,
                                    test[i + 1].bbox, settings.pck_threshold);
        total.correct += r.correct;
        total.total += r.total;
      }
      if (total.total == 0) throw DataError("no same-class image pairs for correspondence");
      report.rows.push_back({"pck", "pck", total.score()});
      report.rows.push_back({"pck", "keypoints", static_cast<double>(total.total)});
    }
  }
  return report;
}

}  // namespace eupe
