#include <doctest.h>

#include <cmath>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "eupe/error.hpp"
#include "eupe/ops.hpp"
#include "eupe/tape.hpp"

using namespace eupe;
using eupe::testing::bicubic_oracle;
using eupe::testing::random_tensor;

namespace {

// Naive triple loop, double accumulation.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += double(a.data()[i * k + t]) * b.data()[t * n + j];
      out.mutable_data()[i * n + j] = float(acc);
    }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace

TEST_CASE("matmul") {
  auto id = Tensor::matrix({{1, 0}, {0, 1}});
  auto b = Tensor::matrix({{3, 4}, {5, 6}});
  CHECK(bitwise_equal(matmul(id, b), b));
  CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item() == 11.0f);

  Rng rng(7);
  auto x = random_tensor({5, 7}, rng);
  auto y = random_tensor({7, 3}, rng);
  CHECK(max_abs_diff(matmul(x, y), matmul_oracle(x, y)) <= 1e-6);

  try {
    matmul(x, x);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[5,7]") != std::string::npos);
  }
}

TEST_CASE("layer_norm") {
  Tensor ones(Shape{3}, 1.0f), zeros(Shape{3}, 0.0f);
  auto y = layer_norm(Tensor::from({1, 1, 1}), ones, zeros);
  for (float v : y.data()) CHECK(v == 0.0f);

  auto pair = layer_norm(Tensor::from({-1, 1}), Tensor(Shape{2}, 1.0f), Tensor(Shape{2}, 0.0f));
  CHECK(pair[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(pair[1] == doctest::Approx(1.0).epsilon(1e-4));

  Rng rng(3);
  auto x = random_tensor({4, 16}, rng, 3.0f);
  auto out = layer_norm(x, Tensor(Shape{16}, 1.0f), Tensor(Shape{16}, 0.0f));
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mu += out[r * 16 + c];
    mu /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (out[r * 16 + c] - mu) * (out[r * 16 + c] - mu);
    CHECK(std::abs(mu) <= 1e-5);
    CHECK(std::abs(std::sqrt(var / 16) - 1.0) <= 1e-3);
  }
  CHECK_THROWS_AS(layer_norm(x, Tensor(Shape{16}, 1.0f), Tensor(Shape{16}, 0.0f), 0.0f), ParameterError);
}

TEST_CASE("gelu") {
  auto y = gelu(Tensor::from({0.0f, 6.0f, -6.0f}));
  CHECK(y[0] == 0.0f);
  CHECK(std::abs(y[1] - 6.0f) <= 1e-3f);
  CHECK(std::abs(y[2]) < 1e-3f);
}

TEST_CASE("softmax") {
  auto u = softmax(Tensor::from({0, 0, 0}), 0);
  for (float v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  auto s = softmax(Tensor::from({1000, 0}), 0);
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == doctest::Approx(0.0));
  CHECK(all_finite(s));

  Rng rng(11);
  auto x = random_tensor({3, 5}, rng, 4.0f);
  auto p = softmax(x, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(p[r * 5 + c] >= 0.0f);
      acc += p[r * 5 + c];
    }
    CHECK(std::abs(acc - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(softmax(x, 2), ParameterError);
}

TEST_CASE("cosine_loss") {
  auto a = Tensor::matrix({{1, 2, 3}, {-1, 0.5f, 2}});
  CHECK(cosine_loss(a, a).item() == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(cosine_loss(a, scale(a, -1.0f)).item() == doctest::Approx(2.0));
  CHECK(cosine_loss(Tensor::from({1, 0}), Tensor::from({0, 1})).item() == doctest::Approx(1.0));
  // zero rows stay finite
  auto z = Tensor(Shape{2, 3}, 0.0f);
  CHECK(std::isfinite(cosine_loss(z, a).item()));

  SUBCASE("positive per-row scaling invariance") {
    Rng rng(5);
    auto p = random_tensor({6, 8}, rng);
    auto t = random_tensor({6, 8}, rng);
    Tensor scaled = p.clone();
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 8; ++c) scaled.mutable_data()[r * 8 + c] *= float(0.1 + 3.0 * r);
    CHECK(std::abs(cosine_loss(p, t).item() - cosine_loss(scaled, t).item()) <= 1e-5);
    CHECK(std::abs(cosine_loss(p, t).item() - cosine_loss(p, scale(t, 7.5f)).item()) <= 1e-5);
  }
}

TEST_CASE("smooth_l1_loss") {
  auto a = Tensor::from({0.3f, -2.0f});
  CHECK(smooth_l1_loss(a, a).item() == 0.0f);
  CHECK(smooth_l1_loss(Tensor::from({0.5f}), Tensor::from({0.0f})).item() == doctest::Approx(0.125));
  CHECK(smooth_l1_loss(Tensor::from({2.0f}), Tensor::from({0.0f})).item() == doctest::Approx(1.5));
  CHECK_THROWS_AS(smooth_l1_loss(a, a, 0.0f), ParameterError);

  SUBCASE("value and slope are continuous at |e| = beta") {
    const float beta = 1.0f;
    auto value = [&](float e) { return double(smooth_l1_loss(Tensor::from({e}), Tensor::from({0.0f}), beta).item()); };
    auto slope = [&](float e) {
      Tensor p = Tensor::from({e});
      p.set_requires_grad();
      GradientTape tape;
      TapeScope s(tape);
      tape.backward(smooth_l1_loss(p, Tensor::from({0.0f}), beta));
      return double(p.grad()[0]);
    };
    for (float sign : {1.0f, -1.0f}) {
      const float lo = sign * (beta - 1e-4f), hi = sign * (beta + 1e-4f);
      // the jump across a 2e-4 window must be no more than slope * window
      CHECK(std::abs(value(lo) - value(hi)) <= 2.1e-4);
      CHECK(std::abs(slope(lo) - slope(hi)) <= 2e-4);
    }
  }
}

TEST_CASE("bicubic_resize") {
  Rng rng(21);
  auto g = random_tensor({4, 5, 3}, rng);
  CHECK(max_abs_diff(bicubic_resize(g, 4, 5), g) <= 1e-6);

  Tensor constant(Shape{3, 4, 2}, 0.37f);
  for (auto [oh, ow] : {std::pair{7, 2}, {1, 1}, {9, 9}, {2, 5}}) {
    auto r = bicubic_resize(constant, oh, ow);
    for (float v : r.data()) CHECK(std::abs(v - 0.37f) <= 1e-5f);
  }

  auto small = random_tensor({4, 4, 2}, rng);
  CHECK(max_abs_diff(bicubic_resize(small, 7, 7), bicubic_oracle(small, 7, 7)) <= 1e-5);
  CHECK(max_abs_diff(bicubic_resize(small, 3, 2), bicubic_oracle(small, 3, 2)) <= 1e-5);

  CHECK_THROWS_AS(bicubic_resize(Tensor(Shape{1, 4, 2}), 3, 3), DimensionError);

  SUBCASE("batched resize matches per-item resize") {
    auto batch = random_tensor({2, 3, 3, 2}, rng);
    auto out = bicubic_resize(batch, 5, 4);
    for (std::size_t b = 0; b < 2; ++b) {
      Tensor item(Shape{3, 3, 2}, std::vector<float>(batch.data().begin() + b * 18, batch.data().begin() + (b + 1) * 18));
      auto r = bicubic_resize(item, 5, 4);
      for (std::size_t i = 0; i < r.numel(); ++i) CHECK(out[b * r.numel() + i] == r[i]);
    }
  }
}

TEST_CASE("backward") {
  SUBCASE("sum") {
    Tensor x = Tensor::from({1, 2, 3});
    x.set_requires_grad();
    GradientTape tape;
    TapeScope scope(tape);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("square") {
    Tensor x = Tensor::from({2});
    x.set_requires_grad();
    GradientTape tape;
    TapeScope scope(tape);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 4.0f);
  }
  SUBCASE("reused tensor accumulates") {
    Tensor x = Tensor::from({3});
    x.set_requires_grad();
    GradientTape tape;
    TapeScope scope(tape);
    backward(add(sum(x), sum(scale(x, 2.0f))));
    CHECK(x.grad()[0] == 3.0f);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tensor x = Tensor::from({1, 2});
    x.set_requires_grad();
    GradientTape tape;
    TapeScope scope(tape);
    auto y = scale(x, 2.0f);
    CHECK_THROWS_AS(backward(y), ContractError);
  }
  SUBCASE("empty tape is a no-op") {
    Tensor x = Tensor::from({1});
    x.set_requires_grad();
    GradientTape tape;
    tape.backward(x);
    CHECK_FALSE(x.has_grad());
  }
  SUBCASE("no recording without requires_grad or outside a tape") {
    GradientTape tape;
    {
      TapeScope scope(tape);
      (void)add(Tensor::from({1}), Tensor::from({2}));
    }
    CHECK(tape.empty());
    Tensor x = Tensor::from({1});
    x.set_requires_grad();
    (void)scale(x, 2.0f);
    CHECK(tape.empty());
  }
  SUBCASE("gradients are bitwise deterministic") {
    auto run = [] {
      Rng rng(99);
      Tensor qkv = random_tensor({8, 12}, rng);
      qkv.set_requires_grad();
      GradientTape tape;
      TapeScope scope(tape);
      auto o = multi_head_attention(qkv, 2, 2);
      tape.backward(sum(gelu(o)));
      return std::vector<float>(qkv.grad().begin(), qkv.grad().end());
    };
    CHECK(run() == run());
  }
}

TEST_CASE("finite-difference agreement across ops") {
  for (const auto& c : eupe::testing::gradient_cases()) {
    CAPTURE(c.name);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(1000 + seed);
      auto res = eupe::testing::gradcheck(c.fn, c.make_inputs(rng), c.wrt, seed);
      CHECK(res.max_rel_error <= 1e-2);
    }
  }
}

TEST_CASE("outputs stay finite") {
  Rng rng(4);
  auto x = random_tensor({4, 6}, rng, 50.0f);
  CHECK(all_finite(softmax(x, 1)));
  CHECK(all_finite(gelu(x)));
  CHECK(all_finite(layer_norm(x, Tensor(Shape{6}, 1.0f), Tensor(Shape{6}, 0.0f))));
  CHECK(all_finite(multi_head_attention(random_tensor({4, 12}, rng, 30.0f), 1, 2)));
}
