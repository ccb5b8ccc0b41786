#include "doctest.h"

#include <cmath>
#include <vector>

#include "lqseg/tensor.hpp"

using namespace lqseg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(d));
}

// Weighted sum against fixed pseudo-random coefficients, so gradient checks
// see a non-uniform upstream gradient.
Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<double> w(static_cast<std::size_t>(t.numel()));
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  Tensor wc = Tensor::from_data(t.shape(), std::move(w));
  return sum(mul(t, wc));
}

}  // namespace

TEST_CASE("matmul identity and hand oracle") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, a);
  CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

  Tensor b = Tensor::from_data({2, 1}, {5, 6});
  Tensor r2 = matmul(a, b);
  CHECK(r2.values() == std::vector<double>{17, 39});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(11);
  Tensor b = random_tensor({2, 3}, rng);
  Tensor a0 = random_tensor({2, 2}, rng);
  double err = finite_diff_check(
      [&](const Tensor& a) { return weighted_sum(matmul(a, b)); }, a0, 1e-5);
  CHECK(err < 1e-7);
  Tensor b0 = random_tensor({2, 3}, rng);
  Tensor a1 = random_tensor({4, 2}, rng);
  err = finite_diff_check(
      [&](const Tensor& b2) { return weighted_sum(matmul(a1, b2)); }, b0, 1e-5);
  CHECK(err < 1e-7);
}

TEST_CASE("softmax symmetry, stability and reference values") {
  Tensor u = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(u.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Tensor s = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(std::isfinite(s.data()[0]));
  CHECK(s.data()[0] == doctest::Approx(1.0));
  CHECK(s.data()[1] == doctest::Approx(0.0));

  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  Tensor y = softmax(x, 0);
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e1 + e2 + e3;
  CHECK(y.data()[0] == doctest::Approx(e1 / z).epsilon(1e-14));
  CHECK(y.data()[1] == doctest::Approx(e2 / z).epsilon(1e-14));
  CHECK(y.data()[2] == doctest::Approx(e3 / z).epsilon(1e-14));
  double rowsum = y.data()[0] + y.data()[1] + y.data()[2];
  CHECK(std::abs(rowsum - 1.0) < 1e-12);
}

TEST_CASE("softmax rows are probability vectors on random input") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 7}, rng, -4.0, 4.0);
    Tensor y = softmax(x, 1);
    for (int i = 0; i < 5; ++i) {
      double acc = 0.0;
      for (int j = 0; j < 7; ++j) {
        const double v = y.data()[i * 7 + j];
        CHECK(v >= 0.0);
        acc += v;
      }
      CHECK(std::abs(acc - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("conv2d identity kernel reproduces input") {
  Rng rng(3);
  Tensor x = random_tensor({2, 4, 4}, rng);
  // 1x1 kernel selecting each input channel onto the same output channel.
  Tensor w = Tensor::from_data({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("conv2d one-hot image against sliding-window oracle") {
  Tensor x = Tensor::zeros({1, 5, 5});
  x.data()[2 * 5 + 2] = 1.0;  // hot pixel at (2,2)
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, w, 1, 1);
  REQUIRE(y.shape() == std::vector<int>{1, 5, 5});
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) {
      const double expected = (std::abs(r - 2) <= 1 && std::abs(c - 2) <= 1) ? 1.0 : 0.0;
      CHECK(y.data()[r * 5 + c] == doctest::Approx(expected));
    }
}

TEST_CASE("conv2d stride-2 output shape") {
  Tensor x = Tensor::zeros({1, 8, 8});
  Tensor w = Tensor::zeros({3, 1, 3, 3});
  Tensor y = conv2d(x, w, 2, 1);
  CHECK(y.shape() == std::vector<int>{3, 4, 4});
}

TEST_CASE("conv2d kernel larger than padded input errors") {
  Tensor x = Tensor::zeros({1, 2, 2});
  Tensor w = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x, w, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(17);
  Tensor w = random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor x0 = random_tensor({2, 5, 5}, rng);
  double err = finite_diff_check(
      [&](const Tensor& x) { return weighted_sum(conv2d(x, w, 2, 1)); }, x0, 1e-5);
  CHECK(err < 1e-6);
  Tensor x1 = random_tensor({2, 5, 5}, rng);
  Tensor w0 = random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
  err = finite_diff_check(
      [&](const Tensor& w2) { return weighted_sum(conv2d(x1, w2, 1, 1)); }, w0, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("resize_bilinear preserves constants") {
  Tensor x = Tensor::full({2, 3, 3}, 0.7);
  for (auto [h, w] : {std::pair{7, 5}, std::pair{2, 2}, std::pair{12, 1}}) {
    Tensor y = resize_bilinear(x, h, w);
    CHECK(y.shape() == std::vector<int>{2, h, w});
    for (std::int64_t i = 0; i < y.numel(); ++i)
      CHECK(y.data()[i] == doctest::Approx(0.7).epsilon(1e-15));
  }
}

TEST_CASE("resize_bilinear monotone along widened axis") {
  Tensor x = Tensor::from_data({1, 2, 2}, {0, 1, 0, 1});
  Tensor y = resize_bilinear(x, 2, 4);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c + 1 < 4; ++c)
      CHECK(y.data()[r * 4 + c] <= y.data()[r * 4 + c + 1] + 1e-15);
}

TEST_CASE("resize_bilinear 4x4 ramp to 2x2 equals hand-evaluated weights") {
  // align_corners=false, scale 2: each output pixel is the mean of a 2x2 block.
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
  Tensor x = Tensor::from_data({1, 4, 4}, ramp);
  Tensor y = resize_bilinear(x, 2, 2);
  CHECK(y.data()[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(y.data()[1] == doctest::Approx((2 + 3 + 6 + 7) / 4.0));
  CHECK(y.data()[2] == doctest::Approx((8 + 9 + 12 + 13) / 4.0));
  CHECK(y.data()[3] == doctest::Approx((10 + 11 + 14 + 15) / 4.0));
}

TEST_CASE("resize_bilinear gradient matches finite differences") {
  Rng rng(29);
  Tensor x0 = random_tensor({2, 4, 5}, rng);
  double err = finite_diff_check(
      [&](const Tensor& x) { return weighted_sum(resize_bilinear(x, 7, 3)); }, x0, 1e-5);
  CHECK(err < 1e-7);
}

TEST_CASE("backward on sum gives all-ones gradient") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor loss = sum(x);
  backward(loss);
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));
}

TEST_CASE("backward on sum of squares gives 2x") {
  Tensor x = Tensor::from_data({4}, {1, -2, 0.5, 3}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]));
}

TEST_CASE("backward accumulates over two consumers") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor a = mul_scalar(x, 2.0);
  Tensor b = mul_scalar(x, 3.0);
  Tensor loss = sum(add(a, b));
  backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(5.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = mul_scalar(x, 2.0);
  CHECK_THROWS_AS(backward(y), ContractError);
  Graph::current().clear();
}

TEST_CASE("backward rejects loss off the recorded graph") {
  Tensor x = Tensor::scalar(1.0, true);
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("graph is freed after backward") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor loss = sum(mul(x, x));
  CHECK(Graph::current().size() > 0);
  backward(loss);
  CHECK(Graph::current().size() == 0);
}

TEST_CASE("finite_diff_check on linear function is near exact") {
  Rng rng(5);
  Tensor x = random_tensor({3, 3}, rng);
  double err = finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-5);
  CHECK(err < 1e-10);
}

TEST_CASE("finite_diff_check on softmax cross-entropy") {
  Rng rng(41);
  Tensor x0 = random_tensor({4, 6}, rng);
  // targets: one-hot rows
  Tensor tgt = Tensor::zeros({4, 6});
  for (int i = 0; i < 4; ++i) tgt.data()[i * 6 + (i + 1) % 6] = 1.0;
  auto f = [&](const Tensor& logits) {
    Tensor p = softmax(logits, 1);
    return mul_scalar(sum(mul(tgt, log_clamped(p))), -1.0);
  };
  CHECK(finite_diff_check(f, x0, 1e-5) < 1e-5);
}

TEST_CASE("gradients of remaining ops match finite differences") {
  Rng rng(59);
  auto check = [&](const char* name, const ScalarFn& f, const Tensor& x,
                   double tol = 1e-6) {
    INFO(name);
    CHECK(finite_diff_check(f, x, 1e-5) < tol);
  };

  Tensor x = random_tensor({3, 4}, rng);
  Tensor other = random_tensor({3, 4}, rng);
  check("add", [&](const Tensor& t) { return weighted_sum(add(t, other)); }, x);
  check("sub", [&](const Tensor& t) { return weighted_sum(sub(other, t)); }, x);
  check("mul", [&](const Tensor& t) { return weighted_sum(mul(t, other)); }, x);
  check("add_scalar", [&](const Tensor& t) { return weighted_sum(add_scalar(t, 1.7)); }, x);
  check("mul_scalar", [&](const Tensor& t) { return weighted_sum(mul_scalar(t, -2.2)); }, x);
  check("transpose", [&](const Tensor& t) { return weighted_sum(transpose(t)); }, x);
  check("reshape", [&](const Tensor& t) { return weighted_sum(reshape(t, {4, 3})); }, x);
  check("mean", [&](const Tensor& t) { return mean(t); }, x);
  check("row_sums", [&](const Tensor& t) { return weighted_sum(row_sums(t)); }, x);
  check("sigmoid", [&](const Tensor& t) { return weighted_sum(sigmoid(t)); }, x);
  check("softmax0", [&](const Tensor& t) { return weighted_sum(softmax(t, 0)); }, x);
  check("softmax1", [&](const Tensor& t) { return weighted_sum(softmax(t, 1)); }, x);
  check("take_rows",
        [&](const Tensor& t) { return weighted_sum(take_rows(t, {2, 0, 2})); }, x);

  // relu needs inputs away from the kink
  Tensor xr = random_tensor({3, 4}, rng);
  for (std::int64_t i = 0; i < xr.numel(); ++i)
    if (std::abs(xr.data()[i]) < 1e-2) xr.data()[i] = 0.05;
  check("relu", [&](const Tensor& t) { return weighted_sum(relu(t)); }, xr);

  // positive-domain ops
  Tensor xp = random_tensor({3, 4}, rng, 0.2, 2.0);
  check("log_clamped", [&](const Tensor& t) { return weighted_sum(log_clamped(t)); }, xp);
  check("pow2", [&](const Tensor& t) { return weighted_sum(pow_scalar(t, 2.0)); }, xp);
  check("pow0.5", [&](const Tensor& t) { return weighted_sum(pow_scalar(t, 0.5)); }, xp);
  check("reciprocal", [&](const Tensor& t) { return weighted_sum(reciprocal(t)); }, xp);

  Tensor d = random_tensor({3}, rng, 0.5, 2.0);
  check("div_rowwise",
        [&](const Tensor& t) { return weighted_sum(div_rowwise(t, d)); }, x);
  Tensor num = random_tensor({3, 4}, rng);
  check("div_rowwise_denom",
        [&](const Tensor& t) { return weighted_sum(div_rowwise(num, t)); }, d);

  Tensor v = random_tensor({4}, rng);
  check("add_rowvec",
        [&](const Tensor& t) { return weighted_sum(add_rowvec(t, v)); }, x);
  check("add_rowvec_v",
        [&](const Tensor& t) { return weighted_sum(add_rowvec(x, t)); }, v);

  Tensor img = random_tensor({2, 3, 3}, rng);
  Tensor cv = random_tensor({2}, rng);
  check("add_chanvec",
        [&](const Tensor& t) { return weighted_sum(add_chanvec(t, cv)); }, img);
  check("add_chanvec_v",
        [&](const Tensor& t) { return weighted_sum(add_chanvec(img, t)); }, cv);

  Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
  Tensor offs = random_tensor({4}, rng);
  check("layer_norm_x",
        [&](const Tensor& t) { return weighted_sum(layer_norm_rows(t, gain, offs)); }, x,
        1e-5);
  check("layer_norm_gain",
        [&](const Tensor& t) { return weighted_sum(layer_norm_rows(x, t, offs)); }, gain);
  check("layer_norm_offset",
        [&](const Tensor& t) { return weighted_sum(layer_norm_rows(x, gain, t)); }, offs);

  Tensor part = random_tensor({2, 2, 2}, rng);
  check("concat", [&](const Tensor& t) {
    return weighted_sum(concat({t, part}, 0));
  }, random_tensor({3, 2, 2}, rng));
}

TEST_CASE("forward ops are deterministic") {
  Rng rng(71);
  Tensor x = random_tensor({3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor a = conv2d(x, w, 1, 1);
  Tensor b = conv2d(x, w, 1, 1);
  CHECK(a.values() == b.values());
  Tensor s1 = softmax(reshape(a, {4, 36}), 1);
  Tensor s2 = softmax(reshape(a, {4, 36}), 1);
  CHECK(s1.values() == s2.values());
}

TEST_CASE("forward ops keep finite values on bounded input") {
  Rng rng(83);
  Tensor x = random_tensor({2, 8, 8}, rng, -2.0, 2.0);
  Tensor w = random_tensor({2, 2, 3, 3}, rng, -2.0, 2.0);
  Tensor y = conv2d(x, w, 1, 1);
  Tensor z = softmax(reshape(y, {2, 64}), 1);
  Tensor s = sigmoid(mul_scalar(z, 100.0));
  for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(std::isfinite(s.data()[i]));
}

TEST_CASE("composite pipeline gradient check") {
  // conv -> relu -> resize -> matmul-as-mask -> softmax loss, all chained.
  Rng rng(97);
  Tensor w1 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor q = random_tensor({4, 3}, rng);
  Tensor x0 = random_tensor({2, 6, 6}, rng);
  auto f = [&](const Tensor& x) {
    Tensor feat = relu(conv2d(x, w1, 2, 1));          // 3x3x3
    Tensor up = resize_bilinear(feat, 4, 4);          // 3x4x4
    Tensor flat = reshape(up, {3, 16});
    Tensor masks = matmul(q, flat);                   // 4x16
    Tensor probs = softmax(masks, 1);
    return weighted_sum(log_clamped(probs, 1e-12));
  };
  CHECK(finite_diff_check(f, x0, 1e-5) < 1e-4);
}
