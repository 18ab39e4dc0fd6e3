#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "capsamc/layers.hpp"
#include "capsamc/optimizer.hpp"
#include "gradcheck.hpp"
#include "testutil.hpp"

using namespace capsamc;
using testutil::random_tensor;

TEST_CASE("valid output length") {
  CHECK(valid_output_length(32768, 22, 9) == 3639);
  // Enumerate window starts directly.
  std::size_t windows = 0;
  for (std::size_t start = 0; start + 22 <= 32768; start += 9) ++windows;
  CHECK(windows == 3639);
  CHECK(valid_output_length(62, 8, 1) == 55);
  CHECK_THROWS_AS(valid_output_length(4, 5, 1), ShapeError);
}

TEST_CASE("conv1d identity kernel") {
  Rng rng(1);
  auto x = random_tensor(Shape{1, 17}, rng);
  Tensor<double> k(Shape{1, 1, 1}, 1.0), b(Shape{1});
  CHECK(conv1d(x, k, b, 1) == x);
}

TEST_CASE("conv1d matches the naive oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t cin = 1 + rng.uniform_int(0, 3), cout = 1 + rng.uniform_int(0, 3);
    const std::size_t kw = 1 + rng.uniform_int(0, 6), stride = 1 + rng.uniform_int(0, 4);
    const std::size_t len = kw + rng.uniform_int(0, 40), batch = 1 + rng.uniform_int(0, 2);
    auto x = random_tensor(Shape{batch, cin, len}, rng);
    auto k = random_tensor(Shape{cout, cin, kw}, rng);
    auto b = random_tensor(Shape{cout}, rng);
    auto got = conv1d(x, k, b, stride);
    auto want = testutil::naive_conv(x, k, b, stride);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
  }
}

TEST_CASE("conv1d 2x50 example and rank-2 input") {
  Rng rng(3);
  auto x = random_tensor(Shape{1, 2, 50}, rng);
  auto k = random_tensor(Shape{3, 2, 5}, rng);
  auto b = random_tensor(Shape{3}, rng);
  auto want = testutil::naive_conv(x, k, b, 3);
  auto got = conv1d(x.reshaped({2, 50}), k, b, 3);
  REQUIRE(got.shape() == Shape{3, 16});
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
}

TEST_CASE("conv1d is linear without bias") {
  Rng rng(4);
  auto x = random_tensor(Shape{2, 3, 30}, rng);
  auto y = random_tensor(Shape{2, 3, 30}, rng);
  auto k = random_tensor(Shape{4, 3, 4}, rng);
  Tensor<double> b(Shape{4});
  const double a = 1.7, c = -0.6;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + c * y[i];
  auto lhs = conv1d(mix, k, b, 2);
  auto fx = conv1d(x, k, b, 2), fy = conv1d(y, k, b, 2);
  for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (a * fx[i] + c * fy[i])) < 1e-6);
}

TEST_CASE("conv1d rejects mismatched shapes") {
  Tensor<double> x(Shape{1, 2, 10}), k(Shape{1, 3, 2}), b(Shape{1});
  CHECK_THROWS_AS(conv1d(x, k, b, 1), ShapeError);
  Tensor<double> k2(Shape{1, 2, 11});
  CHECK_THROWS_AS(conv1d(x, k2, b, 1), ShapeError);
  Tensor<double> k3(Shape{1, 2, 2}), b3(Shape{2});
  CHECK_THROWS_AS(conv1d(x, k3, b3, 1), ShapeError);
}

TEST_CASE("batchnorm train mode normalizes") {
  Rng rng(5);
  auto x = random_tensor(Shape{5, 3, 40}, rng, -3.0, 7.0);
  Tensor<double> gamma(Shape{3}, 1.0), beta(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0);
  auto y = batchnorm(x, gamma, beta, Mode::kTrain, rm, rv);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t t = 0; t < 40; ++t) mean += y.at(n, c, t);
    mean /= 200.0;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t t = 0; t < 40; ++t) sq += (y.at(n, c, t) - mean) * (y.at(n, c, t) - mean);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(sq / 200.0 - 1.0) < 1e-5);
  }
  // Running statistics moved towards the batch statistics.
  CHECK(rm[0] != 0.0);
}

TEST_CASE("batchnorm constant channel yields beta") {
  Tensor<double> x(Shape{4, 2, 5}, 3.25);
  Tensor<double> gamma(Shape{2}, 2.0), beta(Shape{2}, std::vector<double>{0.5, -1.5});
  Tensor<double> rm(Shape{2}), rv(Shape{2}, 1.0);
  auto y = batchnorm(x, gamma, beta, Mode::kTrain, rm, rv);
  REQUIRE(y.all_finite());
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t t = 0; t < 5; ++t) {
      CHECK(y.at(n, 0, t) == 0.5);
      CHECK(y.at(n, 1, t) == -1.5);
    }
}

TEST_CASE("batchnorm inference uses running statistics") {
  Tensor<double> x(Shape{1, 1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  Tensor<double> gamma(Shape{1}, 2.0), beta(Shape{1}, 1.0);
  Tensor<double> rm(Shape{1}, 2.0), rv(Shape{1}, 4.0 - 1e-5);
  auto y = batchnorm(x, gamma, beta, Mode::kInference, rm, rv);
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(y[1] == doctest::Approx(1.0));
  CHECK(y[2] == doctest::Approx(2.0));
  CHECK(rm[0] == 2.0);
}

TEST_CASE("activations") {
  Tensor<double> x(Shape{3}, std::vector<double>{0.0, -3.5, 3.5});
  auto t = activation(x, Activation::kTanh);
  auto r = activation(x, Activation::kRelu);
  CHECK(t[0] == 0.0);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 3.5);
  CHECK(t[2] == doctest::Approx(std::tanh(3.5)));
}

TEST_CASE("avgpool1d") {
  Tensor<double> c(Shape{2, 62}, 1.25);
  auto y = avgpool1d(c, 8, 1);
  CHECK(y.shape() == Shape{2, 55});
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(1.25));
  Rng rng(6);
  auto x = random_tensor(Shape{3, 9}, rng);
  CHECK(avgpool1d(x, 1, 1) == x);
  CHECK_THROWS_AS(avgpool1d(x, 10, 1), ShapeError);
}

TEST_CASE("fully connected") {
  Rng rng(7);
  auto x = random_tensor(Shape{6}, rng);
  Tensor<double> eye(Shape{6, 6}), b(Shape{6});
  for (std::size_t i = 0; i < 6; ++i) eye.at(i, i) = 1.0;
  CHECK(fully_connected(x, eye, b) == x);
  Tensor<double> branch(Shape{2, 64, 55}, 0.01), w(Shape{32, 3520}, 0.01), bias(Shape{32});
  CHECK(fully_connected(branch, w, bias).shape() == Shape{2, 32});
  Tensor<double> bad(Shape{32, 3519});
  CHECK_THROWS_AS(fully_connected(branch, bad, bias), ShapeError);
}

TEST_CASE("depth concat") {
  std::vector<Tensor<double>> parts;
  for (int i = 1; i <= 8; ++i) parts.emplace_back(Shape{1}, static_cast<double>(i));
  auto out = depth_concat<double>(parts, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(out[i] == static_cast<double>(i + 1));
  std::swap(parts[1], parts[6]);
  auto swapped = depth_concat<double>(parts, 8);
  CHECK(swapped[1] == 7.0);
  CHECK(swapped[6] == 2.0);
  CHECK_THROWS_AS(depth_concat<double>(std::span(parts).first(7), 8), ShapeError);

  Tensor<double> e3(Shape{1, 8});
  e3[3] = 1.0;
  auto routed = depth_concat_backward(e3);
  REQUIRE(routed.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(routed[i][0] == (i == 3 ? 1.0 : 0.0));
}

TEST_CASE("softmax") {
  Tensor<double> zeros(Shape{8});
  auto p = softmax(zeros);
  for (std::size_t i = 0; i < 8; ++i) CHECK(p[i] == 0.125);

  Tensor<double> n(Shape{8});
  std::iota(n.data().begin(), n.data().end(), 1.0);
  auto q = softmax(n);
  long double denom = 0.0L;
  for (int j = 1; j <= 8; ++j) denom += std::exp(static_cast<long double>(j));
  double sum = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const long double want = std::exp(static_cast<long double>(i + 1)) / denom;
    CHECK(std::abs(static_cast<long double>(q[i]) - want) < 1e-15L);
    sum += q[i];
  }
  CHECK(std::abs(sum - 1.0) < 1e-9);

  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto logits = random_tensor(Shape{3, 8}, rng, -50.0, 50.0);
    const double shift = rng.uniform(-1e3, 1e3);
    Tensor<double> shifted(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) shifted[i] = logits[i] + shift;
    auto a = softmax(logits), b = softmax(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(a.at(r, i) >= 0.0);
        CHECK(a.at(r, i) <= 1.0);
        CHECK(std::abs(a.at(r, i) - b.at(r, i)) < 1e-9);
        s += a.at(r, i);
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  Tensor<double> huge(Shape{2}, std::vector<double>{1e300, -1e300});
  CHECK(softmax(huge).all_finite());
}

TEST_CASE("cross entropy") {
  Tensor<double> onehot(Shape{8});
  onehot[5] = 1.0;
  CHECK(cross_entropy(onehot, 5) == 0.0);
  Tensor<double> uniform(Shape{8}, 0.125);
  CHECK(cross_entropy(uniform, 2) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  CHECK(std::isfinite(cross_entropy(onehot, 0)));
  CHECK_THROWS_AS(cross_entropy(uniform, 8), ValueError);

  Rng rng(9);
  auto logits = random_tensor(Shape{4, 8}, rng, -2.0, 2.0);
  const std::vector<std::size_t> labels{1, 0, 7, 4};
  auto p = softmax(logits);
  auto g = softmax_cross_entropy_backward(p, labels);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 8; ++i) {
      const double want = (p.at(r, i) - (labels[r] == i ? 1.0 : 0.0)) / 4.0;
      CHECK(std::abs(g.at(r, i) - want) < 1e-10);
    }
}

TEST_CASE("sgdm step") {
  SUBCASE("hand-iterated recurrence on w^2") {
    ParamMap<double> p{{"w", Tensor<double>(Shape{1}, 1.0)}};
    OptimizerState<double> st;
    st.learning_rate = 0.1;
    st.momentum = 0.9;
    double w = 1.0, v = 0.0;
    for (int step = 0; step < 2; ++step) {
      ParamMap<double> g{{"w", Tensor<double>(Shape{1}, 2.0 * p.at("w")[0])}};
      sgdm_step(p, g, st);
      v = 0.9 * v - 0.1 * (2.0 * w);
      w += v;
      CHECK(p.at("w")[0] == doctest::Approx(w).epsilon(1e-15));
    }
    CHECK(p.at("w")[0] == doctest::Approx(0.46).epsilon(1e-12));
  }
  SUBCASE("zero momentum is gradient descent") {
    ParamMap<double> p{{"a", Tensor<double>(Shape{2}, std::vector<double>{1.0, -2.0})}};
    ParamMap<double> g{{"a", Tensor<double>(Shape{2}, std::vector<double>{0.5, 0.25})}};
    OptimizerState<double> st;
    st.momentum = 0.0;
    st.learning_rate = 0.2;
    sgdm_step(p, g, st);
    CHECK(p.at("a")[0] == doctest::Approx(0.9));
    CHECK(p.at("a")[1] == doctest::Approx(-2.05));
  }
  SUBCASE("zero gradient leaves parameters") {
    ParamMap<double> p{{"a", Tensor<double>(Shape{3}, 0.7)}};
    ParamMap<double> g{{"a", Tensor<double>(Shape{3})}};
    OptimizerState<double> st;
    sgdm_step(p, g, st);
    CHECK(p.at("a") == Tensor<double>(Shape{3}, 0.7));
  }
  SUBCASE("non-finite gradient rejected before any update") {
    ParamMap<double> p{{"a", Tensor<double>(Shape{1}, 1.0)}, {"b", Tensor<double>(Shape{1}, 1.0)}};
    ParamMap<double> g{{"a", Tensor<double>(Shape{1}, 1.0)}, {"b", Tensor<double>(Shape{1}, NAN)}};
    OptimizerState<double> st;
    try {
      sgdm_step(p, g, st);
      FAIL("expected rejection");
    } catch (const ValueError& e) {
      CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
    CHECK(p.at("a")[0] == 1.0);
  }
}

TEST_CASE("layer gradients match finite differences at float64") {
  for (std::uint64_t seed : {11u, 12u}) {
    for (const auto& [name, err] : gradcheck::all_layers<double>(seed)) {
      INFO(name);
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("layer gradients match finite differences at float32") {
  for (const auto& [name, err] : gradcheck::all_layers<float>(13)) {
    INFO(name);
    CHECK(err < 1e-4);
  }
}
