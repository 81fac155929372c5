#include <catch2/catch_amalgamated.hpp>

#include "gradcheck_catalogue.hpp"

using namespace i2i;
using namespace i2i::ops;
using Catch::Approx;

namespace {

Tensor<double> vec(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor<double>({n}, std::move(v));
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor<float> t = Tensor<float>::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.values().size() == 24);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS(t.item());
}

TEST_CASE("conv2d on a 2x2 input with an identity-diagonal kernel") {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 2, 2}, {1, 0, 0, 1});
  auto y = conv2d(x, w, nullptr, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 5.0);
}

TEST_CASE("tanh of zeros is zeros") {
  auto y = ops::tanh(Tensor<float>::zeros({3, 2}));
  for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("conv output size matches brute-force enumeration") {
  // count window positions whose top-left corner fits in the padded input
  auto brute = [](std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    std::int64_t n = 0;
    for (std::int64_t start = -p; start + k <= in + p; start += s) ++n;
    return n;
  };
  for (std::int64_t in = 1; in <= 40; ++in)
    for (std::int64_t k = 1; k <= 5; ++k)
      for (std::int64_t s = 1; s <= 3; ++s)
        for (std::int64_t p = 0; p <= 2; ++p)
          if (in + 2 * p >= k) CHECK(kernels::conv_out_size(in, k, s, p) == brute(in, k, s, p));
  std::int64_t hw = 32;
  std::vector<std::int64_t> chain;
  for (int i = 0; i < 4; ++i) chain.push_back(hw = kernels::conv_out_size(hw, 4, 2, 1));
  CHECK(chain == std::vector<std::int64_t>{16, 8, 4, 2});
}

TEST_CASE("shape errors and catalogue errors") {
  CHECK_THROWS_AS(add(Tensor<float>::zeros({2}), Tensor<float>::zeros({3})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor<float>::zeros({1, 2, 4, 4}), Tensor<float>::zeros({1, 3, 2, 2}), nullptr, 1, 0),
                  ShapeError);
  CHECK_THROWS_AS(op_name(static_cast<OpKind>(200)), CatalogueError);
  CHECK_THROWS_AS(op_kind_from_name("softplus"), CatalogueError);
  CHECK(op_kind_from_name("norm2") == OpKind::norm2);
}

TEST_CASE("backward of sum(x*x)") {
  Tensor<double> x({2}, {1, 2}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::sum(mul(x, x)));
  CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward through a detached branch leaves zero gradient") {
  Tensor<double> x({3}, {1, 2, 3}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = ops::mean(stop_gradient(x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward contract errors") {
  Tensor<double> x({2}, {1, 2}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ContractError);
  Tensor<double> z({1}, {-1.0}, true);
  CHECK_THROWS_AS(ops::sqrt(z), NumericError);
}

TEST_CASE("non-finite gradient aborts with the op index") {
  Tensor<double> x({1}, {0.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = ops::sum(ops::sqrt(x));  // d sqrt / dx at 0 is infinite
  try {
    backward(loss);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("op #") != std::string::npos);
  }
}

TEST_CASE("three-layer leaky-ReLU net matches central differences in 64-bit") {
  std::mt19937_64 rng(11);
  auto f = [](const auto& in) {
    auto h1 = leaky_relu(linear(in[0], in[1], &in[2]), 0.2);
    auto h2 = leaky_relu(linear(h1, in[3], &in[4]), 0.2);
    return linear(h2, in[5], &in[6]);
  };
  using test::randn;
  auto r = test::check_gradients(f,
                                 {randn({4, 5}, rng), randn({6, 5}, rng), randn({6}, rng), randn({6, 6}, rng),
                                  randn({6}, rng), randn({2, 6}, rng), randn({2}, rng)},
                                 {false, true, true, true, true, true, true}, rng);
  CHECK(r.err64 < 1e-6);
}

TEST_CASE("every catalogue op passes the finite-difference check") {
  for (const auto& c : test::check_catalogue(5)) {
    INFO(c.op << " seed " << c.seed << " err64 " << c.err.err64 << " err32 " << c.err.err32);
    CHECK(c.err.err64 < 1e-6);
    CHECK(c.err.err32 < 1e-4);
  }
}

TEST_CASE("gradient-penalty parameter gradient matches central differences") {
  for (const auto& c : test::check_gradient_penalty(5)) {
    INFO("seed " << c.seed << " err64 " << c.err.err64);
    CHECK(c.err.err64 < 1e-5);
    CHECK(c.err.err32 < 1e-4);
  }
}

TEST_CASE("input_gradient of a linear map is its weight") {
  Tensor<double> w({1, 3}, {0.5, -1.0, 2.0});
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor<double> x = test::randn({2, 3}, rng);
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto g = input_gradient(linear(x, w), x);
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t j = 0; j < 3; ++j) CHECK(g.values()[b * 3 + j] == w.values()[j]);
  }
}

TEST_CASE("input_gradient in the negative leaky region is slope times weight") {
  Tensor<double> w({1, 2}, {1.0, 1.0});
  Tensor<double> x({1, 2}, {-1.0, -2.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto g = input_gradient(leaky_relu(linear(x, w), 0.2), x);
  CHECK(g.values()[0] == Approx(0.2));
  CHECK(g.values()[1] == Approx(0.2));
}

TEST_CASE("input_gradient is constant within one activation region") {
  std::mt19937_64 rng(5);
  auto w1 = test::randn({4, 3}, rng), w2 = test::randn({1, 4}, rng);
  Tensor<double> x0({1, 3}, {0.3, -0.2, 0.1}, true);
  Tensor<double> x1({1, 3}, {0.3 + 1e-4, -0.2, 0.1 - 1e-4}, true);
  auto grad_at = [&](Tensor<double>& x) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    return input_gradient(linear(relu(linear(x, w1)), w2), x).values();
  };
  CHECK(grad_at(x0) == grad_at(x1));
}

TEST_CASE("input_gradient rejects unsupported ops") {
  Tensor<double> x({1, 2}, {0.1, 0.2}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  CHECK_THROWS_AS(input_gradient(ops::sum(ops::tanh(x)), x), UnsupportedDoubleBackprop);
}

TEST_CASE("stop_gradient examples") {
  SECTION("stop_gradient(x) * w") {
    Tensor<double> x({2}, {3, 4}, true), w({2}, {5, 6}, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(ops::sum(mul(stop_gradient(x), w)));
    CHECK(x.grad() == std::vector<double>{0, 0});
    CHECK(w.grad() == std::vector<double>{3, 4});
  }
  SECTION("x + stop_gradient(x)") {
    Tensor<double> x({2}, {3, 4}, true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(ops::sum(add(x, stop_gradient(x))));
    CHECK(x.grad() == std::vector<double>{1, 1});
  }
}

TEST_CASE("finite_difference_gradient examples") {
  std::function<double(const Tensor<double>&)> sq = [](const Tensor<double>& x) {
    double s = 0;
    for (double v : x.values()) s += v * v;
    return s;
  };
  auto g = finite_difference_gradient<double>(sq, vec({1, 2}), 1e-4);
  CHECK(g.values()[0] == Approx(2).margin(1e-6));
  CHECK(g.values()[1] == Approx(4).margin(1e-6));
  std::function<double(const Tensor<double>&)> c = [](const Tensor<double>&) { return 3.0; };
  const auto flat = finite_difference_gradient<double>(c, vec({1, 2, 3}), 1e-4);
  for (double v : flat.values()) CHECK(v == 0.0);
}

TEST_CASE("tape replay reproduces outputs bit-for-bit") {
  std::mt19937_64 rng(9);
  auto x = cast<float>(test::randn({2, 2, 6, 6}, rng));
  auto w = cast<float>(test::randn({3, 2, 3, 3}, rng));
  w.set_requires_grad(true);
  auto run = [&] {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto y = ops::tanh(batchnorm2d_train(conv2d(x, w, nullptr, 1, 1), Tensor<float>::ones({3}), Tensor<float>::zeros({3})));
    CHECK(tape.replay_mismatch() == std::nullopt);
    return y.values();
  };
  CHECK(run() == run());
}
