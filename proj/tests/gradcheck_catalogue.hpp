#pragma once

// Central-difference checks for every catalogue op and for the parameter
// gradient of the gradient penalty. Shared by the unit suite and the
// acceptance binary.

#include <string>
#include <vector>

#include "support.hpp"

namespace i2i::test {

struct OpCheck {
  std::string op;
  std::uint64_t seed = 0;
  GradCheck err;
};

inline std::int64_t pick(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

/// One check per (op, seed); shapes and attributes are drawn from the seed.
inline std::vector<OpCheck> check_catalogue(int seeds = 5) {
  using namespace ops;
  std::vector<OpCheck> out;
  auto record = [&](const std::string& op, std::uint64_t seed, GradCheck e) { out.push_back({op, seed, e}); };

  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = 1000 + s;
    std::mt19937_64 rng(seed);
    const auto B = pick(rng, 2, 3);

    {  // linear
      const auto F = pick(rng, 2, 5), O = pick(rng, 1, 4);
      auto f = [](const auto& in) { return linear(in[0], in[1], &in[2]); };
      record("linear", seed, check_gradients(f, {randn({B, F}, rng), randn({O, F}, rng), randn({O}, rng)},
                                             {true, true, true}, rng));
    }
    {  // conv2d
      const auto cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 2, 4), st = pick(rng, 1, 2),
                 pd = pick(rng, 0, 1), hw = pick(rng, 5, 7);
      auto f = [st, pd](const auto& in) { return conv2d(in[0], in[1], &in[2], st, pd); };
      record("conv2d", seed,
             check_gradients(f, {randn({B, cin, hw, hw}, rng), randn({cout, cin, k, k}, rng), randn({cout}, rng)},
                             {true, true, true}, rng));
    }
    {  // conv_transpose2d
      const auto cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), hw = pick(rng, 2, 4);
      const auto k = pick(rng, 3, 4), st = pick(rng, 1, 2), pd = pick(rng, 0, 1);
      auto f = [st, pd](const auto& in) { return conv_transpose2d(in[0], in[1], &in[2], st, pd); };
      record("conv_transpose2d", seed,
             check_gradients(f, {randn({B, cin, hw, hw}, rng), randn({cin, cout, k, k}, rng), randn({cout}, rng)},
                             {true, true, true}, rng));
    }
    {  // batchnorm2d, train and eval
      const auto C = pick(rng, 1, 3), hw = pick(rng, 2, 3);
      auto ftrain = [](const auto& in) { return batchnorm2d_train(in[0], in[1], in[2]); };
      record("batchnorm2d[train]", seed,
             check_gradients(ftrain, {randn({B, C, hw, hw}, rng), uniform({C}, rng, 0.5, 1.5), randn({C}, rng)},
                             {true, true, true}, rng));
      auto feval = [](const auto& in) { return batchnorm2d_eval(in[0], in[1], in[2], in[3], in[4]); };
      record("batchnorm2d[eval]", seed,
             check_gradients(feval,
                             {randn({B, C, hw, hw}, rng), uniform({C}, rng, 0.5, 1.5), randn({C}, rng),
                              randn({C}, rng, 0.3), uniform({C}, rng, 0.5, 2.0)},
                             {true, true, true, false, false}, rng));
    }
    {  // instancenorm2d
      const auto C = pick(rng, 1, 3), hw = pick(rng, 2, 3);
      auto f = [](const auto& in) { return instancenorm2d(in[0], in[1], in[2]); };
      record("instancenorm2d", seed,
             check_gradients(f, {randn({B, C, hw, hw}, rng), uniform({C}, rng, 0.5, 1.5), randn({C}, rng)},
                             {true, true, true}, rng));
    }
    const Shape es{B, pick(rng, 2, 4), 2, 2};
    record("relu", seed, check_gradients([](const auto& in) { return relu(in[0]); }, {randn_away(es, rng)}, {true}, rng));
    record("leaky_relu", seed,
           check_gradients([](const auto& in) { return leaky_relu(in[0], 0.2); }, {randn_away(es, rng)}, {true}, rng));
    record("tanh", seed, check_gradients([](const auto& in) { return ops::tanh(in[0]); }, {randn(es, rng)}, {true}, rng));
    record("sigmoid", seed, check_gradients([](const auto& in) { return sigmoid(in[0]); }, {randn(es, rng)}, {true}, rng));
    record("add", seed,
           check_gradients([](const auto& in) { return add(in[0], in[1]); }, {randn(es, rng), randn(es, rng)},
                           {true, true}, rng));
    record("mul", seed,
           check_gradients([](const auto& in) { return mul(in[0], in[1]); }, {randn(es, rng), randn(es, rng)},
                           {true, true}, rng));
    record("scale", seed,
           check_gradients([](const auto& in) { return scale(in[0], -1.7); }, {randn(es, rng)}, {true}, rng));
    {
      const auto axis = pick(rng, 0, 3);
      Shape s2 = es;
      s2[static_cast<std::size_t>(axis)] += 1;
      record("concat", seed,
             check_gradients([axis](const auto& in) { return concat<typename std::decay_t<decltype(in[0])>::value_type>({in[0], in[1]}, axis); },
                             {randn(es, rng), randn(s2, rng)}, {true, true}, rng));
    }
    record("flatten", seed, check_gradients([](const auto& in) { return flatten(in[0]); }, {randn(es, rng)}, {true}, rng));
    record("global_avg_pool", seed,
           check_gradients([](const auto& in) { return global_avg_pool(in[0]); }, {randn({B, 2, 3, 3}, rng)}, {true}, rng));
    {
      const auto oh = pick(rng, 3, 6), ow = pick(rng, 2, 6);
      record("bilinear_resize", seed,
             check_gradients([oh, ow](const auto& in) { return bilinear_resize(in[0], oh, ow); },
                             {randn({B, 1, pick(rng, 2, 4), pick(rng, 2, 4)}, rng)}, {true}, rng));
    }
    {
      auto a = randn(es, rng);
      auto d = randn_away(es, rng);
      auto b = a.clone();
      for (std::size_t i = 0; i < b.values().size(); ++i) b.values()[i] = a.values()[i] + d.values()[i];
      record("l1_loss", seed,
             check_gradients([](const auto& in) { return l1_loss(in[0], in[1]); }, {a, b}, {true, true}, rng));
    }
    record("mse_loss", seed,
           check_gradients([](const auto& in) { return mse_loss(in[0], in[1]); }, {randn(es, rng), randn(es, rng)},
                           {true, true}, rng));
    {
      const auto K = pick(rng, 2, 5);
      std::vector<int> labels;
      for (std::int64_t b = 0; b < B; ++b) labels.push_back(int(pick(rng, 0, K - 1)));
      record("softmax_cross_entropy", seed,
             check_gradients([labels](const auto& in) { return softmax_cross_entropy(in[0], labels); },
                             {randn({B, K}, rng)}, {true}, rng));
    }
    record("sum", seed, check_gradients([](const auto& in) { return ops::sum(in[0]); }, {randn(es, rng)}, {true}, rng));
    record("mean", seed, check_gradients([](const auto& in) { return ops::mean(in[0]); }, {randn(es, rng)}, {true}, rng));
    record("sqrt", seed,
           check_gradients([](const auto& in) { return ops::sqrt(in[0]); }, {uniform(es, rng, 0.5, 2.0)}, {true}, rng));
    record("norm2", seed, check_gradients([](const auto& in) { return norm2(in[0]); }, {randn(es, rng)}, {true}, rng));
  }
  return out;
}

/// Parameter gradient of the gradient penalty for a two-layer leaky-ReLU
/// critic: (||grad_x D(x_hat)|| - 1)^2 averaged over the batch.
inline std::vector<OpCheck> check_gradient_penalty(int seeds = 5) {
  std::vector<OpCheck> out;
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = 2000 + s;
    std::mt19937_64 rng(seed);
    const std::int64_t B = 3, F = 4, H = 5;
    auto real = randn({B, F}, rng), fake = randn({B, F}, rng);
    auto f = [real, fake, seed](const auto& in) {
      using T = typename std::decay_t<decltype(in[0])>::value_type;
      auto critic = [&](const Tensor<T>& x) {
        auto h = ops::leaky_relu(ops::linear(x, in[0], &in[1]), 0.2);
        return ops::linear(h, in[2], &in[3]);
      };
      return gradient_penalty<T>(critic, cast<T>(real), cast<T>(fake), seed);
    };
    out.push_back({"gradient_penalty", seed,
                   check_gradients(f, {randn({H, F}, rng), randn({H}, rng), randn({1, H}, rng), randn({1}, rng)},
                                   {true, true, true, true}, rng)});
  }
  return out;
}

}  // namespace i2i::test
