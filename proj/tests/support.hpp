#pragma once

// Helpers shared by the test executables: random tensors, gradient
// comparison against central differences, tiny datasets and bundles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "i2i/i2i.hpp"

namespace i2i::test {

inline Tensor<double> randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(shape, std::move(v));
}

/// Values bounded away from zero, for ops with a kink at the origin.
inline Tensor<double> randn_away(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  auto t = randn(shape, rng);
  for (auto& x : t.values()) x = x >= 0 ? x + gap : x - gap;
  return t;
}

inline Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(shape, std::move(v));
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

template <class T>
std::vector<double> as_double(const std::vector<T>& v) {
  return {v.begin(), v.end()};
}

/// A scalar function of several tensors, written once for both precisions.
/// `F` is a generic callable: F(const std::vector<Tensor<T>>&) -> Tensor<T>.
template <class T, class F>
Tensor<T> readout(F& f, const std::vector<Tensor<T>>& in, const Tensor<T>& weights) {
  auto y = f(in);
  if (y.numel() == 1) return ops::mul(y, weights);
  return ops::sum(ops::mul(y, weights));
}

template <class T, class F>
std::vector<std::vector<double>> analytic_grads(F& f, const std::vector<Tensor<double>>& inputs,
                                                const std::vector<bool>& wrt, const Tensor<double>& weights) {
  std::vector<Tensor<T>> in;
  for (std::size_t i = 0; i < inputs.size(); ++i) in.push_back(Tensor<T>(cast<T>(inputs[i]).shape(), cast<T>(inputs[i]).values(), wrt[i]));
  Tape<T> tape;
  TapeScope<T> scope(tape);
  auto loss = readout(f, in, cast<T>(weights));
  backward(loss);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < in.size(); ++i) out.push_back(wrt[i] ? as_double(in[i].grad()) : std::vector<double>{});
  return out;
}

template <class F>
std::vector<std::vector<double>> numeric_grads(F& f, const std::vector<Tensor<double>>& inputs,
                                               const std::vector<bool>& wrt, const Tensor<double>& weights,
                                               double h) {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!wrt[k]) {
      out.emplace_back();
      continue;
    }
    std::function<double(const Tensor<double>&)> fk = [&](const Tensor<double>& xk) {
      // a private tape: some functions (the gradient penalty) differentiate internally
      Tape<double> tape;
      TapeScope<double> scope(tape);
      auto in = inputs;
      in[k] = xk;
      return readout(f, in, weights).item();
    };
    out.push_back(finite_difference_gradient<double>(fk, inputs[k], h).values());
  }
  return out;
}

struct GradCheck {
  double err64 = 0;  // float64 analytic vs float64 central differences
  double err32 = 0;  // float32 analytic vs the float64 central differences
};

/// Checks every input flagged in `wrt`; returns the worst relative errors.
template <class F>
GradCheck check_gradients(F f, const std::vector<Tensor<double>>& inputs, const std::vector<bool>& wrt,
                          std::mt19937_64& rng, double h = 1e-6) {
  Tensor<double> probe_out;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    probe_out = f(inputs);
  }
  auto weights = randn(probe_out.shape(), rng);
  auto num = numeric_grads(f, inputs, wrt, weights, h);
  auto a64 = analytic_grads<double>(f, inputs, wrt, weights);
  auto a32 = analytic_grads<float>(f, inputs, wrt, weights);
  GradCheck r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!wrt[k]) continue;
    r.err64 = std::max(r.err64, rel_err(a64[k], num[k]));
    r.err32 = std::max(r.err32, rel_err(a32[k], num[k]));
  }
  return r;
}

/// Small 8-class-free image pair for fast trainer and loss tests.
inline SyntheticSpec tiny_spec(std::uint64_t seed = 7, std::int64_t n = 64) {
  SyntheticSpec s;
  s.num_classes = 4;
  s.source_count = n;
  s.target_count = n;
  s.test_count = n;
  s.seed = seed;
  return s;
}

inline ArchSpec tiny_arch(std::int64_t num_classes = 4) {
  ArchSpec a = ArchSpec::digits_small();
  a.num_classes = num_classes;
  a.encoder = {4, 4, 8, 8};
  a.decoder = {8, 4, 4};
  a.critic = {4, 4, 4};
  a.feature_disc = {8, 8};
  return a;
}

template <class T>
DomainBatch<T> batch_of(const Dataset& ds, std::int64_t begin, std::int64_t end) {
  DomainBatch<T> b;
  b.images = rows<T>(ds, begin, end);
  if (ds.labels) b.labels = std::vector<int>(ds.labels->begin() + begin, ds.labels->begin() + end);
  return b;
}

/// Bit pattern snapshot of every parameter, keyed by parameter name.
template <class T>
std::map<std::string, std::vector<T>> snapshot(const ModelBundle<T>& b) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& [id, e] : b.params().entries()) out[e.name] = e.value.values();
  return out;
}

}  // namespace i2i::test
