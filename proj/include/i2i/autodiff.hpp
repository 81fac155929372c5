#pragma once

#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "i2i/kernels.hpp"
#include "i2i/ops.hpp"
#include "i2i/tensor.hpp"

namespace i2i {

class UnsupportedDoubleBackprop : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct Record {
  OpKind kind;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  OpAttrs attrs;
  std::vector<std::vector<T>> saved;
};

/// Ordered log of the ops evaluated while it is active on the current thread.
///
/// Records are appended in evaluation order, so every record's inputs are
/// either leaves or outputs of earlier records. A tape belongs to exactly one
/// training step on one thread.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { clear(); }

  static Tape* current() { return current_; }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const Record<T>& record(std::size_t i) const { return records_.at(i); }

  Tensor<T> append(Record<T> rec) {
    rec.output.impl()->tape = this;
    rec.output.impl()->node = records_.size();
    records_.push_back(std::move(rec));
    return records_.back().output;
  }

  /// Detach every recorded output and drop saved intermediates.
  void clear() {
    for (auto& r : records_) {
      r.output.impl()->tape = nullptr;
      r.output.impl()->node = 0;
    }
    records_.clear();
  }

  /// Re-evaluate every record from its recorded inputs and compare with the
  /// stored outputs. Returns the index of the first mismatching record.
  std::optional<std::size_t> replay_mismatch() const {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      kernels::Inputs<T> in;
      for (const auto& t : r.inputs) in.push_back(&t);
      auto out = kernels::forward(r.kind, in, r.attrs);
      if (out.shape != r.output.shape() || out.data != r.output.values()) return i;
    }
    return std::nullopt;
  }

 private:
  template <class U>
  friend class TapeScope;
  static inline thread_local Tape* current_ = nullptr;
  std::vector<Record<T>> records_;
};

/// Makes `tape` the recording target for this thread until destruction.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current_) { Tape<T>::current_ = &tape; }
  ~TapeScope() { Tape<T>::current_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Suspends recording on this thread (ops still evaluate).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Evaluate one catalogue op. The result is recorded on the active tape when
/// any input is tracked; otherwise it is a plain constant.
template <class T>
Tensor<T> forward_eval(OpKind kind, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs = {}) {
  kernels::Inputs<T> in;
  in.reserve(inputs.size());
  for (const auto& t : inputs) in.push_back(&t);
  auto out = kernels::forward(kind, in, attrs);
  if (!all_finite<T>(out.data))
    throw NumericError(std::string(op_name(kind)) + ": non-finite value in forward output");
  Tensor<T> result(std::move(out.shape), std::move(out.data));

  Tape<T>* tape = Tape<T>::current();
  const bool record = tape && detail::no_grad_depth == 0 &&
                      std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.tracked(); });
  if (!record) return result;
  for (const auto& t : inputs)
    if (t.impl()->tape && t.impl()->tape != tape)
      throw ContractError(std::string(op_name(kind)) + ": input recorded on a different tape");
  return tape->append(Record<T>{kind, inputs, std::move(result), attrs, std::move(out.saved)});
}

template <class T>
Tensor<T> forward_eval(std::string_view kind, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs = {}) {
  return forward_eval<T>(op_kind_from_name(kind), inputs, attrs);
}

/// Value-identical copy that blocks all reverse flow.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& t) {
  return t.clone(false);
}

namespace ops {

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias = nullptr) {
  if (bias) return forward_eval<T>(OpKind::linear, {x, w, *bias});
  return forward_eval<T>(OpKind::linear, {x, w});
}
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return forward_eval<T>(OpKind::matmul, {a, b});
}
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, std::int64_t stride,
                 std::int64_t pad) {
  OpAttrs a;
  a.stride = stride;
  a.pad = pad;
  if (bias) return forward_eval<T>(OpKind::conv2d, {x, w, *bias}, a);
  return forward_eval<T>(OpKind::conv2d, {x, w}, a);
}
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, std::int64_t stride,
                           std::int64_t pad, std::int64_t output_padding = 0) {
  OpAttrs a;
  a.stride = stride;
  a.pad = pad;
  a.output_padding = output_padding;
  if (bias) return forward_eval<T>(OpKind::conv_transpose2d, {x, w, *bias}, a);
  return forward_eval<T>(OpKind::conv_transpose2d, {x, w}, a);
}
template <class T>
Tensor<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  OpAttrs a;
  a.eps = eps;
  a.training = true;
  return forward_eval<T>(OpKind::batchnorm2d, {x, gamma, beta}, a);
}
template <class T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var, double eps = 1e-5) {
  OpAttrs a;
  a.eps = eps;
  a.training = false;
  return forward_eval<T>(OpKind::batchnorm2d, {x, gamma, beta, running_mean, running_var}, a);
}
template <class T>
Tensor<T> instancenorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  OpAttrs a;
  a.eps = eps;
  return forward_eval<T>(OpKind::instancenorm2d, {x, gamma, beta}, a);
}
template <class T>
Tensor<T> relu(const Tensor<T>& x) { return forward_eval<T>(OpKind::relu, {x}); }
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  OpAttrs a;
  a.slope = slope;
  return forward_eval<T>(OpKind::leaky_relu, {x}, a);
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) { return forward_eval<T>(OpKind::tanh, {x}); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return forward_eval<T>(OpKind::sigmoid, {x}); }
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) { return forward_eval<T>(OpKind::sqrt, {x}); }
template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) { return forward_eval<T>(OpKind::add, {x, y}); }
template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) { return forward_eval<T>(OpKind::mul, {x, y}); }
template <class T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  OpAttrs a;
  a.factor = factor;
  return forward_eval<T>(OpKind::scale, {x}, a);
}
template <class T>
Tensor<T> sub(const Tensor<T>& x, const Tensor<T>& y) { return add(x, scale(y, -1.0)); }
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::int64_t axis) {
  OpAttrs a;
  a.axis = axis;
  return forward_eval<T>(OpKind::concat, xs, a);
}
template <class T>
Tensor<T> flatten(const Tensor<T>& x) { return forward_eval<T>(OpKind::flatten, {x}); }
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  OpAttrs a;
  a.shape = std::move(shape);
  return forward_eval<T>(OpKind::reshape, {x}, a);
}
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) { return forward_eval<T>(OpKind::global_avg_pool, {x}); }
template <class T>
Tensor<T> spatial_broadcast(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  OpAttrs a;
  a.out_h = h;
  a.out_w = w;
  return forward_eval<T>(OpKind::spatial_broadcast, {x}, a);
}
template <class T>
Tensor<T> expand_scalar(const Tensor<T>& x, Shape shape) {
  OpAttrs a;
  a.shape = std::move(shape);
  return forward_eval<T>(OpKind::expand_scalar, {x}, a);
}
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  OpAttrs a;
  a.out_h = h;
  a.out_w = w;
  return forward_eval<T>(OpKind::bilinear_resize, {x}, a);
}
template <class T>
Tensor<T> l1_loss(const Tensor<T>& x, const Tensor<T>& y) { return forward_eval<T>(OpKind::l1_loss, {x, y}); }
template <class T>
Tensor<T> mse_loss(const Tensor<T>& x, const Tensor<T>& y) { return forward_eval<T>(OpKind::mse_loss, {x, y}); }
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::vector<int> labels) {
  OpAttrs a;
  a.labels = std::move(labels);
  return forward_eval<T>(OpKind::softmax_cross_entropy, {logits}, a);
}
template <class T>
Tensor<T> sum(const Tensor<T>& x) { return forward_eval<T>(OpKind::sum, {x}); }
template <class T>
Tensor<T> mean(const Tensor<T>& x) { return forward_eval<T>(OpKind::mean, {x}); }
template <class T>
Tensor<T> norm2(const Tensor<T>& x) { return forward_eval<T>(OpKind::norm2, {x}); }

}  // namespace ops

/// Reverse-mode sweep from a scalar loss over the tape that recorded it.
///
/// Gradients accumulate into the grad slot of every requires_grad leaf
/// reached (tied parameters therefore sum their contributions). The tape is
/// cleared afterwards. Returns the leaves that received a gradient.
template <class T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  Tape<T>* tape = loss.impl()->tape;
  if (!tape) {
    // constant with respect to every tracked tensor: nothing to accumulate
    if (Tape<T>::current()) return {};
    throw ContractError("backward: loss was not recorded on a tape");
  }
  const std::size_t top = loss.impl()->node;
  std::vector<std::vector<T>> grads(top + 1);
  grads[top] = {T(1)};
  std::vector<Tensor<T>> touched;

  for (std::size_t i = top + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    const Record<T>& rec = tape->record(i);
    kernels::Inputs<T> in;
    std::vector<bool> want;
    for (const auto& t : rec.inputs) {
      in.push_back(&t);
      want.push_back(t.tracked());
    }
    auto gin = kernels::backward(rec.kind, in, rec.output, rec.saved, rec.attrs, grads[i], want);
    grads[i].clear();
    grads[i].shrink_to_fit();
    for (std::size_t k = 0; k < rec.inputs.size(); ++k) {
      if (gin[k].empty()) continue;
      if (!all_finite<T>(gin[k]))
        throw NumericError("backward: non-finite gradient at op #" + std::to_string(i) + " (" +
                           std::string(op_name(rec.kind)) + ")");
      auto* impl = rec.inputs[k].impl();
      std::vector<T>* slot;
      if (impl->tape == tape) {
        slot = &grads[impl->node];
      } else if (impl->requires_grad) {
        if (impl->grad.empty()) touched.push_back(rec.inputs[k]);
        slot = &impl->grad;
      } else {
        continue;
      }
      if (slot->empty()) {
        *slot = std::move(gin[k]);
      } else {
        for (std::size_t j = 0; j < slot->size(); ++j) (*slot)[j] += gin[k][j];
      }
    }
  }
  tape->clear();
  return touched;
}

namespace detail {

// Differentiable vector-Jacobian product of one record with respect to its
// input `slot`. Only ops whose Jacobian is constant within an activation
// region are supported; activation second derivatives are zero.
template <class T>
Tensor<T> graph_vjp(const Record<T>& rec, std::size_t slot, const Tensor<T>& cot) {
  auto unsupported = [&]() -> Tensor<T> {
    throw UnsupportedDoubleBackprop("input_gradient: op '" + std::string(op_name(rec.kind)) +
                                    "' (input " + std::to_string(slot) + ") is not supported on the critic path");
  };
  const auto& in = rec.inputs;
  switch (rec.kind) {
    case OpKind::linear:
      if (slot != 0) return unsupported();
      return ops::matmul(cot, in[1]);
    case OpKind::matmul:
      return unsupported();
    case OpKind::conv2d: {
      if (slot != 0) return unsupported();
      const auto k = in[1].dim(2), s = rec.attrs.stride, p = rec.attrs.pad;
      const auto op = in[0].dim(2) - kernels::conv_transpose_out_size(cot.dim(2), k, s, p, 0);
      if (op < 0 || op >= s || in[0].dim(3) - kernels::conv_transpose_out_size(cot.dim(3), k, s, p, 0) != op)
        return unsupported();
      return ops::conv_transpose2d(cot, in[1], static_cast<const Tensor<T>*>(nullptr), s, p, op);
    }
    case OpKind::conv_transpose2d:
      if (slot != 0) return unsupported();
      return ops::conv2d(cot, in[1], static_cast<const Tensor<T>*>(nullptr), rec.attrs.stride, rec.attrs.pad);
    case OpKind::relu:
    case OpKind::leaky_relu: {
      const T neg = rec.kind == OpKind::relu ? T(0) : T(rec.attrs.slope);
      std::vector<T> mask(in[0].values().size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = in[0].values()[i] > T(0) ? T(1) : neg;
      return ops::mul(cot, Tensor<T>(in[0].shape(), std::move(mask)));
    }
    case OpKind::add:
      return cot;
    case OpKind::mul:
      return ops::mul(cot, in[1 - slot]);
    case OpKind::scale:
      return ops::scale(cot, rec.attrs.factor);
    case OpKind::sum:
      return ops::expand_scalar(cot, in[0].shape());
    case OpKind::mean:
      return ops::scale(ops::expand_scalar(cot, in[0].shape()), 1.0 / double(in[0].numel()));
    case OpKind::flatten:
    case OpKind::reshape:
      return ops::reshape(cot, in[0].shape());
    case OpKind::global_avg_pool:
      return ops::scale(ops::spatial_broadcast(cot, in[0].dim(2), in[0].dim(3)),
                        1.0 / double(in[0].dim(2) * in[0].dim(3)));
    case OpKind::spatial_broadcast: {
      // adjoint is a spatial sum
      return ops::scale(ops::global_avg_pool(cot), double(rec.attrs.out_h * rec.attrs.out_w));
    }
    default:
      return unsupported();
  }
}

}  // namespace detail

/// Gradient of sum(output) with respect to `wrt`, built as new graph nodes so
/// that a later backward() differentiates through it. With per-sample
/// outputs and a batch-independent subgraph this is the per-sample input
/// gradient.
template <class T>
Tensor<T> input_gradient(const Tensor<T>& output, const Tensor<T>& wrt) {
  Tape<T>* tape = output.impl()->tape;
  if (!tape) throw ContractError("input_gradient: output was not recorded on a tape");
  if (Tape<T>::current() != tape) throw ContractError("input_gradient: output's tape must be the active tape");
  if (!wrt.tracked()) throw ContractError("input_gradient: wrt must be tracked");
  const std::size_t top = output.impl()->node;
  const auto* target = wrt.impl();

  // Records lying on a path from wrt to the output.
  auto is_source = [&](const Tensor<T>& t, const std::vector<char>& reach) {
    if (t.impl() == target) return true;
    return t.impl()->tape == tape && t.impl()->node <= top && reach[t.impl()->node];
  };
  std::vector<char> reach(top + 1, 0);
  for (std::size_t i = 0; i <= top; ++i)
    for (const auto& t : tape->record(i).inputs)
      if (is_source(t, reach)) {
        reach[i] = 1;
        break;
      }
  if (!reach[top] && output.impl() != target) return Tensor<T>::zeros(wrt.shape());

  std::unordered_map<std::size_t, Tensor<T>> cot;
  std::optional<Tensor<T>> result;
  cot.emplace(top, Tensor<T>::ones(output.shape()));
  for (std::size_t i = top + 1; i-- > 0;) {
    auto it = cot.find(i);
    if (it == cot.end()) continue;
    Tensor<T> c = it->second;
    cot.erase(it);
    const Record<T>& src = tape->record(i);
    const Record<T> rec{src.kind, src.inputs, src.output, src.attrs, {}};  // the tape grows below
    for (std::size_t k = 0; k < rec.inputs.size(); ++k) {
      const auto& t = rec.inputs[k];
      if (!is_source(t, reach)) continue;
      Tensor<T> g = detail::graph_vjp(rec, k, c);
      if (t.impl() == target) {
        result = result ? ops::add(*result, g) : g;
      } else {
        auto [pos, fresh] = cot.try_emplace(t.impl()->node, g);
        if (!fresh) pos->second = ops::add(pos->second, g);
      }
    }
  }
  return result ? *result : Tensor<T>::zeros(wrt.shape());
}

/// Central-difference estimate of df/dx, one coordinate at a time.
template <class T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  Tensor<T> probe = x.clone();
  std::vector<T> grad(x.values().size());
  for (std::size_t k = 0; k < grad.size(); ++k) {
    const T orig = probe.values()[k];
    probe.values()[k] = orig + h;
    const T fp = f(probe);
    probe.values()[k] = orig - h;
    const T fm = f(probe);
    probe.values()[k] = orig;
    grad[k] = (fp - fm) / (T(2) * h);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

}  // namespace i2i
