#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "i2i/autodiff.hpp"

namespace i2i {

using ParamId = std::uint32_t;

struct TieGroup {
  std::string slot_a;
  std::string slot_b;
};

/// Registry of named parameter tensors addressed through layer slots.
///
/// Every layer reads its tensors through slot names. Tying points two slots
/// at the same tensor, so an update through either is seen by both and the
/// gradients of both uses sum into one grad slot.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  ParamId add(const std::string& slot, Tensor<T> value, bool trainable = true) {
    if (slots_.count(slot)) throw ContractError("param slot '" + slot + "' already registered");
    value.set_requires_grad(trainable);
    const ParamId id = next_id_++;
    entries_.emplace(id, Entry{slot, std::move(value), trainable});
    slots_.emplace(slot, id);
    return id;
  }

  bool has_slot(const std::string& slot) const { return slots_.count(slot) > 0; }

  ParamId id_of(const std::string& slot) const {
    auto it = slots_.find(slot);
    if (it == slots_.end()) throw ContractError("unknown param slot '" + slot + "'");
    return it->second;
  }

  Tensor<T>& at(const std::string& slot) { return entries_.at(id_of(slot)).value; }
  const Tensor<T>& at(const std::string& slot) const { return entries_.at(id_of(slot)).value; }
  Entry& entry(ParamId id) { return entries_.at(id); }
  const Entry& entry(ParamId id) const { return entries_.at(id); }
  const std::map<ParamId, Entry>& entries() const { return entries_; }
  std::map<ParamId, Entry>& entries() { return entries_; }
  const std::map<std::string, ParamId>& slots() const { return slots_; }

  std::optional<ParamId> find_by_name(const std::string& name) const {
    for (const auto& [id, e] : entries_)
      if (e.name == name) return id;
    return std::nullopt;
  }

  /// Bind slot b to slot a's tensor. The tensor previously behind b is
  /// dropped when no other slot references it.
  TieGroup tie(const std::string& slot_a, const std::string& slot_b) {
    const ParamId a = id_of(slot_a), b = id_of(slot_b);
    if (a == b) return {slot_a, slot_b};
    if (entries_.at(a).value.shape() != entries_.at(b).value.shape())
      throw ShapeError("tie: shape mismatch between '" + slot_a + "' " + to_string(entries_.at(a).value.shape()) +
                       " and '" + slot_b + "' " + to_string(entries_.at(b).value.shape()));
    slots_[slot_b] = a;
    drop_if_orphan(b);
    return {slot_a, slot_b};
  }

  bool tied(const TieGroup& g) const {
    return has_slot(g.slot_a) && has_slot(g.slot_b) && id_of(g.slot_a) == id_of(g.slot_b);
  }

  /// Give slot b its own copy of the shared tensor, named after slot b.
  std::pair<ParamId, ParamId> untie(const TieGroup& g) {
    if (!has_slot(g.slot_a) || !has_slot(g.slot_b) || !tied(g))
      throw ContractError("untie: '" + g.slot_a + "' and '" + g.slot_b + "' are not a tie group");
    const ParamId a = id_of(g.slot_a);
    const Entry& shared = entries_.at(a);
    const ParamId b = next_id_++;
    Entry copy{g.slot_b, shared.value.clone(shared.trainable), shared.trainable};
    entries_.emplace(b, std::move(copy));
    slots_[g.slot_b] = b;
    // keep the shared tensor named after a slot that still points at it
    if (entries_.at(a).name == g.slot_b) entries_.at(a).name = g.slot_a;
    return {a, b};
  }

  /// Slots resolving to the same tensor as `slot` (including itself).
  std::vector<std::string> group_of(const std::string& slot) const {
    const ParamId id = id_of(slot);
    std::vector<std::string> out;
    for (const auto& [s, i] : slots_)
      if (i == id) out.push_back(s);
    return out;
  }

  std::int64_t trainable_count() const {
    std::int64_t n = 0;
    for (const auto& [id, e] : entries_)
      if (e.trainable) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [id, e] : entries_) e.value.zero_grad();
  }

  /// Rebuild the slot table from (slot, param name) pairs, e.g. after loading.
  void rebind(const std::vector<std::pair<std::string, std::string>>& slot_to_name) {
    for (const auto& [slot, name] : slot_to_name) {
      auto id = find_by_name(name);
      if (!id) throw ContractError("rebind: no parameter named '" + name + "'");
      if (!has_slot(slot)) throw ContractError("rebind: unknown slot '" + slot + "'");
      slots_[slot] = *id;
    }
    std::vector<ParamId> ids;
    for (const auto& [id, e] : entries_) ids.push_back(id);
    for (auto id : ids) drop_if_orphan(id);
  }

  /// Replace all tensors and the slot table, e.g. when loading a checkpoint.
  /// The slot set must stay the same and every slot keeps its shape.
  void restore(std::vector<Entry> entries, const std::vector<std::pair<std::string, std::string>>& slot_to_name) {
    std::map<std::string, ParamId> by_name;
    std::map<ParamId, Entry> fresh;
    ParamId next = 0;
    for (auto& e : entries) {
      if (by_name.count(e.name)) throw ContractError("restore: duplicate parameter '" + e.name + "'");
      e.value.set_requires_grad(e.trainable);
      by_name.emplace(e.name, next);
      fresh.emplace(next++, std::move(e));
    }
    std::map<std::string, ParamId> slots;
    for (const auto& [slot, name] : slot_to_name) {
      if (!has_slot(slot)) throw ContractError("restore: unknown slot '" + slot + "'");
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ContractError("restore: slot '" + slot + "' names missing parameter '" + name + "'");
      if (fresh.at(it->second).value.shape() != at(slot).shape())
        throw ShapeError("restore: shape mismatch for slot '" + slot + "'");
      slots[slot] = it->second;
    }
    if (slots.size() != slots_.size()) throw ContractError("restore: slot table incomplete");
    for (const auto& [id, e] : fresh) {
      bool used = false;
      for (const auto& [s, i] : slots) used = used || i == id;
      if (!used) throw ContractError("restore: parameter '" + e.name + "' has no slot");
    }
    entries_ = std::move(fresh);
    slots_ = std::move(slots);
    next_id_ = next;
  }

 private:
  void drop_if_orphan(ParamId id) {
    for (const auto& [s, i] : slots_)
      if (i == id) return;
    entries_.erase(id);
  }

  std::map<ParamId, Entry> entries_;
  std::map<std::string, ParamId> slots_;
  ParamId next_id_ = 0;
};

enum class LayerKind { conv2d, conv_transpose2d, linear, flatten, global_avg_pool };
enum class NormKind { none, batch, instance };
enum class ActKind { none, relu, leaky_relu, tanh, sigmoid };

/// One block: op (+ optional normalization) (+ optional activation).
struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::int64_t in = 0;
  std::int64_t out = 0;
  std::int64_t kernel = 4;
  std::int64_t stride = 2;
  std::int64_t pad = 1;
  NormKind norm = NormKind::none;
  ActKind act = ActKind::none;
  double slope = 0.2;
  bool bias = true;

  void validate() const {
    if (kind == LayerKind::flatten || kind == LayerKind::global_avg_pool) return;
    if (in <= 0 || out <= 0) throw ContractError("layer fan-in/fan-out must be positive");
    if (kind != LayerKind::linear && (kernel <= 0 || stride <= 0 || pad < 0))
      throw ContractError("convolution kernel/stride/pad must be positive");
    if (kind == LayerKind::linear && norm != NormKind::none)
      throw ContractError("normalization is only defined for convolution layers");
  }
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Fan-in-scaled uniform initialization: weights ~ U(-b, b) with
/// b = sqrt(3 / fan_in), so std = 1/sqrt(fan_in). Biases and BN shifts are
/// zero, BN scales one, running variance one.
template <class T>
std::vector<std::pair<std::string, std::pair<Tensor<T>, bool>>> init_params(const LayerSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<std::pair<std::string, std::pair<Tensor<T>, bool>>> out;
  if (spec.kind == LayerKind::flatten || spec.kind == LayerKind::global_avg_pool) return out;
  Shape wshape;
  double fan_in = 0;
  switch (spec.kind) {
    case LayerKind::linear:
      wshape = {spec.out, spec.in};
      fan_in = double(spec.in);
      break;
    case LayerKind::conv2d:
      wshape = {spec.out, spec.in, spec.kernel, spec.kernel};
      fan_in = double(spec.in * spec.kernel * spec.kernel);
      break;
    case LayerKind::conv_transpose2d:
      wshape = {spec.in, spec.out, spec.kernel, spec.kernel};
      fan_in = double(spec.in * spec.kernel * spec.kernel) / double(spec.stride * spec.stride);
      break;
    default:
      break;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = std::sqrt(3.0 / fan_in);
  std::vector<T> w(static_cast<std::size_t>(numel(wshape)));
  for (auto& v : w) v = T(bound * dist(rng));
  out.push_back({"weight", {Tensor<T>(wshape, std::move(w)), true}});
  if (spec.bias) out.push_back({"bias", {Tensor<T>::zeros({spec.out}), true}});
  if (spec.norm != NormKind::none) {
    out.push_back({"norm.gamma", {Tensor<T>::ones({spec.out}), true}});
    out.push_back({"norm.beta", {Tensor<T>::zeros({spec.out}), true}});
  }
  if (spec.norm == NormKind::batch) {
    out.push_back({"norm.running_mean", {Tensor<T>::zeros({spec.out}), false}});
    out.push_back({"norm.running_var", {Tensor<T>::ones({spec.out}), false}});
  }
  return out;
}

struct ForwardMode {
  bool training = true;
  bool update_running_stats = true;
  double bn_momentum = 0.1;
};

/// A feed-forward stack of LayerSpecs whose tensors live in a ParamStore
/// under "<name>.<index>.<suffix>" slots.
template <class T>
class Network {
 public:
  Network() = default;
  Network(std::string name, std::vector<LayerSpec> layers) : name_(std::move(name)), layers_(std::move(layers)) {
    for (const auto& l : layers_) l.validate();
  }

  const std::string& name() const { return name_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::string slot(std::size_t layer, const std::string& suffix) const {
    return name_ + "." + std::to_string(layer) + "." + suffix;
  }

  void register_params(ParamStore<T>& store, std::uint64_t seed) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& [suffix, tp] : init_params<T>(layers_[i], seed ^ fnv1a(slot(i, "")))) store.add(slot(i, suffix), tp.first, tp.second);
  }

  /// Slots owned by this network, in layer order.
  std::vector<std::string> slots(const ParamStore<T>& store) const {
    std::vector<std::string> out;
    const std::string prefix = name_ + ".";
    for (const auto& [s, id] : store.slots())
      if (s.compare(0, prefix.size(), prefix) == 0) out.push_back(s);
    return out;
  }

  Tensor<T> forward(ParamStore<T>& store, const Tensor<T>& input, const ForwardMode& mode) const {
    Tensor<T> x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) x = forward_layer(store, i, x, mode);
    return x;
  }

  Tensor<T> forward_layer(ParamStore<T>& store, std::size_t i, const Tensor<T>& x, const ForwardMode& mode) const {
    const LayerSpec& l = layers_[i];
    Tensor<T> y;
    const bool has_weights = l.kind != LayerKind::flatten && l.kind != LayerKind::global_avg_pool;
    const Tensor<T>* bias = has_weights && l.bias ? &store.at(slot(i, "bias")) : nullptr;
    switch (l.kind) {
      case LayerKind::flatten:
        return ops::flatten(x);
      case LayerKind::global_avg_pool:
        return ops::global_avg_pool(x);
      case LayerKind::linear:
        y = ops::linear(x, store.at(slot(i, "weight")), bias);
        break;
      case LayerKind::conv2d:
        y = ops::conv2d(x, store.at(slot(i, "weight")), bias, l.stride, l.pad);
        break;
      case LayerKind::conv_transpose2d:
        y = ops::conv_transpose2d(x, store.at(slot(i, "weight")), bias, l.stride, l.pad);
        break;
    }
    if (l.norm == NormKind::batch) {
      auto& gamma = store.at(slot(i, "norm.gamma"));
      auto& beta = store.at(slot(i, "norm.beta"));
      auto& rm = store.at(slot(i, "norm.running_mean"));
      auto& rv = store.at(slot(i, "norm.running_var"));
      if (mode.training) {
        if (mode.update_running_stats) update_running(y, rm, rv, mode.bn_momentum);
        y = ops::batchnorm2d_train(y, gamma, beta);
      } else {
        y = ops::batchnorm2d_eval(y, gamma, beta, rm, rv);
      }
    } else if (l.norm == NormKind::instance) {
      y = ops::instancenorm2d(y, store.at(slot(i, "norm.gamma")), store.at(slot(i, "norm.beta")));
    }
    switch (l.act) {
      case ActKind::none:
        break;
      case ActKind::relu:
        y = ops::relu(y);
        break;
      case ActKind::leaky_relu:
        y = ops::leaky_relu(y, l.slope);
        break;
      case ActKind::tanh:
        y = ops::tanh(y);
        break;
      case ActKind::sigmoid:
        y = ops::sigmoid(y);
        break;
    }
    return y;
  }

 private:
  // running = (1 - momentum) * running + momentum * batch (unbiased variance)
  static void update_running(const Tensor<T>& y, Tensor<T>& rm, Tensor<T>& rv, double momentum) {
    const auto B = y.dim(0), C = y.dim(1), P = y.dim(2) * y.dim(3);
    const double n = double(B * P);
    for (std::int64_t c = 0; c < C; ++c) {
      double s1 = 0, s2 = 0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < P; ++i) s1 += y.values()[(b * C + c) * P + i];
      const double m = s1 / n;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < P; ++i) {
          const double d = y.values()[(b * C + c) * P + i] - m;
          s2 += d * d;
        }
      const double var = n > 1 ? s2 / (n - 1) : 0.0;
      rm.values()[c] = T((1 - momentum) * rm.values()[c] + momentum * m);
      rv.values()[c] = T((1 - momentum) * rv.values()[c] + momentum * var);
    }
  }

  std::string name_;
  std::vector<LayerSpec> layers_;
};

}  // namespace i2i
