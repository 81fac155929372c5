#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "i2i/nn.hpp"

namespace i2i {

/// The eight networks of the adaptation model.
enum class Net : int { f_x = 0, f_y, g_x, g_y, h, d_x, d_y, d_z };

inline constexpr std::array<Net, 8> kAllNets = {Net::f_x, Net::f_y, Net::g_x, Net::g_y,
                                               Net::h,   Net::d_x, Net::d_y, Net::d_z};
inline constexpr std::array<std::string_view, 8> kNetNames = {"f_x", "f_y", "g_x", "g_y", "h", "d_x", "d_y", "d_z"};

inline std::string_view net_name(Net n) { return kNetNames[static_cast<int>(n)]; }
inline Net net_from_name(std::string_view s) {
  for (auto n : kAllNets)
    if (net_name(n) == s) return n;
  throw ContractError("unknown network '" + std::string(s) + "'");
}
inline bool is_critic(Net n) { return n == Net::d_x || n == Net::d_y || n == Net::d_z; }

/// Layer widths for the digit-scale model. The defaults are the published
/// LeNet-style encoder, decoder, critic and feature discriminator; the
/// `digits_small` variant narrows every stack for desk-scale runs.
struct ArchSpec {
  std::string name = "digits";
  std::int64_t in_channels = 1;
  std::int64_t image_size = 32;
  std::int64_t num_classes = 10;
  std::vector<std::int64_t> encoder{64, 64, 128, 128};
  std::vector<std::int64_t> decoder{512, 256, 128};  // a final layer maps to in_channels
  std::vector<std::int64_t> critic{64, 128, 256};    // a final layer maps to one channel
  std::vector<std::int64_t> feature_disc{500, 500};  // a final layer maps to one score
  NormKind critic_norm = NormKind::none;

  static ArchSpec digits() { return {}; }
  static ArchSpec digits_small() {
    ArchSpec a;
    a.name = "digits_small";
    a.encoder = {8, 16, 16, 16};
    a.decoder = {32, 16, 8};
    a.critic = {8, 16, 16};
    a.feature_disc = {64, 64};
    return a;
  }
  static ArchSpec by_name(const std::string& name) {
    if (name == "digits") return digits();
    if (name == "digits_small") return digits_small();
    throw ContractError("unknown architecture '" + name + "'");
  }

  std::int64_t latent_channels() const { return encoder.back(); }
  std::int64_t latent_size() const { return image_size >> encoder.size(); }
  Shape latent_shape() const { return {latent_channels(), latent_size(), latent_size()}; }
  std::int64_t latent_dim() const { return latent_channels() * latent_size() * latent_size(); }

  void validate() const {
    if (encoder.empty() || decoder.size() + 1 != encoder.size())
      throw ContractError("decoder must have one fewer hidden width than the encoder has layers");
    if (image_size % (std::int64_t{1} << encoder.size()) != 0 || latent_size() < 1)
      throw ContractError("image size must halve exactly through every encoder layer");
    if ((image_size >> (critic.size() + 1)) < 1)
      throw ContractError("critic too deep for the image size");
    if (num_classes < 2) throw ContractError("need at least two classes");
  }
};

/// Which parameters are shared between the two domain branches.
struct SharingPlan {
  bool tie_encoders = true;
  int shared_decoder_layers = 2;
};

/// Four stride-2 4x4 convolutions, each with batch norm and ReLU.
template <class T>
Network<T> build_digit_encoder(const std::string& name, const ArchSpec& arch) {
  std::vector<LayerSpec> layers;
  std::int64_t in = arch.in_channels;
  for (auto w : arch.encoder) {
    layers.push_back({LayerKind::conv2d, in, w, 4, 2, 1, NormKind::batch, ActKind::relu});
    in = w;
  }
  return Network<T>(name, std::move(layers));
}

/// Transposed-convolution decoder mirroring the encoder: batch norm and ReLU
/// on hidden layers, Tanh on the image layer.
template <class T>
Network<T> build_digit_decoder(const std::string& name, const ArchSpec& arch) {
  std::vector<LayerSpec> layers;
  std::int64_t in = arch.latent_channels();
  for (auto w : arch.decoder) {
    layers.push_back({LayerKind::conv_transpose2d, in, w, 4, 2, 1, NormKind::batch, ActKind::relu});
    in = w;
  }
  layers.push_back({LayerKind::conv_transpose2d, in, arch.in_channels, 4, 2, 1, NormKind::none, ActKind::tanh});
  return Network<T>(name, std::move(layers));
}

template <class T>
std::pair<Network<T>, Network<T>> build_digit_decoders(const ArchSpec& arch) {
  return {build_digit_decoder<T>("g_x", arch), build_digit_decoder<T>("g_y", arch)};
}

// flatten -> linear
template <class T>
Network<T> build_classifier_head(const ArchSpec& arch, std::int64_t num_classes) {
  return Network<T>("h", {LayerSpec{LayerKind::flatten},
                          LayerSpec{LayerKind::linear, arch.latent_dim(), num_classes, 0, 0, 0}});
}

/// Fully connected latent discriminator; hidden layers use leaky ReLU with
/// slope 0.2 and the score layer is linear.
template <class T>
Network<T> build_feature_discriminator(const ArchSpec& arch) {
  std::vector<LayerSpec> layers{LayerSpec{LayerKind::flatten}};
  std::int64_t in = arch.latent_dim();
  for (auto w : arch.feature_disc) {
    layers.push_back({LayerKind::linear, in, w, 0, 0, 0, NormKind::none, ActKind::leaky_relu, 0.2});
    in = w;
  }
  layers.push_back({LayerKind::linear, in, 1, 0, 0, 0, NormKind::none, ActKind::none});
  return Network<T>("d_z", std::move(layers));
}

/// Fully convolutional image critic. Hidden layers use leaky ReLU 0.2 (and
/// optional instance norm); the one-channel score map is averaged spatially.
template <class T>
Network<T> build_image_critic(const std::string& name, const ArchSpec& arch) {
  std::vector<LayerSpec> layers;
  std::int64_t in = arch.in_channels;
  for (auto w : arch.critic) {
    layers.push_back({LayerKind::conv2d, in, w, 4, 2, 1, arch.critic_norm, ActKind::leaky_relu, 0.2});
    in = w;
  }
  layers.push_back({LayerKind::conv2d, in, 1, 4, 2, 1, NormKind::none, ActKind::none});
  layers.push_back({LayerKind::global_avg_pool});
  return Network<T>(name, std::move(layers));
}

/// Encoders, decoders, classifier and discriminators sharing one ParamStore.
template <class T>
class ModelBundle {
 public:
  ModelBundle(ArchSpec arch, SharingPlan plan, std::uint64_t seed) : arch_(std::move(arch)), plan_(plan) {
    arch_.validate();
    nets_[idx(Net::f_x)] = build_digit_encoder<T>("f_x", arch_);
    nets_[idx(Net::f_y)] = build_digit_encoder<T>("f_y", arch_);
    auto [gx, gy] = build_digit_decoders<T>(arch_);
    nets_[idx(Net::g_x)] = std::move(gx);
    nets_[idx(Net::g_y)] = std::move(gy);
    nets_[idx(Net::h)] = build_classifier_head<T>(arch_, arch_.num_classes);
    nets_[idx(Net::d_x)] = build_image_critic<T>("d_x", arch_);
    nets_[idx(Net::d_y)] = build_image_critic<T>("d_y", arch_);
    nets_[idx(Net::d_z)] = build_feature_discriminator<T>(arch_);
    for (const auto& n : nets_) n.register_params(store_, seed);
    if (plan_.tie_encoders)
      for (const auto& g : encoder_tie_groups()) store_.tie(g.slot_a, g.slot_b);
    for (const auto& g : decoder_tie_groups()) store_.tie(g.slot_a, g.slot_b);
  }

  const ArchSpec& arch() const { return arch_; }
  const SharingPlan& sharing() const { return plan_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Network<T>& net(Net n) const { return nets_[idx(n)]; }

  Tensor<T> forward(Net n, const Tensor<T>& x, const ForwardMode& mode = {}) {
    check_input(n, x);
    return nets_[idx(n)].forward(store_, x, mode);
  }

  /// Distinct parameter ids reachable from a network's slots.
  std::vector<ParamId> param_ids(Net n) const {
    std::set<ParamId> ids;
    for (const auto& s : nets_[idx(n)].slots(store_)) ids.insert(store_.id_of(s));
    return {ids.begin(), ids.end()};
  }

  std::vector<TieGroup> encoder_tie_groups() const { return pair_groups(Net::f_x, Net::f_y, net(Net::f_x).layers().size()); }
  std::vector<TieGroup> decoder_tie_groups() const {
    return pair_groups(Net::g_x, Net::g_y, static_cast<std::size_t>(plan_.shared_decoder_layers));
  }

  bool encoders_tied() const {
    auto groups = encoder_tie_groups();
    return std::all_of(groups.begin(), groups.end(), [&](const TieGroup& g) { return store_.tied(g); });
  }
  void untie_encoders() {
    if (!encoders_tied()) throw ContractError("untie_encoders: encoders are not tied");
    for (const auto& g : encoder_tie_groups()) store_.untie(g);
  }
  void tie_encoders() {
    for (const auto& g : encoder_tie_groups()) store_.tie(g.slot_a, g.slot_b);
  }

 private:
  static std::size_t idx(Net n) { return static_cast<std::size_t>(n); }

  // Trainable tensors only: each network keeps its own batch-norm running
  // statistics, so eval mode sees the statistics of the domain it encodes.
  std::vector<TieGroup> pair_groups(Net a, Net b, std::size_t layers) const {
    std::vector<TieGroup> out;
    const auto& na = net(a);
    const auto& nb = net(b);
    const std::string pa = na.name() + ".", pb = nb.name() + ".";
    for (const auto& [slot, id] : store_.slots()) {
      if (slot.compare(0, pa.size(), pa) != 0 || !store_.entry(id).trainable) continue;
      const auto rest = slot.substr(pa.size());
      const auto layer = std::stoul(rest.substr(0, rest.find('.')));
      if (layer < layers) out.push_back({slot, pb + rest});
    }
    return out;
  }

  void check_input(Net n, const Tensor<T>& x) const {
    const auto s = arch_.image_size;
    Shape want;
    switch (n) {
      case Net::f_x:
      case Net::f_y:
      case Net::d_x:
      case Net::d_y:
        want = {arch_.in_channels, s, s};
        break;
      case Net::g_x:
      case Net::g_y:
      case Net::h:
      case Net::d_z:
        want = arch_.latent_shape();
        break;
    }
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != want)
      throw ShapeError(std::string(net_name(n)) + ": expected input [B," + to_string(want).substr(1) + ", got " +
                       to_string(x.shape()));
  }

  ArchSpec arch_;
  SharingPlan plan_;
  ParamStore<T> store_;
  std::array<Network<T>, 8> nets_;
};

}  // namespace i2i
