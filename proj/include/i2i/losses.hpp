#pragma once

// The loss terms of the unified adaptation objective, the GAN variants used
// for the latent and image discriminators, gradient routing, and the preset
// matrix that recovers earlier methods as coefficient settings.

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "i2i/models.hpp"

namespace i2i {

enum class GanKind { vanilla, least_squares, wasserstein_gp };

inline std::string_view gan_kind_name(GanKind k) {
  switch (k) {
    case GanKind::vanilla: return "vanilla";
    case GanKind::least_squares: return "least_squares";
    case GanKind::wasserstein_gp: return "wasserstein_gp";
  }
  return "?";
}
inline GanKind gan_kind_from_name(std::string_view s) {
  if (s == "vanilla") return GanKind::vanilla;
  if (s == "least_squares") return GanKind::least_squares;
  if (s == "wasserstein_gp") return GanKind::wasserstein_gp;
  throw ContractError("unknown GAN kind '" + std::string(s) + "'");
}

/// Mixing coefficients of the total objective.
struct LambdaConfig {
  double c = 0, z = 0, tr = 0, id_a = 0, id_b = 0, cyc = 0, trc = 0;
  GanKind gan_image = GanKind::wasserstein_gp;
  GanKind gan_feature = GanKind::least_squares;
  double gp_coefficient = 10.0;

  static constexpr std::array<const char*, 7> kNames = {"c", "z", "tr", "id_a", "id_b", "cyc", "trc"};
  std::array<double, 7> values() const { return {c, z, tr, id_a, id_b, cyc, trc}; }
  double& operator[](std::size_t i) {
    std::array<double*, 7> p = {&c, &z, &tr, &id_a, &id_b, &cyc, &trc};
    return *p.at(i);
  }

  void validate() const {
    auto v = values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!(v[i] >= 0.0)) throw ContractError(std::string("lambda.") + kNames[i] + " must be >= 0");
    if (!(gp_coefficient >= 0.0)) throw ContractError("gp_coefficient must be >= 0");
    if (gan_feature == GanKind::wasserstein_gp)
      throw ContractError("the latent discriminator supports vanilla or least_squares only");
  }
};

enum class FeatureGeneratorSide { target_only, both };

struct RoutingRules {
  FeatureGeneratorSide feature_adv_generator_side = FeatureGeneratorSide::target_only;
  bool trc_stop_before_second_encode = true;
};

enum class Side { discriminator, generator };

template <class T>
struct DomainBatch {
  Tensor<T> images;
  std::optional<std::vector<int>> labels;
};

namespace detail {

template <class T>
Tensor<T> constant_like(const Tensor<T>& t, T v) {
  return Tensor<T>::full(t.shape(), v);
}

// Per-sample GAN loss of scores against a constant label (1 = real/source).
template <class T>
Tensor<T> gan_label_loss(GanKind kind, const Tensor<T>& scores, int label) {
  switch (kind) {
    case GanKind::least_squares:
      return ops::mse_loss(scores, constant_like(scores, T(label)));
    case GanKind::vanilla: {
      // binary cross-entropy on logits == softmax CE over [0, s]
      auto logits = ops::concat<T>({Tensor<T>::zeros(scores.shape()), scores}, 1);
      return ops::softmax_cross_entropy(logits, std::vector<int>(static_cast<std::size_t>(scores.dim(0)), label));
    }
    case GanKind::wasserstein_gp:
      return label == 1 ? ops::scale(ops::mean(scores), -1.0) : ops::mean(scores);
  }
  throw ContractError("unknown GAN kind");
}

template <class T>
const std::vector<int>& require_labels(const DomainBatch<T>& b, const char* who) {
  if (!b.labels) throw ContractError(std::string(who) + ": source batch has no labels");
  return *b.labels;
}

}  // namespace detail

/// Lazily evaluated forward pathways shared by the loss terms within one
/// step, so each composite is computed (and its BN statistics updated) once.
template <class T>
class Pathways {
 public:
  Pathways(ModelBundle<T>& bundle, const DomainBatch<T>* source, const DomainBatch<T>* target,
           ForwardMode mode = {})
      : b_(bundle), src_(source), tgt_(target), mode_(mode) {}

  ModelBundle<T>& bundle() { return b_; }
  const DomainBatch<T>& source() const {
    if (!src_) throw ContractError("no source batch");
    return *src_;
  }
  const DomainBatch<T>& target() const {
    if (!tgt_) throw ContractError("no target batch");
    return *tgt_;
  }
  const Tensor<T>& x() const { return source().images; }
  const Tensor<T>& y() const { return target().images; }

  const Tensor<T>& z_x() { return get(z_x_, [&] { return run(Net::f_x, x()); }); }
  const Tensor<T>& z_y() { return get(z_y_, [&] { return run(Net::f_y, y()); }); }
  const Tensor<T>& rec_x() { return get(rec_x_, [&] { return run(Net::g_x, z_x()); }); }
  const Tensor<T>& rec_y() { return get(rec_y_, [&] { return run(Net::g_y, z_y()); }); }
  /// g_y(f_x(x)): source rendered in the target style
  const Tensor<T>& x2y() { return get(x2y_, [&] { return run(Net::g_y, z_x()); }); }
  /// g_x(f_y(y))
  const Tensor<T>& y2x() { return get(y2x_, [&] { return run(Net::g_x, z_y()); }); }
  const Tensor<T>& cyc_x() { return get(cyc_x_, [&] { return run(Net::g_x, run(Net::f_y, x2y())); }); }
  const Tensor<T>& cyc_y() { return get(cyc_y_, [&] { return run(Net::g_y, run(Net::f_x, y2x())); }); }

  Tensor<T> run(Net n, const Tensor<T>& in) { return b_.forward(n, in, mode_); }

 private:
  template <class F>
  const Tensor<T>& get(std::optional<Tensor<T>>& slot, F&& make) {
    if (!slot) slot = make();
    return *slot;
  }

  ModelBundle<T>& b_;
  const DomainBatch<T>* src_;
  const DomainBatch<T>* tgt_;
  ForwardMode mode_;
  std::optional<Tensor<T>> z_x_, z_y_, rec_x_, rec_y_, x2y_, y2x_, cyc_x_, cyc_y_;
};

// ---------------------------------------------------------------- terms

/// Mean softmax cross-entropy of h(f_x(x)) against the source labels.
template <class T>
Tensor<T> q_classification(Pathways<T>& p) {
  const auto& labels = detail::require_labels(p.source(), "q_classification");
  return ops::softmax_cross_entropy(p.run(Net::h, p.z_x()), labels);
}

/// L1 reconstruction, weighted per domain. A zero weight skips that branch.
template <class T>
std::optional<Tensor<T>> q_identity(Pathways<T>& p, double lambda_a, double lambda_b) {
  std::optional<Tensor<T>> out;
  if (lambda_a > 0) out = ops::scale(ops::l1_loss(p.rec_x(), p.x()), lambda_a);
  if (lambda_b > 0) {
    auto term = ops::scale(ops::l1_loss(p.rec_y(), p.y()), lambda_b);
    out = out ? ops::add(*out, term) : term;
  }
  return out;
}

/// Latent-space adversarial loss. Source features carry label 1, target 0.
/// The generator side with target_only routing pushes only target features
/// toward the source label.
template <class T>
Tensor<T> q_feature_adversarial(Pathways<T>& p, Side side, GanKind kind, const RoutingRules& rules = {}) {
  if (side == Side::discriminator) {
    auto ds = p.run(Net::d_z, p.z_x());
    auto dt = p.run(Net::d_z, p.z_y());
    return ops::scale(ops::add(detail::gan_label_loss(kind, ds, 1), detail::gan_label_loss(kind, dt, 0)), 0.5);
  }
  auto dt = p.run(Net::d_z, p.z_y());
  auto loss = detail::gan_label_loss(kind, dt, 1);
  if (rules.feature_adv_generator_side == FeatureGeneratorSide::both) {
    auto ds = p.run(Net::d_z, p.z_x());
    loss = ops::scale(ops::add(loss, detail::gan_label_loss(kind, ds, 0)), 0.5);
  }
  return loss;
}

/// Mean over samples of (||grad_x critic(x_hat)|| - 1)^2 at random
/// interpolates x_hat = eps*real + (1-eps)*fake, eps ~ U(0,1) per sample.
template <class T, class Critic>
Tensor<T> gradient_penalty(Critic&& critic, const Tensor<T>& real, const Tensor<T>& fake, std::mt19937_64& rng) {
  if (real.shape() != fake.shape())
    throw ShapeError("gradient_penalty: real " + to_string(real.shape()) + " vs fake " + to_string(fake.shape()));
  const auto B = real.dim(0);
  const auto F = real.numel() / B;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<T> mix(real.values().size());
  for (std::int64_t b = 0; b < B; ++b) {
    const T eps = T(unif(rng));
    for (std::int64_t f = 0; f < F; ++f) {
      const auto i = b * F + f;
      mix[i] = eps * real.values()[i] + (T(1) - eps) * fake.values()[i];
    }
  }
  Tensor<T> x_hat(real.shape(), std::move(mix), true);
  Tensor<T> scores = critic(x_hat);
  Tensor<T> g = input_gradient(scores, x_hat);
  Tensor<T> norms = ops::norm2(g);
  return ops::mse_loss(norms, Tensor<T>::ones(norms.shape()));
}

template <class T, class Critic>
Tensor<T> gradient_penalty(Critic&& critic, const Tensor<T>& real, const Tensor<T>& fake, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gradient_penalty<T>(std::forward<Critic>(critic), real, fake, rng);
}

template <class T>
struct TranslationCriticLoss {
  Tensor<T> d_x;
  Tensor<T> d_y;
};

/// Critic-side translation losses for both directions: d_y judges g_y(f_x(x))
/// against real y, d_x judges g_x(f_y(y)) against real x. Fakes are detached.
template <class T>
TranslationCriticLoss<T> q_translation_critic(Pathways<T>& p, const LambdaConfig& cfg, std::mt19937_64& rng,
                                              std::optional<Tensor<T>> fake_y = {},
                                              std::optional<Tensor<T>> fake_x = {}) {
  if (!fake_y) fake_y = stop_gradient(p.x2y());
  if (!fake_x) fake_x = stop_gradient(p.y2x());
  auto one = [&](Net critic, const Tensor<T>& real, const Tensor<T>& fake) {
    auto d_real = p.run(critic, real);
    auto d_fake = p.run(critic, fake);
    if (cfg.gan_image == GanKind::wasserstein_gp) {
      auto w = ops::sub(ops::mean(d_fake), ops::mean(d_real));
      auto gp = gradient_penalty<T>([&](const Tensor<T>& v) { return p.run(critic, v); }, real, fake, rng);
      return ops::add(w, ops::scale(gp, cfg.gp_coefficient));
    }
    return ops::scale(ops::add(detail::gan_label_loss(cfg.gan_image, d_real, 1),
                               detail::gan_label_loss(cfg.gan_image, d_fake, 0)),
                      0.5);
  };
  TranslationCriticLoss<T> out;
  out.d_y = one(Net::d_y, p.y(), *fake_y);
  out.d_x = one(Net::d_x, p.x(), *fake_x);
  return out;
}

/// Generator-side translation loss summed over both directions.
template <class T>
Tensor<T> q_translation_generator(Pathways<T>& p, GanKind kind) {
  auto sy = p.run(Net::d_y, p.x2y());
  auto sx = p.run(Net::d_x, p.y2x());
  return ops::add(detail::gan_label_loss(kind, sy, 1), detail::gan_label_loss(kind, sx, 1));
}

template <class T>
Tensor<T> q_translation_adversarial(Pathways<T>& p, Side side, const LambdaConfig& cfg, std::uint64_t seed = 0) {
  if (side == Side::generator) return q_translation_generator(p, cfg.gan_image);
  std::mt19937_64 rng(seed);
  auto c = q_translation_critic(p, cfg, rng);
  return ops::add(c.d_x, c.d_y);
}

/// L1(g_x(f_y(g_y(f_x(x)))), x) + L1(g_y(f_x(g_x(f_y(y)))), y)
template <class T>
Tensor<T> q_cycle(Pathways<T>& p) {
  return ops::add(ops::l1_loss(p.cyc_x(), p.x()), ops::l1_loss(p.cyc_y(), p.y()));
}

/// Classification of source translations through the target encoder. With
/// the default routing only f_y and h receive gradient.
template <class T>
Tensor<T> q_translated_classification(Pathways<T>& p, const RoutingRules& rules = {}) {
  const auto& labels = detail::require_labels(p.source(), "q_translated_classification");
  Tensor<T> translated = rules.trc_stop_before_second_encode ? stop_gradient(p.x2y()) : p.x2y();
  return ops::softmax_cross_entropy(p.run(Net::h, p.run(Net::f_y, translated)), labels);
}

// ---------------------------------------------------------------- totals

struct LossTerms {
  double q_c = 0, q_z = 0, q_tr = 0, q_id_a = 0, q_id_b = 0, q_cyc = 0, q_trc = 0, total = 0;
  double d_x = 0, d_y = 0, d_z = 0;
};

template <class T>
struct TotalLoss {
  Tensor<T> total;
  LossTerms terms;
  bool evaluated = false;  // false when every coefficient is zero
};

/// Weighted generator-side objective. Terms with a zero coefficient are not
/// evaluated at all.
template <class T>
TotalLoss<T> q_total(Pathways<T>& p, const LambdaConfig& cfg, const RoutingRules& rules = {}) {
  TotalLoss<T> out;
  std::optional<Tensor<T>> acc;
  auto push = [&](const Tensor<T>& term, double lambda) {
    auto weighted = lambda == 1.0 ? term : ops::scale(term, lambda);
    acc = acc ? ops::add(*acc, weighted) : weighted;
  };
  if (cfg.c > 0) {
    auto t = q_classification(p);
    out.terms.q_c = double(t.item());
    push(t, cfg.c);
  }
  if (cfg.z > 0) {
    auto t = q_feature_adversarial(p, Side::generator, cfg.gan_feature, rules);
    out.terms.q_z = double(t.item());
    push(t, cfg.z);
  }
  if (cfg.tr > 0) {
    auto t = q_translation_generator(p, cfg.gan_image);
    out.terms.q_tr = double(t.item());
    push(t, cfg.tr);
  }
  if (cfg.id_a > 0) {
    auto t = ops::l1_loss(p.rec_x(), p.x());
    out.terms.q_id_a = double(t.item());
    push(t, cfg.id_a);
  }
  if (cfg.id_b > 0) {
    auto t = ops::l1_loss(p.rec_y(), p.y());
    out.terms.q_id_b = double(t.item());
    push(t, cfg.id_b);
  }
  if (cfg.cyc > 0) {
    auto t = q_cycle(p);
    out.terms.q_cyc = double(t.item());
    push(t, cfg.cyc);
  }
  if (cfg.trc > 0) {
    auto t = q_translated_classification(p, rules);
    out.terms.q_trc = double(t.item());
    push(t, cfg.trc);
  }
  out.evaluated = acc.has_value();
  out.total = acc ? *acc : Tensor<T>::scalar(T(0));
  out.terms.total = double(out.total.item());
  return out;
}

template <class T>
struct CriticLoss {
  Tensor<T> total;
  double d_x = 0, d_y = 0, d_z = 0;
  bool evaluated = false;
};

/// Discriminator-side losses for every active adversarial term. Generator
/// outputs are computed without recording and enter as constants.
template <class T>
CriticLoss<T> critic_losses(ModelBundle<T>& bundle, const DomainBatch<T>& source, const DomainBatch<T>& target,
                            const LambdaConfig& cfg, std::mt19937_64& rng, const ForwardMode& gen_mode) {
  CriticLoss<T> out;
  if (cfg.z <= 0 && cfg.tr <= 0) return out;
  DomainBatch<T> src{}, tgt{};
  std::optional<Tensor<T>> fake_x, fake_y;
  {
    NoGradGuard guard;
    Pathways<T> gen(bundle, &source, &target, gen_mode);
    if (cfg.z > 0) {
      src.images = stop_gradient(gen.z_x());
      tgt.images = stop_gradient(gen.z_y());
    }
    if (cfg.tr > 0) {
      fake_y = stop_gradient(gen.x2y());
      fake_x = stop_gradient(gen.y2x());
    }
  }
  std::optional<Tensor<T>> acc;
  if (cfg.z > 0) {
    auto ds = bundle.forward(Net::d_z, src.images);
    auto dt = bundle.forward(Net::d_z, tgt.images);
    auto l = ops::scale(ops::add(detail::gan_label_loss(cfg.gan_feature, ds, 1),
                                 detail::gan_label_loss(cfg.gan_feature, dt, 0)),
                        0.5);
    out.d_z = double(l.item());
    acc = l;
  }
  if (cfg.tr > 0) {
    Pathways<T> crit(bundle, &source, &target);
    auto c = q_translation_critic(crit, cfg, rng, fake_y, fake_x);
    out.d_x = double(c.d_x.item());
    out.d_y = double(c.d_y.item());
    auto both = ops::add(c.d_x, c.d_y);
    acc = acc ? ops::add(*acc, both) : both;
  }
  out.evaluated = acc.has_value();
  out.total = acc ? *acc : Tensor<T>::scalar(T(0));
  return out;
}

// ---------------------------------------------------------------- presets

struct StageAction {
  enum class Kind { untie_encoders, tie_encoders, freeze, unfreeze } kind;
  std::vector<Net> nets;
};

struct Stage {
  std::string name;
  double fraction = 1.0;  // share of total_steps
  LambdaConfig lambdas;
  std::vector<StageAction> on_enter;
};

using StagePlan = std::vector<Stage>;

struct Preset {
  std::string name;
  std::string method;
  LambdaConfig lambdas;
  std::array<bool, 7> active{};
  StagePlan plan;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"source_only", "fcns_wild", "adda", "drcn", "cyclegan", "i2i_full"};
  return names;
}

/// Coefficient settings recovering earlier methods. Active coefficients take
/// the digit-experiment values (1.0, 0.2, 0.02, 0.1, 0.1, 0.05) and 0.1 for
/// the translated classification term.
inline Preset preset(const std::string& name) {
  constexpr std::array<double, 7> kValues = {1.0, 0.2, 0.02, 0.1, 0.1, 0.05, 0.1};
  auto make = [&](std::string method, std::array<bool, 7> active) {
    Preset p;
    p.name = name;
    p.method = std::move(method);
    p.active = active;
    for (std::size_t i = 0; i < 7; ++i) p.lambdas[i] = active[i] ? kValues[i] : 0.0;
    p.plan = {Stage{"main", 1.0, p.lambdas, {}}};
    return p;
  };
  //                              c     z      tr     idA    idB    cyc    trc
  if (name == "source_only") return make("Source only", {true, false, false, false, false, false, false});
  if (name == "fcns_wild") return make("FCNs in the wild", {true, true, false, false, false, false, false});
  if (name == "drcn") return make("DRCN", {true, false, false, false, true, false, false});
  if (name == "cyclegan") return make("CycleGAN", {false, false, true, false, false, true, false});
  if (name == "i2i_full") return make("I2I Adapt", {true, true, true, true, true, true, true});
  if (name == "adda") {
    Preset p = make("ADDA", {true, true, false, false, false, false, false});
    LambdaConfig stage1 = p.lambdas, stage2 = p.lambdas;
    stage1.z = 0.0;
    stage2.c = 0.0;
    p.plan = {Stage{"source", 0.5, stage1, {}},
              Stage{"adapt", 0.5, stage2,
                    {StageAction{StageAction::Kind::untie_encoders, {}},
                     StageAction{StageAction::Kind::freeze, {Net::f_x}}}}};
    return p;
  }
  throw ContractError("unknown preset '" + name + "'");
}

/// Networks whose parameters can receive gradient under a coefficient set.
inline std::array<bool, 8> reachable_networks(const LambdaConfig& cfg, const RoutingRules& rules = {}) {
  std::array<bool, 8> r{};
  auto on = [&](Net n) { r[static_cast<int>(n)] = true; };
  if (cfg.c > 0) on(Net::f_x), on(Net::h);
  if (cfg.z > 0) {
    on(Net::f_y), on(Net::d_z);
    if (rules.feature_adv_generator_side == FeatureGeneratorSide::both) on(Net::f_x);
  }
  if (cfg.tr > 0) on(Net::f_x), on(Net::f_y), on(Net::g_x), on(Net::g_y), on(Net::d_x), on(Net::d_y);
  if (cfg.id_a > 0) on(Net::f_x), on(Net::g_x);
  if (cfg.id_b > 0) on(Net::f_y), on(Net::g_y);
  if (cfg.cyc > 0) on(Net::f_x), on(Net::f_y), on(Net::g_x), on(Net::g_y);
  if (cfg.trc > 0) {
    on(Net::f_y), on(Net::h);
    if (!rules.trc_stop_before_second_encode) on(Net::f_x), on(Net::g_y);
  }
  return r;
}

}  // namespace i2i
