#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace i2i;
using Catch::Approx;

namespace {

template <class T>
struct Fixture {
  DomainPair data;
  ModelBundle<T> bundle;
  DomainBatch<T> src, tgt;

  explicit Fixture(ArchSpec arch = test::tiny_arch(), std::int64_t batch = 4, std::uint64_t seed = 3)
      : data(synth_domain_pair(test::tiny_spec(seed, 16))),
        bundle(std::move(arch), {}, seed),
        src(test::batch_of<T>(data.source, 0, batch)),
        tgt(test::batch_of<T>(data.target, 0, batch)) {}

  Pathways<T> paths() { return Pathways<T>(bundle, &src, &tgt); }
};

template <class T>
void set_constant(ModelBundle<T>& b, const std::string& slot, double v) {
  for (auto& x : b.params().at(slot).values()) x = T(v);
}

template <class T>
bool grads_zero(ModelBundle<T>& b, Net n, bool skip_shared = false) {
  for (const auto& slot : b.net(n).slots(b.params())) {
    if (skip_shared && b.params().group_of(slot).size() > 1) continue;
    for (T g : b.params().at(slot).grad())
      if (g != T(0)) return false;
  }
  return true;
}

double ce_row(std::vector<double> logits, int label) {
  double m = *std::max_element(logits.begin(), logits.end()), s = 0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s) - logits[static_cast<std::size_t>(label)];
}

}  // namespace

TEST_CASE("cross-entropy examples") {
  CHECK(ops::softmax_cross_entropy(Tensor<double>({1, 2}, {0, 0}), {0}).item() == Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(ops::softmax_cross_entropy(Tensor<double>({1, 3}, {20, -20, -20}), {0}).item() < 1e-8);
  const std::vector<double> rows = {1.0, -0.5, 2.0, 0.3, 0.3, -1.2, -2.0, 0.0, 4.0};
  const std::vector<int> labels = {2, 0, 1};
  const double expect = (ce_row({1.0, -0.5, 2.0}, 2) + ce_row({0.3, 0.3, -1.2}, 0) + ce_row({-2.0, 0.0, 4.0}, 1)) / 3.0;
  CHECK(ops::softmax_cross_entropy(Tensor<double>({3, 3}, rows), labels).item() == Approx(expect).epsilon(1e-12));
}

TEST_CASE("q_classification is CE of h(f_x(x)) and needs labels") {
  Fixture<double> f;
  auto p = f.paths();
  const double q = q_classification(p).item();
  auto logits = f.bundle.forward(Net::h, f.bundle.forward(Net::f_x, f.src.images));
  CHECK(q == ops::softmax_cross_entropy(logits, *f.src.labels).item());
  DomainBatch<double> unlabeled{f.src.images, std::nullopt};
  Pathways<double> p2(f.bundle, &unlabeled, &f.tgt);
  CHECK_THROWS_AS(q_classification(p2), ContractError);
}

TEST_CASE("identity loss examples") {
  CHECK(ops::l1_loss(Tensor<double>::full({2, 3}, 0.25), Tensor<double>::full({2, 3}, 0.25)).item() == 0.0);
  CHECK(ops::l1_loss(Tensor<double>::zeros({2, 3}), Tensor<double>::ones({2, 3})).item() == 1.0);

  Fixture<double> f;
  auto p = f.paths();
  CHECK_FALSE(q_identity(p, 0.0, 0.0).has_value());
  const double both = q_identity(p, 0.1, 0.1)->item();
  const double a = ops::l1_loss(p.rec_x(), p.x()).item(), b = ops::l1_loss(p.rec_y(), p.y()).item();
  CHECK(both == Approx(0.1 * a + 0.1 * b).epsilon(1e-12));

  SECTION("lambda_idA = 0 leaves the source images out") {
    f.bundle.untie_encoders();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Pathways<double> p3(f.bundle, &f.src, &f.tgt);
    backward(*q_identity(p3, 0.0, 0.1));
    CHECK(grads_zero(f.bundle, Net::f_x));
    CHECK(grads_zero(f.bundle, Net::g_x, true));
    CHECK_FALSE(grads_zero(f.bundle, Net::g_y));
  }
}

TEST_CASE("least-squares feature adversarial examples") {
  auto ls = [](std::vector<double> s, int label) {
    const auto n = static_cast<std::int64_t>(s.size());
    return detail::gan_label_loss(GanKind::least_squares, Tensor<double>({n, 1}, std::move(s)), label);
  };
  CHECK(0.5 * (ls({1, 1}, 1).item() + ls({0, 0}, 0).item()) == 0.0);

  Fixture<double> f;
  set_constant(f.bundle, "d_z.3.weight", 0.0);
  set_constant(f.bundle, "d_z.3.bias", 0.5);
  auto p = f.paths();
  CHECK(q_feature_adversarial(p, Side::discriminator, GanKind::least_squares).item() == Approx(0.25).epsilon(1e-12));
  CHECK(q_feature_adversarial(p, Side::generator, GanKind::least_squares).item() == Approx(0.25).epsilon(1e-12));
}

TEST_CASE("feature adversarial routing") {
  Fixture<double> f;
  f.bundle.untie_encoders();
  SECTION("target_only: no gradient to f_x") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto p = f.paths();
    backward(q_feature_adversarial(p, Side::generator, GanKind::least_squares));
    CHECK(grads_zero(f.bundle, Net::f_x));
    CHECK_FALSE(grads_zero(f.bundle, Net::f_y));
  }
  SECTION("both sides: f_x receives gradient") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto p = f.paths();
    RoutingRules r;
    r.feature_adv_generator_side = FeatureGeneratorSide::both;
    backward(q_feature_adversarial(p, Side::generator, GanKind::least_squares, r));
    CHECK_FALSE(grads_zero(f.bundle, Net::f_x));
  }
}

TEST_CASE("generator loss falls exactly when target scores move toward the source label") {
  Fixture<double> f;
  auto mean_score_and_loss = [&] {
    auto p = f.paths();
    auto s = f.bundle.forward(Net::d_z, p.z_y());
    double m = 0;
    for (double v : s.values()) m += v;
    return std::pair{m / double(s.numel()), q_feature_adversarial(p, Side::generator, GanKind::least_squares).item()};
  };
  std::mt19937_64 rng(4);
  std::normal_distribution<double> step(0.0, 0.5);
  auto [m0, l0] = mean_score_and_loss();
  for (int trial = 0; trial < 50; ++trial) {
    const double d = step(rng);
    f.bundle.params().at("d_z.3.bias").values()[0] += d;
    auto [m1, l1] = mean_score_and_loss();
    INFO("trial " << trial << " shift " << d);
    CHECK((l1 < l0) == (std::abs(m1 - 1) < std::abs(m0 - 1)));
    m0 = m1, l0 = l1;
  }
}

TEST_CASE("gradient penalty of linear critics") {
  std::mt19937_64 rng(5);
  auto real = test::randn({3, 4}, rng), fake = test::randn({3, 4}, rng);
  auto u = test::randn({1, 4}, rng);
  double nu = 0;
  for (double v : u.values()) nu += v * v;
  for (auto& v : u.values()) v /= std::sqrt(nu);
  auto critic_u = [&](const Tensor<double>& x) { return ops::linear(x, u); };
  auto critic_2u = [&](const Tensor<double>& x) { return ops::linear(x, ops::scale(u, 2.0)); };
  Tape<double> tape;
  TapeScope<double> scope(tape);
  CHECK(gradient_penalty<double>(critic_u, real, fake, std::uint64_t{1}).item() < 1e-10);
  CHECK(gradient_penalty<double>(critic_2u, real, fake, std::uint64_t{1}).item() == Approx(1.0).margin(1e-6));
}

TEST_CASE("gradient penalty is never negative") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto w1 = test::randn({5, 4}, rng), w2 = test::randn({1, 5}, rng);
    auto critic = [&](const Tensor<double>& x) { return ops::linear(ops::leaky_relu(ops::linear(x, w1), 0.2), w2); };
    Tape<double> tape;
    TapeScope<double> scope(tape);
    CHECK(gradient_penalty<double>(critic, test::randn({3, 4}, rng), test::randn({3, 4}, rng), std::uint64_t(trial)).item() >= 0.0);
  }
}

TEST_CASE("a zero critic costs exactly the penalty coefficient") {
  Fixture<double> f;
  for (const char* c : {"d_x", "d_y"}) {
    set_constant(f.bundle, std::string(c) + ".3.weight", 0.0);
    set_constant(f.bundle, std::string(c) + ".3.bias", 0.0);
  }
  LambdaConfig cfg;
  cfg.tr = 1;
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto p = f.paths();
  std::mt19937_64 rng(1);
  auto c = q_translation_critic(p, cfg, rng);
  CHECK(c.d_x.item() == Approx(cfg.gp_coefficient).epsilon(1e-12));
  CHECK(c.d_y.item() == Approx(cfg.gp_coefficient).epsilon(1e-12));
}

TEST_CASE("generator side with a constant critic sends no gradient to the generators") {
  Fixture<double> f;
  for (const char* c : {"d_x", "d_y"}) {
    set_constant(f.bundle, std::string(c) + ".3.weight", 0.0);
    set_constant(f.bundle, std::string(c) + ".3.bias", 0.7);
  }
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto p = f.paths();
  backward(q_translation_generator(p, GanKind::wasserstein_gp));
  for (auto n : {Net::f_x, Net::g_x, Net::g_y}) CHECK(grads_zero(f.bundle, n));
}

TEST_CASE("linear critic loss matches the hand-computed estimate") {
  auto arch = test::tiny_arch();
  arch.critic = {};  // one 4x4/2 convolution then the spatial mean: D(x) = a.x + b
  Fixture<double> f(arch, 2);
  auto& st = f.bundle.params();
  const auto& w = st.at("d_y.0.weight").values();
  const std::int64_t S = 32, O = 16;
  std::vector<double> a(S * S, 0.0);
  for (std::int64_t oy = 0; oy < O; ++oy)
    for (std::int64_t ox = 0; ox < O; ++ox)
      for (std::int64_t ky = 0; ky < 4; ++ky)
        for (std::int64_t kx = 0; kx < 4; ++kx) {
          const auto iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
          if (iy >= 0 && iy < S && ix >= 0 && ix < S) a[iy * S + ix] += w[ky * 4 + kx] / double(O * O);
        }
  double na = 0;
  for (double v : a) na += v * v;
  na = std::sqrt(na);
  auto dot = [&](const Tensor<double>& x, std::int64_t b) {
    double s = 0;
    for (std::int64_t i = 0; i < S * S; ++i) s += a[i] * x.values()[b * S * S + i];
    return s;
  };
  std::mt19937_64 rng(9);
  auto fake_y = test::uniform({2, 1, S, S}, rng, -1, 1);
  const double w_est = 0.5 * (dot(fake_y, 0) + dot(fake_y, 1)) - 0.5 * (dot(f.tgt.images, 0) + dot(f.tgt.images, 1));
  LambdaConfig cfg;
  cfg.tr = 1;
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto p = f.paths();
  auto c = q_translation_critic(p, cfg, rng, std::optional<Tensor<double>>(fake_y), std::optional<Tensor<double>>(test::uniform({2, 1, S, S}, rng, -1, 1)));
  CHECK(c.d_y.item() == Approx(w_est + cfg.gp_coefficient * (na - 1) * (na - 1)).epsilon(1e-9));
}

TEST_CASE("cycle loss equals composing the four maps by hand") {
  Fixture<double> f;
  auto p = f.paths();
  const double q = q_cycle(p).item();
  auto& b = f.bundle;
  auto cx = b.forward(Net::g_x, b.forward(Net::f_y, b.forward(Net::g_y, b.forward(Net::f_x, f.src.images))));
  auto cy = b.forward(Net::g_y, b.forward(Net::f_x, b.forward(Net::g_x, b.forward(Net::f_y, f.tgt.images))));
  CHECK(q == ops::l1_loss(cx, f.src.images).item() + ops::l1_loss(cy, f.tgt.images).item());
}

TEST_CASE("translated classification routing") {
  Fixture<double> f;
  f.bundle.untie_encoders();
  SECTION("default: only f_y and h learn") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto p = f.paths();
    backward(q_translated_classification(p));
    CHECK(grads_zero(f.bundle, Net::f_x));
    CHECK(grads_zero(f.bundle, Net::g_y));
    CHECK_FALSE(grads_zero(f.bundle, Net::f_y));
    CHECK_FALSE(grads_zero(f.bundle, Net::h));
  }
  SECTION("routing disabled: g_y receives gradient") {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto p = f.paths();
    RoutingRules r;
    r.trc_stop_before_second_encode = false;
    backward(q_translated_classification(p, r));
    CHECK_FALSE(grads_zero(f.bundle, Net::g_y));
    CHECK_FALSE(grads_zero(f.bundle, Net::f_x));
  }
}

TEST_CASE("q_total with every coefficient zero records nothing") {
  Fixture<double> f;
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto p = f.paths();
  auto t = q_total(p, LambdaConfig{});
  CHECK_FALSE(t.evaluated);
  CHECK(t.total.item() == 0.0);
  CHECK(tape.empty());
}

TEST_CASE("q_total with lambda_c alone equals q_classification") {
  Fixture<double> f;
  LambdaConfig cfg;
  cfg.c = 1.0;
  auto p1 = f.paths();
  auto p2 = f.paths();
  CHECK(q_total(p1, cfg).total.item() == q_classification(p2).item());
}

TEST_CASE("q_total is linear in each coefficient") {
  Fixture<double> f;
  LambdaConfig base = preset("i2i_full").lambdas;
  auto total = [&](const LambdaConfig& c) {
    auto p = f.paths();
    return q_total(p, c);
  };
  const auto ref = total(base);
  const std::array<double, 7> terms = {ref.terms.q_c,    ref.terms.q_z,   ref.terms.q_tr, ref.terms.q_id_a,
                                       ref.terms.q_id_b, ref.terms.q_cyc, ref.terms.q_trc};
  for (std::size_t k = 0; k < 7; ++k) {
    LambdaConfig twice = base;
    twice[k] *= 2;
    INFO("lambda " << LambdaConfig::kNames[k]);
    CHECK(total(twice).total.item() - ref.total.item() == Approx(base.values()[k] * terms[k]).margin(1e-9));
  }
}

TEST_CASE("zeroed terms leave their networks without gradient") {
  std::mt19937_64 rng(21);
  std::bernoulli_distribution on(0.4);
  for (int trial = 0; trial < 12; ++trial) {
    Fixture<double> f(test::tiny_arch(), 4, 30 + trial);
    f.bundle.untie_encoders();
    LambdaConfig cfg = preset("i2i_full").lambdas;
    for (std::size_t k = 0; k < 7; ++k)
      if (!on(rng)) cfg[k] = 0;
    const auto reach = reachable_networks(cfg);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto p = f.paths();
    auto t = q_total(p, cfg);
    if (!t.evaluated) continue;
    backward(t.total);
    auto& store = f.bundle.params();
    for (int n = 0; n < 8; ++n) {
      if (reach[n]) continue;
      for (const auto& slot : f.bundle.net(Net(n)).slots(store)) {
        bool shared_with_reachable = false;
        for (const auto& other : store.group_of(slot))
          for (int m = 0; m < 8; ++m)
            if (reach[m] && other.rfind(std::string(net_name(Net(m))) + ".", 0) == 0) shared_with_reachable = true;
        if (shared_with_reachable) continue;
        INFO("trial " << trial << " slot " << slot);
        for (double g : store.at(slot).grad()) CHECK(g == 0.0);
      }
    }
  }
}

TEST_CASE("preset matrix") {
  auto drcn = preset("drcn").lambdas;
  CHECK(drcn.id_b > 0);
  CHECK(drcn.id_a == 0);
  CHECK(drcn.z == 0);
  CHECK(drcn.tr == 0);
  CHECK(drcn.cyc == 0);

  auto cg = preset("cyclegan").lambdas;
  CHECK(cg.c == 0);
  CHECK(cg.z == 0);
  CHECK(cg.id_a == 0);
  CHECK(cg.id_b == 0);
  CHECK(cg.tr > 0);
  CHECK(cg.cyc > 0);

  auto fw = preset("fcns_wild").lambdas;
  CHECK(fw.c > 0);
  CHECK(fw.z > 0);
  CHECK(fw.tr + fw.id_a + fw.id_b + fw.cyc + fw.trc == 0);

  auto full = preset("i2i_full").lambdas;
  CHECK(full.c == 1.0);
  CHECK(full.z == 0.2);
  CHECK(full.tr == 0.02);
  CHECK(full.id_a == 0.1);
  CHECK(full.id_b == 0.1);
  CHECK(full.cyc == 0.05);
  CHECK(full.gp_coefficient == 10.0);

  auto adda = preset("adda");
  REQUIRE(adda.plan.size() == 2);
  CHECK(adda.plan[0].lambdas.c > 0);
  CHECK(adda.plan[0].lambdas.z == 0);
  CHECK(adda.plan[1].lambdas.c == 0);
  CHECK(adda.plan[1].lambdas.z > 0);
  REQUIRE(adda.plan[1].on_enter.size() == 2);
  CHECK(adda.plan[1].on_enter[0].kind == StageAction::Kind::untie_encoders);
  CHECK(adda.plan[1].on_enter[1].kind == StageAction::Kind::freeze);
  CHECK(adda.plan[1].on_enter[1].nets == std::vector<Net>{Net::f_x});

  CHECK_THROWS_AS(preset("pixelda"), ContractError);
}

TEST_CASE("lambda validation") {
  LambdaConfig c;
  c.cyc = -0.1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  LambdaConfig w;
  w.gan_feature = GanKind::wasserstein_gp;
  CHECK_THROWS_AS(w.validate(), ContractError);
}
