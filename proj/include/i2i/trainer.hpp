#pragma once

// ADAM, the alternating critic/generator step, staged plans and freezing.

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "i2i/data.hpp"

namespace i2i {

struct TrainConfig {
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t batch_size = 64;
  std::int64_t total_steps = 2000;
  int n_critic = 1;
  std::uint64_t seed = 0;
  std::map<Net, double> lr_overrides;  // per network
  double clip_norm = 0.0;              // global-norm clip per phase, 0 = off

  void validate() const {
    if (!(learning_rate > 0)) throw ContractError("learning_rate must be > 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      throw ContractError("adam betas must lie in [0,1)");
    if (!(adam_eps > 0)) throw ContractError("adam_eps must be > 0");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (total_steps < 0) throw ContractError("total_steps must be >= 0");
    if (n_critic < 1) throw ContractError("n_critic must be >= 1");
    for (const auto& [n, lr] : lr_overrides)
      if (!(lr >= 0)) throw ContractError("lr override for " + std::string(net_name(n)) + " must be >= 0");
    if (!(clip_norm >= 0)) throw ContractError("clip_norm must be >= 0");
  }
};

template <class T>
struct AdamSlot {
  Tensor<T> m, v;
  std::int64_t t = 0;
};

/// Bias-corrected ADAM step, computed in double and stored back in T.
template <class T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& s, double lr, double beta1, double beta2,
                 double eps) {
  if (param.shape() != grad.shape())
    throw ShapeError("adam_update: param " + to_string(param.shape()) + " vs grad " + to_string(grad.shape()));
  if (s.m.numel() == 0 || s.m.shape() != param.shape()) {
    s.m = Tensor<T>::zeros(param.shape());
    s.v = Tensor<T>::zeros(param.shape());
    s.t = 0;
  }
  s.t += 1;
  const double c1 = 1.0 - std::pow(beta1, double(s.t));
  const double c2 = 1.0 - std::pow(beta2, double(s.t));
  auto& p = param.values();
  auto& m = s.m.values();
  auto& v = s.v.values();
  const auto& g = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = beta1 * double(m[i]) + (1 - beta1) * gi;
    const double vi = beta2 * double(v[i]) + (1 - beta2) * gi * gi;
    m[i] = T(mi);
    v[i] = T(vi);
    p[i] = T(double(p[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
  }
}

template <class T>
struct TrainState {
  std::int64_t step = 0;
  std::int64_t stages_entered = 0;  // number of stages whose entry actions ran
  std::map<std::string, AdamSlot<T>> adam;  // by parameter name
  std::mt19937_64 rng;
  std::deque<LossTerms> history;  // most recent last
  std::set<std::string> frozen;   // parameter names
  static constexpr std::size_t kHistory = 100;

  std::string rng_text() const {
    std::ostringstream os;
    os << rng;
    return os.str();
  }
  void set_rng_text(const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw ContractError("malformed RNG state");
  }
};

/// Stage index for a step given the plan fractions.
inline std::vector<std::int64_t> stage_boundaries(const StagePlan& plan, std::int64_t total_steps) {
  std::vector<std::int64_t> ends;
  double acc = 0;
  for (const auto& s : plan) {
    acc += s.fraction;
    ends.push_back(static_cast<std::int64_t>(std::llround(acc * double(total_steps))));
  }
  if (!ends.empty()) ends.back() = total_steps;
  return ends;
}

inline void validate_plan(const StagePlan& plan, bool encoders_tied) {
  if (plan.empty()) throw ContractError("stage plan is empty");
  bool tied = encoders_tied;
  for (const auto& s : plan) {
    if (!(s.fraction > 0)) throw ContractError("stage '" + s.name + "': fraction must be > 0");
    s.lambdas.validate();
    for (const auto& a : s.on_enter) {
      if (a.kind == StageAction::Kind::untie_encoders) {
        if (!tied) throw ContractError("stage '" + s.name + "': untie before tie");
        tied = false;
      } else if (a.kind == StageAction::Kind::tie_encoders) {
        tied = true;
      }
    }
  }
}

template <class T>
class Trainer {
 public:
  using BoundaryHook = std::function<void(std::size_t stage, const Trainer&)>;

  Trainer(ModelBundle<T>& bundle, const Dataset& source, const UnlabeledView& target, TrainConfig cfg, StagePlan plan,
          RoutingRules rules = {})
      : b_(bundle), source_(source), target_(target), cfg_(std::move(cfg)), plan_(std::move(plan)), rules_(rules) {
    cfg_.validate();
    validate_plan(plan_, b_.encoders_tied());
    if (!source_.labels) throw ContractError("source dataset has no labels");
    if (b_.arch().critic_norm == NormKind::instance)
      for (const auto& s : plan_)
        if (s.lambdas.tr > 0 && s.lambdas.gan_image == GanKind::wasserstein_gp)
          throw ContractError("instance-normalized critics cannot use the wasserstein_gp loss");
    if (cfg_.batch_size > source_.size() || cfg_.batch_size > target_.size())
      throw ContractError("batch_size exceeds a dataset size");
    state_.rng.seed(cfg_.seed ^ 0xC3A5C85C97CB3127ull);
    ends_ = stage_boundaries(plan_, cfg_.total_steps);
  }

  TrainState<T>& state() { return state_; }
  const TrainState<T>& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  const StagePlan& plan() const { return plan_; }
  ModelBundle<T>& bundle() { return b_; }
  bool done() const { return state_.step >= cfg_.total_steps; }
  void on_stage_boundary(BoundaryHook hook) { hook_ = std::move(hook); }

  std::size_t stage_at(std::int64_t step) const {
    for (std::size_t i = 0; i < ends_.size(); ++i)
      if (step < ends_[i]) return i;
    return ends_.size() - 1;
  }
  const LambdaConfig& current_lambdas() const { return plan_[stage_at(state_.step)].lambdas; }

  void freeze(Net n) {
    for (auto id : b_.param_ids(n)) state_.frozen.insert(b_.params().entry(id).name);
  }
  void unfreeze(Net n) {
    for (auto id : b_.param_ids(n)) state_.frozen.erase(b_.params().entry(id).name);
  }
  void freeze(const std::vector<std::string>& names) {
    for (const auto& s : names) {
      if (!b_.params().find_by_name(s)) throw ContractError("freeze: unknown parameter '" + s + "'");
      state_.frozen.insert(s);
    }
  }
  void unfreeze(const std::vector<std::string>& names) {
    for (const auto& s : names) {
      if (!b_.params().find_by_name(s)) throw ContractError("unfreeze: unknown parameter '" + s + "'");
      state_.frozen.erase(s);
    }
  }
  bool is_frozen(const std::string& name) const { return state_.frozen.count(name) > 0; }

  /// Run entry actions of every stage reached by the current step.
  void enter_stages() {
    const auto target = static_cast<std::int64_t>(stage_at(state_.step)) + 1;
    while (state_.stages_entered < target) {
      const auto i = static_cast<std::size_t>(state_.stages_entered);
      if (i > 0 && hook_) hook_(i, *this);
      for (const auto& a : plan_[i].on_enter) apply(a);
      ++state_.stages_entered;
    }
  }

  /// One critic phase (n_critic updates) and one generator update.
  LossTerms step() {
    if (done()) throw ContractError("training already finished");
    enter_stages();
    const LambdaConfig& lam = current_lambdas();
    const auto s = state_.step;
    auto src = batch_iter<T>(source_, cfg_.batch_size, cfg_.seed, s);
    auto tgt = batch_iter<T>(target_, cfg_.batch_size, cfg_.seed ^ 0x5DEECE66Dull, s);

    LossTerms rec;
    if (lam.z > 0 || lam.tr > 0) {
      const auto critic_ids = ids_of({Net::d_x, Net::d_y, Net::d_z});
      for (int k = 0; k < cfg_.n_critic; ++k) {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        ForwardMode gen_mode;
        gen_mode.update_running_stats = false;
        auto c = critic_losses(b_, src, tgt, lam, state_.rng, gen_mode);
        check_finite(c.total, "critic loss");
        rec.d_x = c.d_x, rec.d_y = c.d_y, rec.d_z = c.d_z;
        if (c.evaluated && c.total.tracked()) {
          backward(c.total);
          update(critic_ids);
        }
        b_.params().zero_grad();
      }
    }

    {
      const auto critic_ids = ids_of({Net::d_x, Net::d_y, Net::d_z});
      RequiresGradOff off(b_.params(), critic_ids);
      Tape<T> tape;
      TapeScope<T> scope(tape);
      Pathways<T> p(b_, &src, &tgt);
      auto total = q_total(p, lam, rules_);
      check_finite(total.total, "generator loss");
      const auto d = rec;
      rec = total.terms;
      rec.d_x = d.d_x, rec.d_y = d.d_y, rec.d_z = d.d_z;
      if (total.evaluated && total.total.tracked()) {
        backward(total.total);
        update(ids_of({Net::f_x, Net::f_y, Net::g_x, Net::g_y, Net::h}));
      }
      b_.params().zero_grad();
    }

    state_.history.push_back(rec);
    if (state_.history.size() > TrainState<T>::kHistory) state_.history.pop_front();
    ++state_.step;
    return rec;
  }

  /// Run to total_steps, calling `on_step(step_index, record)` after each.
  void run(const std::function<void(std::int64_t, const LossTerms&)>& on_step = {}) {
    while (!done()) {
      auto r = step();
      if (on_step) on_step(state_.step - 1, r);
    }
    enter_stages();
  }

 private:
  struct RequiresGradOff {
    RequiresGradOff(ParamStore<T>& s, const std::vector<ParamId>& ids) : store(s), ids(ids) {
      for (auto id : ids) store.entry(id).value.set_requires_grad(false);
    }
    ~RequiresGradOff() {
      for (auto id : ids) {
        auto& e = store.entry(id);
        e.value.set_requires_grad(e.trainable);
      }
    }
    ParamStore<T>& store;
    std::vector<ParamId> ids;
  };

  static void check_finite(const Tensor<T>& t, const char* what) {
    if (!all_finite<T>(t.data())) throw NumericError(std::string(what) + " is not finite");
  }

  std::vector<ParamId> ids_of(std::initializer_list<Net> nets) const {
    std::set<ParamId> ids;
    for (auto n : nets)
      for (auto id : b_.param_ids(n)) ids.insert(id);
    return {ids.begin(), ids.end()};
  }

  double lr_for(ParamId id) const {
    for (const auto& [n, lr] : cfg_.lr_overrides) {
      auto ids = b_.param_ids(n);
      if (std::find(ids.begin(), ids.end(), id) != ids.end()) return lr;
    }
    return cfg_.learning_rate;
  }

  void update(const std::vector<ParamId>& ids) {
    auto& store = b_.params();
    double scale = 1.0;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (auto id : ids) {
        auto& e = store.entry(id);
        if (!e.trainable || !e.value.has_grad()) continue;
        for (auto g : e.value.grad_storage()) sq += double(g) * double(g);
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    for (auto id : ids) {
      auto& e = store.entry(id);
      if (!e.trainable || !e.value.has_grad() || is_frozen(e.name)) continue;
      Tensor<T> g(e.value.shape(), e.value.grad());
      if (scale != 1.0)
        for (auto& v : g.values()) v = T(double(v) * scale);
      adam_update(e.value, g, state_.adam[e.name], lr_for(id), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
    }
  }

  void apply(const StageAction& a) {
    switch (a.kind) {
      case StageAction::Kind::untie_encoders:
        b_.untie_encoders();
        break;
      case StageAction::Kind::tie_encoders:
        b_.tie_encoders();
        break;
      case StageAction::Kind::freeze:
        for (auto n : a.nets) freeze(n);
        break;
      case StageAction::Kind::unfreeze:
        for (auto n : a.nets) unfreeze(n);
        break;
    }
  }

  ModelBundle<T>& b_;
  const Dataset& source_;
  UnlabeledView target_;
  TrainConfig cfg_;
  StagePlan plan_;
  RoutingRules rules_;
  TrainState<T> state_;
  std::vector<std::int64_t> ends_;
  BoundaryHook hook_;
};

}  // namespace i2i
