#pragma once

// Experiment configuration: a strict JSON schema with field-path errors.

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "i2i/trainer.hpp"

namespace i2i {

using json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IdxSource {
  std::string images, labels;
  std::int64_t limit = 0;  // 0 keeps every sample
};

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic;
  IdxSource source, target, source_test, target_test;
  std::int64_t num_classes = 10;
  std::uint64_t subsample_seed = 0;
};

struct ModelConfig {
  std::string arch = "digits_small";
  NormKind critic_norm = NormKind::none;
  SharingPlan sharing;
  std::optional<std::vector<std::int64_t>> encoder, decoder, critic, feature_disc;

  ArchSpec spec(std::int64_t num_classes) const {
    ArchSpec a = ArchSpec::by_name(arch);
    a.num_classes = num_classes;
    a.critic_norm = critic_norm;
    if (encoder) a.encoder = *encoder;
    if (decoder) a.decoder = *decoder;
    if (critic) a.critic = *critic;
    if (feature_disc) a.feature_disc = *feature_disc;
    return a;
  }
};

struct LossConfig {
  std::optional<std::string> preset;
  std::map<std::string, double> lambda;  // overrides by coefficient name
  GanKind gan_image = GanKind::wasserstein_gp;
  GanKind gan_feature = GanKind::least_squares;
  double gp_coefficient = 10.0;
  RoutingRules routing;

  /// Stage plan with GAN kinds, gp coefficient and overrides applied.
  StagePlan plan() const {
    StagePlan p;
    if (preset) {
      p = i2i::preset(*preset).plan;
      if (!lambda.empty() && p.size() > 1)
        throw ConfigError("loss.lambda: overrides are not supported for the staged preset '" + *preset + "'");
    } else {
      p = {Stage{"main", 1.0, LambdaConfig{}, {}}};
    }
    for (auto& s : p) {
      for (const auto& [k, v] : lambda)
        for (std::size_t i = 0; i < LambdaConfig::kNames.size(); ++i)
          if (k == LambdaConfig::kNames[i]) s.lambdas[i] = v;
      s.lambdas.gan_image = gan_image;
      s.lambdas.gan_feature = gan_feature;
      s.lambdas.gp_coefficient = gp_coefficient;
    }
    return p;
  }
};

struct OutputConfig {
  std::string run_dir = "runs/default";
  std::int64_t eval_every = 0;        // 0: evaluate at start and end only
  std::int64_t checkpoint_every = 0;  // 0: stage boundaries and end only
  std::int64_t grid_count = 16;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  LossConfig loss;
  TrainConfig trainer;
  OutputConfig output;
};

// ---------------------------------------------------------------- parsing

namespace detail {

class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_or_root() + ": expected an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items())
      if (!ok.count(k)) throw ConfigError(child(k) + ": unknown key");
  }
  bool has(const std::string& k) const { return j_.contains(k); }
  std::string child(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  Node object(const std::string& k) const { return Node(j_.at(k), child(k)); }

  template <class U>
  void get(const std::string& k, U& out) const {
    if (!has(k)) return;
    const auto& v = j_.at(k);
    try {
      if constexpr (std::is_same_v<U, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<U>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<U>)
          if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<U>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<U, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<U>();
    } catch (const std::exception&) {
      throw ConfigError(child(k) + ": wrong type (" + std::string(v.type_name()) + ")");
    }
  }
  template <class U>
  void get_list(const std::string& k, std::vector<U>& out) const {
    if (!has(k)) return;
    const auto& v = j_.at(k);
    if (!v.is_array()) throw ConfigError(child(k) + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(child(k) + "[" + std::to_string(i) + "]: expected a number");
      out.push_back(v[i].get<U>());
    }
  }
  const json& raw() const { return j_; }
  std::string fail(const std::string& k, const std::string& msg) const { return child(k) + ": " + msg; }

 private:
  std::string path_or_root() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
};

template <class F>
auto enum_field(const Node& n, const std::string& k, F&& parse) {
  std::string s;
  n.get(k, s);
  try {
    return parse(s);
  } catch (const std::exception& e) {
    throw ConfigError(n.fail(k, e.what()));
  }
}

inline NormKind norm_from_name(const std::string& s) {
  if (s == "none") return NormKind::none;
  if (s == "instance") return NormKind::instance;
  throw ContractError("critic_norm must be none or instance, got '" + s + "'");
}
inline std::string norm_name(NormKind k) { return k == NormKind::instance ? "instance" : "none"; }

inline void parse_idx_source(const Node& n, IdxSource& out) {
  n.allow({"images", "labels", "limit"});
  n.get("images", out.images);
  n.get("labels", out.labels);
  n.get("limit", out.limit);
  if (out.images.empty()) throw ConfigError(n.fail("images", "required"));
  if (out.labels.empty()) throw ConfigError(n.fail("labels", "required"));
  if (out.limit < 0) throw ConfigError(n.fail("limit", "must be >= 0"));
}

inline void parse_synthetic(const Node& n, SyntheticSpec& s) {
  n.allow({"kind", "num_classes", "source_count", "target_count", "test_count", "rotation_deg", "invert",
           "gradient_amplitude", "noise_sigma", "jitter", "affine", "offset", "cluster_sigma", "radius", "seed"});
  if (n.has("kind")) {
    std::string k;
    n.get("kind", k);
    if (k == "shapes_images") s.kind = SynthKind::shapes_images;
    else if (k == "gaussian_2d") s.kind = SynthKind::gaussian_2d;
    else throw ConfigError(n.fail("kind", "must be shapes_images or gaussian_2d"));
  }
  n.get("num_classes", s.num_classes);
  n.get("source_count", s.source_count);
  n.get("target_count", s.target_count);
  n.get("test_count", s.test_count);
  n.get("rotation_deg", s.rotation_deg);
  n.get("invert", s.invert);
  n.get("gradient_amplitude", s.gradient_amplitude);
  n.get("noise_sigma", s.noise_sigma);
  n.get("jitter", s.jitter);
  n.get("cluster_sigma", s.cluster_sigma);
  n.get("radius", s.radius);
  n.get("seed", s.seed);
  std::vector<double> v;
  if (n.has("affine")) {
    n.get_list("affine", v);
    if (v.size() != 4) throw ConfigError(n.fail("affine", "expected 4 numbers"));
    std::copy(v.begin(), v.end(), s.affine.begin());
  }
  if (n.has("offset")) {
    n.get_list("offset", v);
    if (v.size() != 2) throw ConfigError(n.fail("offset", "expected 2 numbers"));
    std::copy(v.begin(), v.end(), s.offset.begin());
  }
  if (s.num_classes < 2) throw ConfigError(n.fail("num_classes", "must be >= 2"));
  if (s.kind == SynthKind::shapes_images && s.num_classes > static_cast<std::int64_t>(glyph_names().size()))
    throw ConfigError(n.fail("num_classes", "exceeds the glyph catalogue (" + std::to_string(glyph_names().size()) + ")"));
  for (auto [key, val] : {std::pair{"source_count", s.source_count}, {"target_count", s.target_count}, {"test_count", s.test_count}})
    if (val <= 0) throw ConfigError(n.fail(key, "must be > 0"));
  if (s.noise_sigma < 0) throw ConfigError(n.fail("noise_sigma", "must be >= 0"));
  if (s.jitter < 0) throw ConfigError(n.fail("jitter", "must be >= 0"));
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  using detail::Node;
  ExperimentConfig c;
  Node root(j, "");
  root.allow({"dataset", "model", "loss", "trainer", "output"});

  if (root.has("dataset")) {
    auto d = root.object("dataset");
    d.allow({"kind", "synthetic", "source", "target", "source_test", "target_test", "num_classes", "subsample_seed"});
    d.get("kind", c.dataset.kind);
    if (c.dataset.kind == "synthetic") {
      for (auto k : {"source", "target", "source_test", "target_test", "num_classes", "subsample_seed"})
        if (d.has(k)) throw ConfigError(d.fail(k, "only valid for kind idx"));
      if (d.has("synthetic")) detail::parse_synthetic(d.object("synthetic"), c.dataset.synthetic);
    } else if (c.dataset.kind == "idx") {
      if (d.has("synthetic")) throw ConfigError(d.fail("synthetic", "only valid for kind synthetic"));
      for (auto [k, dst] : {std::pair{"source", &c.dataset.source}, {"target", &c.dataset.target},
                            {"source_test", &c.dataset.source_test}, {"target_test", &c.dataset.target_test}}) {
        if (!d.has(k)) throw ConfigError(d.fail(k, "required for kind idx"));
        detail::parse_idx_source(d.object(k), *dst);
      }
      d.get("num_classes", c.dataset.num_classes);
      d.get("subsample_seed", c.dataset.subsample_seed);
      if (c.dataset.num_classes < 2 || c.dataset.num_classes > 256) throw ConfigError(d.fail("num_classes", "must be in [2,256]"));
    } else {
      throw ConfigError(d.fail("kind", "must be synthetic or idx"));
    }
  }

  if (root.has("model")) {
    auto m = root.object("model");
    m.allow({"arch", "critic_norm", "sharing", "encoder", "decoder", "critic", "feature_disc"});
    m.get("arch", c.model.arch);
    if (c.model.arch != "digits" && c.model.arch != "digits_small")
      throw ConfigError(m.fail("arch", "must be digits or digits_small"));
    if (m.has("critic_norm")) c.model.critic_norm = detail::enum_field(m, "critic_norm", detail::norm_from_name);
    if (m.has("sharing")) {
      auto s = m.object("sharing");
      s.allow({"tie_encoders", "shared_decoder_layers"});
      s.get("tie_encoders", c.model.sharing.tie_encoders);
      s.get("shared_decoder_layers", c.model.sharing.shared_decoder_layers);
      if (c.model.sharing.shared_decoder_layers < 0) throw ConfigError(s.fail("shared_decoder_layers", "must be >= 0"));
    }
    for (auto [k, dst] : {std::pair{"encoder", &c.model.encoder}, {"decoder", &c.model.decoder},
                          {"critic", &c.model.critic}, {"feature_disc", &c.model.feature_disc}}) {
      if (!m.has(k)) continue;
      std::vector<std::int64_t> v;
      m.get_list(k, v);
      for (auto w : v)
        if (w < 1) throw ConfigError(m.fail(k, "widths must be >= 1"));
      *dst = v;
    }
  }

  if (root.has("loss")) {
    auto l = root.object("loss");
    l.allow({"preset", "lambda", "gan_image", "gan_feature", "gp_coefficient", "routing"});
    if (l.has("preset")) {
      std::string p;
      l.get("preset", p);
      const auto& names = preset_names();
      if (std::find(names.begin(), names.end(), p) == names.end()) throw ConfigError(l.fail("preset", "unknown preset '" + p + "'"));
      c.loss.preset = p;
    }
    if (l.has("lambda")) {
      auto lam = l.object("lambda");
      lam.allow({"c", "z", "tr", "id_a", "id_b", "cyc", "trc"});
      for (auto k : LambdaConfig::kNames) {
        if (!lam.has(k)) continue;
        double v = 0;
        lam.get(k, v);
        if (!(v >= 0)) throw ConfigError(lam.fail(k, "must be >= 0"));
        c.loss.lambda[k] = v;
      }
    }
    if (l.has("gan_image")) c.loss.gan_image = detail::enum_field(l, "gan_image", gan_kind_from_name);
    if (l.has("gan_feature")) c.loss.gan_feature = detail::enum_field(l, "gan_feature", gan_kind_from_name);
    if (c.loss.gan_feature == GanKind::wasserstein_gp)
      throw ConfigError(l.fail("gan_feature", "must be vanilla or least_squares"));
    l.get("gp_coefficient", c.loss.gp_coefficient);
    if (!(c.loss.gp_coefficient >= 0)) throw ConfigError(l.fail("gp_coefficient", "must be >= 0"));
    if (l.has("routing")) {
      auto r = l.object("routing");
      r.allow({"feature_adv_generator_side", "trc_stop_before_second_encode"});
      if (r.has("feature_adv_generator_side")) {
        std::string s;
        r.get("feature_adv_generator_side", s);
        if (s == "target_only") c.loss.routing.feature_adv_generator_side = FeatureGeneratorSide::target_only;
        else if (s == "both") c.loss.routing.feature_adv_generator_side = FeatureGeneratorSide::both;
        else throw ConfigError(r.fail("feature_adv_generator_side", "must be target_only or both"));
      }
      r.get("trc_stop_before_second_encode", c.loss.routing.trc_stop_before_second_encode);
    }
  }

  if (root.has("trainer")) {
    auto t = root.object("trainer");
    t.allow({"learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "batch_size", "total_steps", "n_critic", "seed",
             "lr_overrides", "clip_norm"});
    auto& tc = c.trainer;
    t.get("learning_rate", tc.learning_rate);
    t.get("adam_beta1", tc.adam_beta1);
    t.get("adam_beta2", tc.adam_beta2);
    t.get("adam_eps", tc.adam_eps);
    t.get("batch_size", tc.batch_size);
    t.get("total_steps", tc.total_steps);
    t.get("n_critic", tc.n_critic);
    t.get("seed", tc.seed);
    t.get("clip_norm", tc.clip_norm);
    if (t.has("lr_overrides")) {
      auto o = t.object("lr_overrides");
      for (const auto& [k, v] : o.raw().items()) {
        Net n;
        try {
          n = net_from_name(k);
        } catch (const std::exception&) {
          throw ConfigError(o.child(k) + ": unknown network");
        }
        double lr = 0;
        o.get(k, lr);
        tc.lr_overrides[n] = lr;
      }
    }
    try {
      tc.validate();
    } catch (const ContractError& e) {
      throw ConfigError(std::string("trainer: ") + e.what());
    }
  }

  if (root.has("output")) {
    auto o = root.object("output");
    o.allow({"run_dir", "eval_every", "checkpoint_every", "grid_count"});
    o.get("run_dir", c.output.run_dir);
    o.get("eval_every", c.output.eval_every);
    o.get("checkpoint_every", c.output.checkpoint_every);
    o.get("grid_count", c.output.grid_count);
    if (c.output.eval_every < 0) throw ConfigError(o.fail("eval_every", "must be >= 0"));
    if (c.output.checkpoint_every < 0) throw ConfigError(o.fail("checkpoint_every", "must be >= 0"));
    if (c.output.grid_count < 1) throw ConfigError(o.fail("grid_count", "must be >= 1"));
  }

  // cross-field checks
  try {
    auto arch = c.model.spec(c.dataset.kind == "idx" ? c.dataset.num_classes : c.dataset.synthetic.num_classes);
    arch.validate();
    for (const auto& s : c.loss.plan()) {
      s.lambdas.validate();
      if (arch.critic_norm == NormKind::instance && s.lambdas.tr > 0 && s.lambdas.gan_image == GanKind::wasserstein_gp)
        throw ConfigError("model.critic_norm: instance normalization cannot be combined with the wasserstein_gp image loss");
    }
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (c.dataset.kind == "synthetic" && c.dataset.synthetic.kind != SynthKind::shapes_images)
    throw ConfigError("dataset.synthetic.kind: only shapes_images produces images for the model");
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config '" + path + "'");
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_config_text(text);
}

/// Fully resolved configuration; parse_config(to_json(c)) reproduces c.
inline json to_json(const ExperimentConfig& c) {
  json j;
  auto& d = j["dataset"];
  d["kind"] = c.dataset.kind;
  if (c.dataset.kind == "synthetic") {
    const auto& s = c.dataset.synthetic;
    d["synthetic"] = {{"kind", s.kind == SynthKind::shapes_images ? "shapes_images" : "gaussian_2d"},
                      {"num_classes", s.num_classes},
                      {"source_count", s.source_count},
                      {"target_count", s.target_count},
                      {"test_count", s.test_count},
                      {"rotation_deg", s.rotation_deg},
                      {"invert", s.invert},
                      {"gradient_amplitude", s.gradient_amplitude},
                      {"noise_sigma", s.noise_sigma},
                      {"jitter", s.jitter},
                      {"affine", s.affine},
                      {"offset", s.offset},
                      {"cluster_sigma", s.cluster_sigma},
                      {"radius", s.radius},
                      {"seed", s.seed}};
  } else {
    auto src = [](const IdxSource& s) { return json{{"images", s.images}, {"labels", s.labels}, {"limit", s.limit}}; };
    d["source"] = src(c.dataset.source);
    d["target"] = src(c.dataset.target);
    d["source_test"] = src(c.dataset.source_test);
    d["target_test"] = src(c.dataset.target_test);
    d["num_classes"] = c.dataset.num_classes;
    d["subsample_seed"] = c.dataset.subsample_seed;
  }
  auto& m = j["model"];
  m["arch"] = c.model.arch;
  m["critic_norm"] = detail::norm_name(c.model.critic_norm);
  m["sharing"] = {{"tie_encoders", c.model.sharing.tie_encoders},
                  {"shared_decoder_layers", c.model.sharing.shared_decoder_layers}};
  if (c.model.encoder) m["encoder"] = *c.model.encoder;
  if (c.model.decoder) m["decoder"] = *c.model.decoder;
  if (c.model.critic) m["critic"] = *c.model.critic;
  if (c.model.feature_disc) m["feature_disc"] = *c.model.feature_disc;
  auto& l = j["loss"];
  if (c.loss.preset) l["preset"] = *c.loss.preset;
  l["lambda"] = json::object();
  for (const auto& [k, v] : c.loss.lambda) l["lambda"][k] = v;
  l["gan_image"] = std::string(gan_kind_name(c.loss.gan_image));
  l["gan_feature"] = std::string(gan_kind_name(c.loss.gan_feature));
  l["gp_coefficient"] = c.loss.gp_coefficient;
  l["routing"] = {{"feature_adv_generator_side", c.loss.routing.feature_adv_generator_side == FeatureGeneratorSide::both
                                                     ? "both"
                                                     : "target_only"},
                  {"trc_stop_before_second_encode", c.loss.routing.trc_stop_before_second_encode}};
  const auto& t = c.trainer;
  auto& tj = j["trainer"];
  tj = {{"learning_rate", t.learning_rate}, {"adam_beta1", t.adam_beta1}, {"adam_beta2", t.adam_beta2},
        {"adam_eps", t.adam_eps},           {"batch_size", t.batch_size}, {"total_steps", t.total_steps},
        {"n_critic", t.n_critic},           {"seed", t.seed},             {"clip_norm", t.clip_norm}};
  tj["lr_overrides"] = json::object();
  for (const auto& [n, lr] : t.lr_overrides) tj["lr_overrides"][std::string(net_name(n))] = lr;
  j["output"] = {{"run_dir", c.output.run_dir},
                 {"eval_every", c.output.eval_every},
                 {"checkpoint_every", c.output.checkpoint_every},
                 {"grid_count", c.output.grid_count}};
  return j;
}

}  // namespace i2i
