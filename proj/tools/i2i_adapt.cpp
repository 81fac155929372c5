// i2i_adapt: train, evaluate and inspect domain adaptation runs.
//
// Exit codes: 0 ok, 1 configuration, 2 data or file I/O, 3 numeric abort.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "i2i/i2i.hpp"

namespace fs = std::filesystem;
using namespace i2i;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3 };

struct Options {
  std::string config;
  std::string checkpoint;
  std::string dataset;
  std::string direction = "x2y";
  std::string out;
};

ExperimentConfig config_with_env(ExperimentConfig c) {
  if (const char* dir = std::getenv("RUN_DIR"); dir && *dir) c.output.run_dir = dir;
  return c;
}

/// Experiment rebuilt from the configuration stored in a checkpoint.
struct Loaded {
  Checkpoint ckpt;
  std::unique_ptr<Experiment<float>> exp;
};

Loaded load_run(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  Loaded l;
  l.ckpt = load_checkpoint(path);
  l.exp = std::make_unique<Experiment<float>>(parse_config_text(l.ckpt.config_json));
  l.exp->resume(l.ckpt);
  return l;
}

/// `--dataset` is a split name of the run's data (source, target,
/// source_test, target_test) or DOMAIN:IMAGES[:LABELS] naming IDX files,
/// DOMAIN being source or target.
struct Selection {
  Dataset data;
  bool source = true;
};

Selection select_dataset(const Experiment<float>& e, const std::string& spec) {
  const auto& d = e.data();
  if (spec == "source") return {d.source, true};
  if (spec == "target") return {d.target, false};
  if (spec == "source_test") return {d.source_test, true};
  if (spec == "target_test") return {d.target_test, false};
  const auto colon = spec.find(':');
  if (colon == std::string::npos)
    throw ConfigError("--dataset: expected a split name or DOMAIN:IMAGES[:LABELS], got '" + spec + "'");
  const std::string domain = spec.substr(0, colon);
  if (domain != "source" && domain != "target") throw ConfigError("--dataset: domain must be source or target");
  std::string images = spec.substr(colon + 1), labels;
  if (const auto c2 = images.find(':'); c2 != std::string::npos) {
    labels = images.substr(c2 + 1);
    images.resize(c2);
  }
  const auto k = num_classes_of(e.config().dataset);
  return {preprocess(load_idx(images, labels, domain, k), 32), domain == "source"};
}

std::string out_path(const Options& o, const Experiment<float>& e, const std::string& fallback) {
  if (!o.out.empty()) return o.out;
  return (fs::path(e.config().output.run_dir) / fallback).string();
}

int cmd_train(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  auto cfg = config_with_env(load_config(o.config));
  if (!o.out.empty()) cfg.output.run_dir = o.out;
  Experiment<float> e(cfg);
  if (!o.checkpoint.empty()) e.resume(load_checkpoint(o.checkpoint));
  const auto& run_dir = cfg.output.run_dir;
  const auto s = e.run(run_dir, &std::cout);
  std::cout << "steps " << e.trainer().state().step << " in " << std::fixed << std::setprecision(1) << s.seconds
            << " s; artifacts in " << run_dir << '\n';
  return kOk;
}

int cmd_eval(const Options& o) {
  auto l = load_run(o.checkpoint);
  auto& e = *l.exp;
  std::vector<EvalReport> reports;
  const auto step = e.trainer().state().step;
  if (o.dataset.empty()) {
    reports = e.evaluate_now();
  } else {
    auto sel = select_dataset(e, o.dataset);
    auto r = evaluate_split(e.bundle(), sel.data, sel.source ? Net::f_x : e.target_encoder(), step, o.dataset);
    const auto& other = sel.source ? e.data().target_test : e.data().source_test;
    r.probe = sel.source ? latent_probe(e.bundle(), sel.data, other, e.target_encoder())
                         : latent_probe(e.bundle(), other, sel.data, e.target_encoder());
    reports.push_back(std::move(r));
  }
  print_report(std::cout, reports);
  std::vector<MetricRecord> rows;
  for (const auto& r : reports) rows.push_back(metric_record(r));
  const auto path = out_path(o, e, "eval_metrics.csv");
  export_csv(rows, path);
  std::cout << "wrote " << path << '\n';
  return kOk;
}

int cmd_translate(const Options& o) {
  auto l = load_run(o.checkpoint);
  auto& e = *l.exp;
  const auto dir = direction_from_name(o.direction);
  Tensor<float> input;
  if (o.dataset.empty()) {
    input = e.grid_inputs(dir);
  } else {
    auto sel = select_dataset(e, o.dataset);
    if (sel.source == reads_target(dir))
      throw ConfigError("--direction " + o.direction + " reads " + (reads_target(dir) ? "target" : "source") +
                        " images; --dataset names the other domain");
    input = rows<float>(sel.data, 0, std::min(sel.data.size(), e.config().output.grid_count));
  }
  const auto path = out_path(o, e, "translate_" + o.direction + ".pgm");
  export_image_grid(translate(e.bundle(), input, dir), path);
  std::cout << "wrote " << path << '\n';
  return kOk;
}

int cmd_presets() {
  const auto& names = LambdaConfig::kNames;
  std::cout << std::left << std::setw(13) << "preset" << std::setw(18) << "method";
  for (const char* n : names) std::cout << std::setw(6) << n;
  std::cout << "stages\n";
  for (const auto& name : preset_names()) {
    const auto p = preset(name);
    std::cout << std::setw(13) << name << std::setw(18) << p.method;
    for (std::size_t i = 0; i < names.size(); ++i) std::cout << std::setw(6) << (p.active[i] ? "x" : ".");
    std::cout << p.plan.size() << '\n';
  }
  return kOk;
}

int cmd_export_embeddings(const Options& o) {
  auto l = load_run(o.checkpoint);
  auto& e = *l.exp;
  const auto path = out_path(o, e, "embeddings.csv");
  export_csv(embeddings(e.bundle(), e.data().source_test, e.data().target_test, e.target_encoder()), path);
  std::cout << "wrote " << path << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Unsupervised domain adaptation through shared-latent image translation"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "train from a config file");
  train->add_option("--config", o.config, "experiment config (JSON)")->required();
  train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  train->add_option("--out", o.out, "run directory, replacing output.run_dir");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  eval->add_option("--dataset", o.dataset, "split name or DOMAIN:IMAGES[:LABELS]");
  eval->add_option("--out", o.out, "metrics CSV path");

  auto* tr = app.add_subcommand("translate", "export a translated image grid");
  tr->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  tr->add_option("--dataset", o.dataset, "split name or DOMAIN:IMAGES[:LABELS]");
  tr->add_option("--direction", o.direction, "x2y, y2x, identity or cycle")
      ->check(CLI::IsMember({"x2y", "y2x", "identity", "cycle"}));
  tr->add_option("--out", o.out, "pixmap path");

  app.add_subcommand("presets", "print the preset coefficient table");

  auto* emb = app.add_subcommand("export-embeddings", "write the 2-D latent projection");
  emb->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  emb->add_option("--out", o.out, "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*tr) return cmd_translate(o);
    if (app.got_subcommand("presets")) return cmd_presets();
    if (*emb) return cmd_export_embeddings(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
