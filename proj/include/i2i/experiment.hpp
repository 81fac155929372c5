#pragma once

// End-to-end runs: data from a config, training with periodic evaluation,
// and the run-directory artifacts.

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "i2i/config.hpp"
#include "i2i/io.hpp"
#include "i2i/metrics.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace i2i {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS; training reallocates the same sizes every step and page faults
/// otherwise dominate the small kernels. Call once from main.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

// ---------------------------------------------------------------- data

inline Dataset load_idx_split(const IdxSource& s, std::int64_t num_classes, std::uint64_t seed, const std::string& domain) {
  Dataset ds = preprocess(load_idx(s.images, s.labels, domain, num_classes), 32);
  if (s.limit > 0 && s.limit < ds.size()) {
    auto perm = epoch_permutation(ds.size(), seed ^ fnv1a(domain), 0);
    perm.resize(static_cast<std::size_t>(s.limit));
    std::sort(perm.begin(), perm.end());
    Dataset sub = ds;
    sub.shape[0] = s.limit;
    sub.images.clear();
    std::vector<int> labels;
    const auto f = ds.image_numel();
    for (auto i : perm) {
      sub.images.insert(sub.images.end(), ds.images.begin() + i * f, ds.images.begin() + (i + 1) * f);
      labels.push_back((*ds.labels)[static_cast<std::size_t>(i)]);
    }
    sub.labels = std::move(labels);
    ds = std::move(sub);
  }
  return ds;
}

/// Training and test splits for both domains. IDX files are preprocessed to
/// 1x32x32 in [-1,1].
inline DomainPair load_domain_pair(const DatasetConfig& d) {
  if (d.kind == "synthetic") return synth_domain_pair(d.synthetic);
  DomainPair p;
  p.source = load_idx_split(d.source, d.num_classes, d.subsample_seed, "source");
  p.target = load_idx_split(d.target, d.num_classes, d.subsample_seed, "target");
  p.source_test = load_idx_split(d.source_test, d.num_classes, d.subsample_seed + 1, "source");
  p.target_test = load_idx_split(d.target_test, d.num_classes, d.subsample_seed + 1, "target");
  return p;
}

inline std::int64_t num_classes_of(const DatasetConfig& d) {
  return d.kind == "idx" ? d.num_classes : d.synthetic.num_classes;
}

// ---------------------------------------------------------------- evaluation

inline constexpr std::int64_t kEvalBatch = 250;

/// Latents of every row of `ds` through `encoder`, in eval mode.
template <class T>
Tensor<T> encode(ModelBundle<T>& bundle, const Dataset& ds, Net encoder) {
  NoGradGuard guard;
  ForwardMode eval{false, false};
  std::vector<T> out;
  Shape shape;
  for (std::int64_t b = 0; b < ds.size(); b += kEvalBatch) {
    auto z = bundle.forward(encoder, rows<T>(ds, b, std::min(ds.size(), b + kEvalBatch)), eval);
    out.insert(out.end(), z.values().begin(), z.values().end());
    shape = z.shape();
  }
  shape[0] = ds.size();
  return Tensor<T>(shape, std::move(out));
}

template <class T>
std::vector<int> predict(ModelBundle<T>& bundle, const Dataset& ds, Net encoder) {
  NoGradGuard guard;
  ForwardMode eval{false, false};
  std::vector<int> preds;
  for (std::int64_t b = 0; b < ds.size(); b += kEvalBatch) {
    auto z = bundle.forward(encoder, rows<T>(ds, b, std::min(ds.size(), b + kEvalBatch)), eval);
    auto logits = bundle.forward(Net::h, z, eval);
    const auto k = logits.dim(1);
    for (std::int64_t i = 0; i < logits.dim(0); ++i) {
      const auto* row = logits.values().data() + i * k;
      preds.push_back(int(std::max_element(row, row + k) - row));
    }
  }
  return preds;
}

/// Composite image maps exported as translation grids.
enum class Direction { x2y, y2x, identity, cycle };

inline Direction direction_from_name(const std::string& s) {
  if (s == "x2y") return Direction::x2y;
  if (s == "y2x") return Direction::y2x;
  if (s == "identity") return Direction::identity;
  if (s == "cycle") return Direction::cycle;
  throw ContractError("direction must be one of x2y, y2x, identity, cycle");
}
inline std::string direction_name(Direction d) {
  switch (d) {
    case Direction::x2y: return "x2y";
    case Direction::y2x: return "y2x";
    case Direction::identity: return "identity";
    case Direction::cycle: return "cycle";
  }
  return "?";
}
/// y2x reads target images; every other direction reads source images.
inline bool reads_target(Direction d) { return d == Direction::y2x; }

template <class T>
Tensor<T> translate(ModelBundle<T>& bundle, const Tensor<T>& images, Direction d) {
  NoGradGuard guard;
  ForwardMode eval{false, false};
  auto run = [&](Net n, const Tensor<T>& v) { return bundle.forward(n, v, eval); };
  switch (d) {
    case Direction::x2y: return run(Net::g_y, run(Net::f_x, images));
    case Direction::y2x: return run(Net::g_x, run(Net::f_y, images));
    case Direction::identity: return run(Net::g_x, run(Net::f_x, images));
    case Direction::cycle: return run(Net::g_x, run(Net::f_y, run(Net::g_y, run(Net::f_x, images))));
  }
  throw ContractError("unknown direction");
}

struct EvalReport {
  std::int64_t step = 0;
  std::string split;
  double accuracy = 0;
  std::vector<double> per_class;
  std::vector<std::vector<std::int64_t>> confusion;
  double probe = 0;
  LossTerms loss;
};

template <class T>
EvalReport evaluate_split(ModelBundle<T>& bundle, const Dataset& ds, Net encoder, std::int64_t step, std::string split) {
  if (!ds.labels) throw DataError("evaluation split '" + split + "' has no labels");
  EvalReport r;
  r.step = step;
  r.split = std::move(split);
  const auto preds = predict(bundle, ds, encoder);
  r.accuracy = accuracy(preds, *ds.labels);
  r.confusion = confusion_matrix(preds, *ds.labels, int(ds.num_classes));
  r.per_class = per_class_accuracy(r.confusion);
  return r;
}

/// Encoder that serves the target domain after training under `plan`: f_y
/// when some stage trains it, otherwise the source model f_x (a never-run
/// f_y still holds its initial batch-norm statistics).
inline Net target_encoder(const StagePlan& plan, const RoutingRules& rules = {}) {
  for (const auto& s : plan)
    if (reachable_networks(s.lambdas, rules)[static_cast<std::size_t>(Net::f_y)]) return Net::f_y;
  return Net::f_x;
}

/// Held-out accuracy of a logistic probe separating f_x(source) from
/// target latents.
template <class T>
double latent_probe(ModelBundle<T>& bundle, const Dataset& source, const Dataset& target, Net target_enc = Net::f_y) {
  return domain_probe(to_matrix(encode(bundle, source, Net::f_x)), to_matrix(encode(bundle, target, target_enc)));
}

/// Source split through f_x, target split through `target_enc`, shared
/// probe score.
template <class T>
std::vector<EvalReport> evaluate(ModelBundle<T>& bundle, const Dataset& source_test, const Dataset& target_test,
                                 std::int64_t step, Net target_enc = Net::f_y) {
  auto s = evaluate_split(bundle, source_test, Net::f_x, step, "source_test");
  auto t = evaluate_split(bundle, target_test, target_enc, step, "target_test");
  s.probe = t.probe = latent_probe(bundle, source_test, target_test, target_enc);
  return {s, t};
}

inline void print_report(std::ostream& os, const std::vector<EvalReport>& reports) {
  os << std::left << std::setw(8) << "step" << std::setw(14) << "split" << std::right << std::setw(10) << "accuracy"
     << std::setw(10) << "probe" << '\n';
  for (const auto& r : reports)
    os << std::left << std::setw(8) << r.step << std::setw(14) << r.split << std::right << std::fixed
       << std::setprecision(4) << std::setw(10) << r.accuracy << std::setw(10) << r.probe << '\n';
  for (const auto& r : reports) {
    os << r.split << " per-class:";
    for (double a : r.per_class) os << ' ' << std::fixed << std::setprecision(3) << a;
    os << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

inline MetricRecord metric_record(const EvalReport& r) { return {r.step, r.split, r.accuracy, r.probe}; }

/// Joint 2-D PCA of source and target latents.
template <class T>
std::vector<EmbeddingRecord> embeddings(ModelBundle<T>& bundle, const Dataset& source, const Dataset& target,
                                        Net target_enc = Net::f_y) {
  const Matrix zs = to_matrix(encode(bundle, source, Net::f_x));
  const Matrix zt = to_matrix(encode(bundle, target, target_enc));
  Matrix all(zs.rows() + zt.rows(), zs.cols());
  all << zs, zt;
  const auto proj = pca_project(all, 2);
  std::vector<EmbeddingRecord> out;
  for (Eigen::Index i = 0; i < all.rows(); ++i) {
    const bool src = i < zs.rows();
    const auto& ds = src ? source : target;
    const auto k = static_cast<std::size_t>(src ? i : i - zs.rows());
    out.push_back({src ? "source" : "target", ds.labels ? (*ds.labels)[k] : -1, proj.points(i, 0), proj.points(i, 1)});
  }
  return out;
}

// ---------------------------------------------------------------- runs

struct RunSummary {
  std::vector<EvalReport> initial, final;
  std::vector<LossRecord> losses;
  double seconds = 0;
  double target_accuracy() const { return final.at(1).accuracy; }
  double probe() const { return final.at(1).probe; }
};

/// One experiment: data, bundle and trainer built from a config. With an
/// empty run directory nothing is written to disk.
template <class T = float>
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg)
      : cfg_(std::move(cfg)),
        data_(load_domain_pair(cfg_.dataset)),
        bundle_(std::make_unique<ModelBundle<T>>(cfg_.model.spec(num_classes_of(cfg_.dataset)), cfg_.model.sharing,
                                                 cfg_.trainer.seed)) {
    for (const auto* ds : {&data_.source, &data_.target, &data_.source_test, &data_.target_test}) {
      ds->validate();
      const auto& a = bundle_->arch();
      if (ds->shape[1] != a.in_channels || ds->shape[2] != a.image_size || ds->shape[3] != a.image_size)
        throw DataError("dataset '" + ds->domain + "' has shape " + to_string(ds->shape) + ", model expects [N," +
                        std::to_string(a.in_channels) + "," + std::to_string(a.image_size) + "," +
                        std::to_string(a.image_size) + "]");
    }
    target_view_ = std::make_unique<UnlabeledView>(data_.target);
    trainer_ = std::make_unique<Trainer<T>>(*bundle_, data_.source, *target_view_, cfg_.trainer, cfg_.loss.plan(),
                                            cfg_.loss.routing);
    config_json_ = to_json(cfg_).dump(2);
    target_encoder_ = i2i::target_encoder(trainer_->plan(), cfg_.loss.routing);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& config_json() const { return config_json_; }
  const DomainPair& data() const { return data_; }
  ModelBundle<T>& bundle() { return *bundle_; }
  Trainer<T>& trainer() { return *trainer_; }
  Net target_encoder() const { return target_encoder_; }

  void resume(const Checkpoint& c) {
    // the output section may differ: a resumed run can write elsewhere
    auto strip = [](const std::string& text) {
      auto j = json::parse(text);
      j.erase("output");
      return j;
    };
    if (strip(c.config_json) != strip(config_json_))
      throw CheckpointError("checkpoint was written by a different configuration");
    restore_checkpoint(c, *bundle_, trainer_->state());
  }

  std::vector<EvalReport> evaluate_now() {
    return evaluate(*bundle_, data_.source_test, data_.target_test, trainer_->state().step, target_encoder_);
  }

  /// Train to total_steps. Writes config.json, losses.csv, metrics.csv,
  /// checkpoints, grids and embeddings.csv under `run_dir` when non-empty.
  RunSummary run(const std::string& run_dir, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    const bool write = !run_dir.empty();
    auto path = [&](const std::string& f) { return (fs::path(run_dir) / f).string(); };
    std::unique_ptr<CsvWriter> loss_csv, metric_csv;
    if (write) {
      std::error_code ec;
      fs::create_directories(run_dir, ec);
      auto out = open_out(path("config.json"));
      out << config_json_ << '\n';
      loss_csv = std::make_unique<CsvWriter>(path("losses.csv"), losses_header());
      metric_csv = std::make_unique<CsvWriter>(path("metrics.csv"), metrics_header());
      trainer_->on_stage_boundary([&](std::size_t stage, const Trainer<T>& tr) {
        save_checkpoint(path("stage" + std::to_string(stage) + ".i2ia"), *bundle_, tr.state(), config_json_);
      });
    }
    RunSummary summary;
    auto eval = [&] {
      auto r = evaluate_now();
      if (metric_csv) {
        for (const auto& e : r) metric_csv->write(metric_record(e));
        metric_csv->flush();
      }
      if (log) print_report(*log, r);
      return r;
    };
    summary.initial = eval();
    const auto& oc = cfg_.output;
    trainer_->run([&](std::int64_t step, const LossTerms& t) {
      summary.losses.push_back({step, t});
      if (loss_csv) loss_csv->write(LossRecord{step, t});
      const auto done = step + 1;
      if (oc.eval_every > 0 && done % oc.eval_every == 0 && done < cfg_.trainer.total_steps) eval();
      if (write && oc.checkpoint_every > 0 && done % oc.checkpoint_every == 0)
        save_checkpoint(path("step" + std::to_string(done) + ".i2ia"), *bundle_, trainer_->state(), config_json_);
    });
    if (loss_csv) loss_csv->flush();
    summary.final = eval();
    if (write) {
      save_checkpoint(path("checkpoint.i2ia"), *bundle_, trainer_->state(), config_json_);
      export_csv(embeddings(*bundle_, data_.source_test, data_.target_test, target_encoder_), path("embeddings.csv"));
      for (auto d : {Direction::x2y, Direction::y2x, Direction::identity, Direction::cycle})
        export_image_grid(translate(*bundle_, grid_inputs(d), d), path(direction_name(d) + ".pgm"));
      export_image_grid(grid_inputs(Direction::x2y), path("source.pgm"));
      export_image_grid(grid_inputs(Direction::y2x), path("target.pgm"));
    }
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return summary;
  }

  Tensor<T> grid_inputs(Direction d) const {
    const auto& ds = reads_target(d) ? data_.target_test : data_.source_test;
    return rows<T>(ds, 0, std::min(ds.size(), cfg_.output.grid_count));
  }

 private:
  ExperimentConfig cfg_;
  DomainPair data_;
  std::unique_ptr<ModelBundle<T>> bundle_;
  std::unique_ptr<UnlabeledView> target_view_;
  std::unique_ptr<Trainer<T>> trainer_;
  std::string config_json_;
  Net target_encoder_ = Net::f_y;
};

}  // namespace i2i
