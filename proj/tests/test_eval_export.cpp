#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace i2i;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("i2i_eval_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

Matrix gaussian(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d, double shift) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = g(rng) + (j == 0 ? shift : 0.0);
  return m;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("accuracy examples") {
  CHECK(accuracy({0, 1, 2, 3}, {0, 1, 2, 0}) == 0.75);
  CHECK(accuracy({1}, {1}) == 1.0);
  CHECK_THROWS_AS(accuracy({1, 2}, {1}), ContractError);
  CHECK_THROWS_AS(accuracy({}, {}), ContractError);
}

TEST_CASE("accuracy agrees with a counting oracle") {
  std::mt19937_64 rng(101);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 1 + rng() % 300;
    const int k = 2 + int(rng() % 9);
    auto p = random_labels(rng, n, k), t = random_labels(rng, n, k);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (p[i] == t[i]) ++hit;
    CHECK(accuracy(p, t) == double(hit) / double(n));
  }
}

TEST_CASE("confusion rows sum to class counts") {
  std::mt19937_64 rng(5);
  auto p = random_labels(rng, 500, 4), t = random_labels(rng, 500, 4);
  auto m = confusion_matrix(p, t, 4);
  std::int64_t diag = 0;
  for (int c = 0; c < 4; ++c) {
    CHECK(std::accumulate(m[c].begin(), m[c].end(), std::int64_t{0}) == std::count(t.begin(), t.end(), c));
    diag += m[c][c];
  }
  CHECK(double(diag) / 500.0 == accuracy(p, t));
  auto pc = per_class_accuracy(confusion_matrix({0, 0}, {0, 0}, 2));
  CHECK(pc[0] == 1.0);
  CHECK(std::isnan(pc[1]));
}

TEST_CASE("mIoU examples") {
  // class 0: inter 1, union 3; class 1: inter 1, union 3
  CHECK(miou({0, 1, 1, 0}, {0, 1, 0, 1}, 2) == Approx(1.0 / 3.0));
  // class 0 absent from both masks is left out of the mean
  CHECK(miou({1, 2, 2}, {1, 2, 1}, 3) == Approx((0.5 + 0.5) / 2));
  CHECK(miou({2, 2}, {2, 2}, 3) == 1.0);
  CHECK_THROWS_AS(miou({0, 3}, {0, 1}, 3), ContractError);
  CHECK_THROWS_AS(miou({0}, {0, 1}, 2), ContractError);
}

TEST_CASE("mIoU agrees with a set-based oracle") {
  std::mt19937_64 rng(202);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 1 + rng() % 400;
    const int k = 2 + int(rng() % 6);
    auto p = random_labels(rng, n, k), t = random_labels(rng, n, k);
    double sum = 0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
      std::set<std::size_t> ps, ts, un;
      for (std::size_t i = 0; i < n; ++i) {
        if (p[i] == c) ps.insert(i);
        if (t[i] == c) ts.insert(i);
      }
      std::set_union(ps.begin(), ps.end(), ts.begin(), ts.end(), std::inserter(un, un.end()));
      if (un.empty()) continue;
      std::size_t inter = 0;
      for (auto i : ps) inter += ts.count(i);
      sum += double(inter) / double(un.size());
      ++present;
    }
    CHECK(miou(p, t, k) == Approx(sum / present).epsilon(1e-12));
  }
}

TEST_CASE("domain probe is near chance on one distribution and near one when separated") {
  std::mt19937_64 rng(9);
  const double same = domain_probe(gaussian(rng, 400, 5, 0.0), gaussian(rng, 400, 5, 0.0));
  CHECK(std::abs(same - 0.5) < 0.1);
  CHECK(domain_probe(gaussian(rng, 400, 5, 0.0), gaussian(rng, 400, 5, 10.0)) > 0.99);
  CHECK_THROWS_AS(domain_probe(Matrix(0, 5), gaussian(rng, 4, 5, 0)), ContractError);
}

TEST_CASE("domain probe accuracy grows with the shift") {
  std::mt19937_64 rng(10);
  auto a = gaussian(rng, 500, 3, 0.0);
  auto noise = gaussian(rng, 500, 3, 0.0);
  double last = 0;
  for (double shift : {0.5, 1.0, 2.0, 4.0}) {
    Matrix b = noise;
    b.col(0).array() += shift;
    const double acc = domain_probe(a, b);
    CHECK(acc >= last - 0.02);
    last = acc;
  }
  CHECK(last > 0.95);
}

TEST_CASE("PCA on points along a line") {
  Matrix x(5, 3);
  for (int i = 0; i < 5; ++i) x.row(i) << 1.0 * i, 2.0 * i, -2.0 * i;
  auto p = pca_project(x);
  CHECK(p.degenerate);
  CHECK(p.components.row(0).norm() == Approx(1.0));
  CHECK(std::abs(p.components(0, 1)) == Approx(2.0 / 3.0));
  CHECK(p.points.col(1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(p.points.col(0).mean()) < 1e-12);
}

TEST_CASE("PCA projections are centered") {
  std::mt19937_64 rng(3);
  auto x = gaussian(rng, 200, 6, 5.0);
  auto p = pca_project(x);
  CHECK(std::abs(p.points.col(0).mean()) < 1e-10);
  CHECK(std::abs(p.points.col(1).mean()) < 1e-10);
  CHECK(p.variances[0] >= p.variances[1]);
}

TEST_CASE("PCA matches the closed-form 2x2 eigendecomposition") {
  std::mt19937_64 rng(44);
  for (int f = 0; f < 20; ++f) {
    auto x = gaussian(rng, 50, 2, 0.0);
    x.col(1) += 0.3 * double(f % 5) * x.col(0);
    const Eigen::RowVector2d mu = x.colwise().mean();
    const Matrix xc = x.rowwise() - mu;
    const double a = xc.col(0).squaredNorm() / 49, b = xc.col(0).dot(xc.col(1)) / 49, c = xc.col(1).squaredNorm() / 49;
    const double mid = (a + c) / 2, rad = std::sqrt((a - c) * (a - c) / 4 + b * b);
    const double l1 = mid + rad, l2 = mid - rad;
    // eigenvector of l1: (b, l1 - a), or (1, 0) when b vanishes
    Eigen::Vector2d v1 = std::abs(b) > 1e-15 ? Eigen::Vector2d(b, l1 - a) : Eigen::Vector2d(a >= c ? 1 : 0, a >= c ? 0 : 1);
    v1.normalize();
    Eigen::Index arg;
    v1.cwiseAbs().maxCoeff(&arg);
    if (v1(arg) < 0) v1 = -v1;
    auto p = pca_project(x);
    CHECK(p.variances[0] == Approx(l1).margin(1e-10));
    CHECK(p.variances[1] == Approx(l2).margin(1e-10));
    CHECK(std::abs(p.components(0, 0) - v1(0)) < 1e-10);
    CHECK(std::abs(p.components(0, 1) - v1(1)) < 1e-10);
    for (Eigen::Index i = 0; i < x.rows(); ++i) CHECK(std::abs(p.points(i, 0) - xc.row(i).dot(v1)) < 1e-10);
  }
}

TEST_CASE("CSV files carry their header even when empty") {
  TempDir dir;
  const auto path = (dir.path / "losses.csv").string();
  export_csv(std::vector<LossRecord>{}, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,q_c,q_z,q_tr,q_idA,q_idB,q_cyc,q_trc,total,d_x,d_y,d_z");
  CHECK_FALSE(std::getline(in, line));
  CHECK(read_losses_csv(path).empty());
}

TEST_CASE("CSV round trip is exact") {
  TempDir dir;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  std::vector<LossRecord> rows;
  for (int i = 0; i < 20; ++i) {
    LossRecord r;
    r.step = i;
    for (double* p : {&r.terms.q_c, &r.terms.q_z, &r.terms.total, &r.terms.d_x, &r.terms.d_z}) *p = g(rng) * 1e3;
    r.terms.q_cyc = 1.0 / 3.0;
    rows.push_back(r);
  }
  const auto path = (dir.path / "l.csv").string();
  export_csv(rows, path);
  auto back = read_losses_csv(path);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].step == rows[i].step);
    CHECK(back[i].terms.q_c == rows[i].terms.q_c);
    CHECK(back[i].terms.q_cyc == rows[i].terms.q_cyc);
    CHECK(back[i].terms.d_z == rows[i].terms.d_z);
  }

  std::vector<MetricRecord> m{{10, "target_test", 0.25, std::nan("")}};
  export_csv(m, (dir.path / "m.csv").string());
  auto mb = read_metrics_csv((dir.path / "m.csv").string());
  REQUIRE(mb.size() == 1);
  CHECK(mb[0].split == "target_test");
  CHECK(mb[0].accuracy == 0.25);
  CHECK(std::isnan(mb[0].probe));
}

TEST_CASE("a CSV with the wrong header is rejected") {
  TempDir dir;
  const auto path = (dir.path / "m.csv").string();
  std::ofstream(path) << "step,split,acc\n";
  CHECK_THROWS_AS(read_metrics_csv(path), IoError);
}

TEST_CASE("pixmap maps +1 to byte 255 and -1 to 0") {
  CHECK(to_byte(1.0) == 255);
  CHECK(to_byte(-1.0) == 0);
  CHECK(to_byte(0.0) == 128);
  CHECK(to_byte(7.0) == 255);
  TempDir dir;
  Tensor<float> img({1, 1, 2, 2}, {1.0f, -1.0f, 0.0f, 1.0f});
  const auto path = (dir.path / "g.pgm").string();
  export_image_grid(img, path);
  auto p = read_pixmap(path);
  CHECK(p.channels == 1);
  CHECK(p.bytes == std::vector<std::uint8_t>{255, 0, 128, 255});
  auto raw = file_bytes(path);
  CHECK(std::string(raw.begin(), raw.begin() + 2) == "P5");
}

TEST_CASE("image grid dimensions") {
  auto g = image_grid(Tensor<float>::zeros({10, 3, 4, 5}), 4);
  CHECK(g.width == 20);
  CHECK(g.height == 12);
  CHECK(g.channels == 3);
  CHECK(g.bytes.size() == std::size_t(20 * 12 * 3));
  // cells past the last image stay black
  CHECK(g.bytes.back() == 0);
  CHECK_THROWS_AS(image_grid(Tensor<float>::zeros({1, 2, 4, 4})), ShapeError);
}

TEST_CASE("checkpoint files round-trip byte-identically") {
  TempDir dir;
  auto data = synth_domain_pair(test::tiny_spec());
  ModelBundle<float> b(test::tiny_arch(), {}, 1);
  TrainConfig cfg;
  cfg.total_steps = 3;
  cfg.batch_size = 4;
  Trainer<float> t(b, data.source, UnlabeledView(data.target), cfg, preset("i2i_full").plan);
  t.run();
  const auto p1 = dir.path / "a.ckpt", p2 = dir.path / "b.ckpt";
  save_checkpoint(p1.string(), b, t.state(), R"({"x":1})");
  write_checkpoint_file(load_checkpoint(p1.string()), p2.string());
  CHECK(file_bytes(p1) == file_bytes(p2));

  auto c = load_checkpoint(p1.string());
  CHECK(std::is_sorted(c.tensors.begin(), c.tensors.end(), [](const auto& x, const auto& y) { return x.name < y.name; }));
  CHECK(c.step == 3);
  CHECK(c.config_json == R"({"x":1})");
}

TEST_CASE("tied tensors are stored once") {
  ModelBundle<float> b(test::tiny_arch(), {}, 1);
  TrainState<float> s;
  auto c = make_checkpoint(b, s, "{}");
  CHECK(c.tensors.size() == b.params().entries().size());
  std::set<std::string> names;
  for (const auto& t : c.tensors) names.insert(t.name);
  CHECK(names.size() == c.tensors.size());
  // both encoder slots resolve to one stored tensor
  std::map<std::string, std::string> slot;
  for (const auto& [k, v] : c.slots) slot[k] = v;
  CHECK(slot.at("f_x.0.weight") == slot.at("f_y.0.weight"));
  CHECK(names.count(slot.at("f_y.0.weight")) == 1);
}

TEST_CASE("checkpoint decoding rejects corrupt input") {
  ModelBundle<float> b(test::tiny_arch(), {}, 1);
  TrainState<float> s;
  auto bytes = encode_checkpoint(make_checkpoint(b, s, "{}"));
  CHECK_NOTHROW(decode_checkpoint(bytes));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);

  auto version = bytes;
  version[4] = 2;
  CHECK_THROWS_WITH(decode_checkpoint(version), Catch::Matchers::ContainsSubstring("version 2"));

  auto cut = bytes;
  cut.resize(cut.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(cut), CheckpointError);

  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), CheckpointError);
}

TEST_CASE("restoring into a different architecture fails") {
  ModelBundle<float> b(test::tiny_arch(), {}, 1);
  TrainState<float> s;
  auto c = make_checkpoint(b, s, "{}");
  ModelBundle<float> other(ArchSpec::digits_small(), {}, 1);
  TrainState<float> s2;
  CHECK_THROWS_AS(restore_checkpoint(c, other, s2), CheckpointError);
}
