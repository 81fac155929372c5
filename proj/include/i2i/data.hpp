#pragma once

// Datasets, IDX ingestion, preprocessing, synthetic domain pairs and
// deterministic batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "i2i/losses.hpp"

namespace i2i {

/// Missing, unreadable or malformed input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images are stored as float NCHW. Raw IDX data holds [0,255] values until
/// `preprocess` maps it to [-1,1] and sets `normalized`.
struct Dataset {
  Shape shape;  // N, C, H, W
  std::vector<float> images;
  std::optional<std::vector<int>> labels;
  std::string domain;
  std::int64_t num_classes = 10;
  bool normalized = false;

  std::int64_t size() const { return shape.empty() ? 0 : shape[0]; }
  std::int64_t image_numel() const { return shape[1] * shape[2] * shape[3]; }

  void validate() const {
    if (shape.size() != 4 || size() <= 0) throw DataError("dataset '" + domain + "': empty or not NCHW");
    if (static_cast<std::int64_t>(images.size()) != numel(shape)) throw DataError("dataset '" + domain + "': size mismatch");
    if (labels) {
      if (static_cast<std::int64_t>(labels->size()) != size())
        throw DataError("dataset '" + domain + "': label count mismatch");
      for (int l : *labels)
        if (l < 0 || l >= num_classes) throw DataError("dataset '" + domain + "': label out of range");
    }
    if (normalized)
      for (float v : images)
        if (!(v >= -1.0f && v <= 1.0f)) throw DataError("dataset '" + domain + "': value outside [-1,1]");
  }

  /// Rows [begin, end) as a new dataset.
  Dataset slice(std::int64_t begin, std::int64_t end) const {
    if (begin < 0 || end > size() || begin >= end) throw DataError("dataset slice out of range");
    Dataset out = *this;
    out.shape[0] = end - begin;
    const auto f = image_numel();
    out.images.assign(images.begin() + begin * f, images.begin() + end * f);
    if (labels) out.labels = std::vector<int>(labels->begin() + begin, labels->begin() + end);
    return out;
  }
};

/// The trainer's view of the target domain: images only.
class UnlabeledView {
 public:
  explicit UnlabeledView(const Dataset& ds) : ds_(&ds) {}
  const Shape& shape() const { return ds_->shape; }
  std::int64_t size() const { return ds_->size(); }
  const std::vector<float>& images() const { return ds_->images; }

 private:
  const Dataset* ds_;
};

// ---------------------------------------------------------------- IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw DataError("'" + path + "': truncated header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> payload;
};

/// Unsigned-byte IDX file whose magic is one of `magics` (the low byte is
/// the rank).
inline IdxFile parse_idx(const std::string& path, std::initializer_list<std::uint32_t> magics) {
  auto bytes = read_file(path);
  const auto got = read_be32(bytes, 0, path);
  if (std::find(magics.begin(), magics.end(), got) == magics.end()) throw DataError("'" + path + "': bad magic");
  IdxFile f;
  const std::uint32_t rank = got & 0xFFu;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    f.dims.push_back(read_be32(bytes, 4 + 4 * i, path));
    count *= f.dims.back();
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() < off + count) throw DataError("'" + path + "': truncated payload");
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                   bytes.begin() + static_cast<std::ptrdiff_t>(off + count));
  return f;
}

}  // namespace detail

/// Parse an unsigned-byte IDX image file (N,H,W or N,H,W,C) and its label
/// file. Values stay in [0,255] until `preprocess`.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::string domain = "",
                        std::int64_t num_classes = 10) {
  auto img = detail::parse_idx(images_path, {0x00000803u, 0x00000804u});
  auto lab = detail::parse_idx(labels_path, {0x00000801u});
  if (lab.dims.size() != 1) throw DataError("'" + labels_path + "': expected 1 dim");
  const std::int64_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
  const std::int64_t c = img.dims.size() == 4 ? img.dims[3] : 1;
  if (lab.dims[0] != img.dims[0])
    throw DataError("count mismatch: " + std::to_string(img.dims[0]) + " images vs " + std::to_string(lab.dims[0]) +
                    " labels");
  if (n == 0 || h == 0 || w == 0 || c == 0) throw DataError("'" + images_path + "': empty");
  Dataset ds;
  ds.domain = std::move(domain);
  ds.num_classes = num_classes;
  ds.shape = {n, c, h, w};
  ds.images.resize(static_cast<std::size_t>(n * c * h * w));
  // file order is N,H,W,C
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t k = 0; k < c; ++k)
          ds.images[static_cast<std::size_t>(((i * c + k) * h + y) * w + x)] =
              float(img.payload[static_cast<std::size_t>(((i * h + y) * w + x) * c + k)]);
  std::vector<int> labels(lab.payload.begin(), lab.payload.end());
  for (int l : labels)
    if (l >= num_classes) throw DataError("'" + labels_path + "': label " + std::to_string(l) + " out of range");
  ds.labels = std::move(labels);
  return ds;
}

// ---------------------------------------------------------------- preprocessing

/// Aligned-corners bilinear resize of one HxW plane.
inline std::vector<float> resize_plane(const float* src, std::int64_t h, std::int64_t w, std::int64_t oh,
                                       std::int64_t ow) {
  std::vector<float> out(static_cast<std::size_t>(oh * ow));
  const double sy = oh > 1 ? double(h - 1) / double(oh - 1) : 0.0;
  const double sx = ow > 1 ? double(w - 1) / double(ow - 1) : 0.0;
  for (std::int64_t y = 0; y < oh; ++y) {
    const double fy = y * sy;
    const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 1);
    const auto y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const double wy = fy - double(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      const double fx = x * sx;
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 1);
      const auto x1 = std::min<std::int64_t>(x0 + 1, w - 1);
      const double wx = fx - double(x0);
      const double top = (1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
      const double bot = (1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
      out[static_cast<std::size_t>(y * ow + x)] = float((1 - wy) * top + wy * bot);
    }
  }
  return out;
}

inline constexpr double kLuma[3] = {0.299, 0.587, 0.114};

/// Grayscale (luma) for 3-channel input, bilinear resize to target_size and
/// [0,255] -> [-1,1]. Idempotent on normalized data.
inline Dataset preprocess(const Dataset& ds, std::int64_t target_size = 32) {
  ds.validate();
  const auto n = ds.shape[0], c = ds.shape[1], h = ds.shape[2], w = ds.shape[3];
  if (c != 1 && c != 3) throw DataError("preprocess: expected 1 or 3 channels, got " + std::to_string(c));
  Dataset out = ds;
  out.shape = {n, 1, target_size, target_size};
  out.images.assign(static_cast<std::size_t>(n * target_size * target_size), 0.0f);
  std::vector<float> gray(static_cast<std::size_t>(h * w));
  for (std::int64_t i = 0; i < n; ++i) {
    const float* base = ds.images.data() + i * c * h * w;
    for (std::int64_t p = 0; p < h * w; ++p) {
      if (c == 1) {
        gray[p] = base[p];
      } else {
        gray[p] = float(kLuma[0] * base[p] + kLuma[1] * base[h * w + p] + kLuma[2] * base[2 * h * w + p]);
      }
    }
    auto plane = (h == target_size && w == target_size) ? gray : resize_plane(gray.data(), h, w, target_size, target_size);
    float* dst = out.images.data() + i * target_size * target_size;
    for (std::size_t p = 0; p < plane.size(); ++p)
      dst[p] = ds.normalized ? plane[p] : std::clamp(float(plane[p] / 127.5 - 1.0), -1.0f, 1.0f);
  }
  out.normalized = true;
  return out;
}

// ---------------------------------------------------------------- synthetic pairs

enum class SynthKind { shapes_images, gaussian_2d };

struct SyntheticSpec {
  SynthKind kind = SynthKind::shapes_images;
  std::int64_t num_classes = 6;
  std::int64_t source_count = 2000;
  std::int64_t target_count = 2000;
  std::int64_t test_count = 1000;  // per domain, drawn independently
  // shapes_images shift
  double rotation_deg = 30.0;
  bool invert = true;
  double gradient_amplitude = 0.5;
  double noise_sigma = 0.05;
  int jitter = 3;
  // gaussian_2d shift: target = A v + b + noise
  std::array<double, 4> affine{1, 0, 0, 1};
  std::array<double, 2> offset{0, 0};
  double cluster_sigma = 0.1;
  double radius = 0.6;
  std::uint64_t seed = 0;

  bool shifted() const {
    return rotation_deg != 0 || invert || gradient_amplitude != 0 || noise_sigma != 0 ||
           affine != std::array<double, 4>{1, 0, 0, 1} || offset != std::array<double, 2>{0, 0};
  }
};

inline const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names = {"hbar", "vbar", "box", "dot", "ring", "corner", "plus", "xcross"};
  return names;
}

/// A 32x32 glyph of class k on a -1 background, strokes at +1. dx/dy shift
/// the glyph, size and thickness vary it.
inline std::vector<float> render_glyph(std::int64_t k, int dx, int dy, int size, int thick) {
  constexpr int S = 32;
  std::vector<float> img(S * S, -1.0f);
  const double cx = 15.5 + dx, cy = 15.5 + dy, r = size;
  auto set = [&](int x, int y) {
    if (x >= 0 && x < S && y >= 0 && y < S) img[y * S + x] = 1.0f;
  };
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double u = x - cx, v = y - cy;
      const double t = thick / 2.0;
      bool on = false;
      switch (k) {
        case 0: on = std::abs(v) <= t && std::abs(u) <= r; break;
        case 1: on = std::abs(u) <= t && std::abs(v) <= r; break;
        case 2: {
          const double m = std::max(std::abs(u), std::abs(v));
          on = m <= r && m >= r - 2 * t;
          break;
        }
        case 3: on = u * u + v * v <= (r * 0.45) * (r * 0.45); break;
        case 4: {
          const double d = std::sqrt(u * u + v * v);
          on = d <= r && d >= r - 2 * t;
          break;
        }
        case 5: on = (std::abs(u + r - t) <= t && std::abs(v) <= r) || (std::abs(v - r + t) <= t && std::abs(u) <= r); break;
        case 6: on = (std::abs(v) <= t && std::abs(u) <= r) || (std::abs(u) <= t && std::abs(v) <= r); break;
        case 7: on = (std::abs(u - v) <= t * 1.41 || std::abs(u + v) <= t * 1.41) && std::abs(u) <= r * 0.8 && std::abs(v) <= r * 0.8; break;
        default: throw ContractError("glyph class out of range");
      }
      if (on) set(x, y);
    }
  return img;
}

/// Rotation (bilinear, about the centre, background fill -1), inversion,
/// additive horizontal background gradient and Gaussian noise, clamped to
/// [-1,1]. Noise is drawn from `rng`.
inline std::vector<float> apply_shift(const std::vector<float>& img, const SyntheticSpec& spec, std::mt19937_64& rng) {
  constexpr int S = 32;
  std::vector<float> out = img;
  if (spec.rotation_deg != 0) {
    const double a = spec.rotation_deg * M_PI / 180.0, ca = std::cos(a), sa = std::sin(a);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double u = x - 15.5, v = y - 15.5;
        const double sx = ca * u + sa * v + 15.5, sy = -sa * u + ca * v + 15.5;
        const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
        const double wx = sx - x0, wy = sy - y0;
        auto at = [&](int xx, int yy) -> double {
          return (xx < 0 || xx >= S || yy < 0 || yy >= S) ? -1.0 : img[yy * S + xx];
        };
        out[y * S + x] = float((1 - wy) * ((1 - wx) * at(x0, y0) + wx * at(x0 + 1, y0)) +
                               wy * ((1 - wx) * at(x0, y0 + 1) + wx * at(x0 + 1, y0 + 1)));
      }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double v = out[y * S + x];
      if (spec.invert) v = -v;
      v += spec.gradient_amplitude * (double(x) / (S - 1) - 0.5);
      if (spec.noise_sigma > 0) v += spec.noise_sigma * noise(rng);
      out[y * S + x] = float(std::clamp(v, -1.0, 1.0));
    }
  return out;
}

struct DomainPair {
  Dataset source, target, source_test, target_test;
};

namespace detail {

inline Dataset synth_shapes(const SyntheticSpec& spec, std::int64_t n, std::uint64_t seed, bool shifted,
                            const std::string& domain) {
  Dataset ds;
  ds.domain = domain;
  ds.num_classes = spec.num_classes;
  ds.normalized = true;
  ds.shape = {n, 1, 32, 32};
  ds.images.reserve(static_cast<std::size_t>(n * 1024));
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> jit(-spec.jitter, spec.jitter), size(7, 10), thick(2, 3);
  for (std::int64_t i = 0; i < n; ++i) {
    const int k = int(i % spec.num_classes);
    labels[static_cast<std::size_t>(i)] = k;
    const int dx = jit(rng), dy = jit(rng), s = size(rng), t = thick(rng);
    auto img = render_glyph(k, dx, dy, s, t);
    if (shifted) img = apply_shift(img, spec, rng);
    ds.images.insert(ds.images.end(), img.begin(), img.end());
  }
  ds.labels = std::move(labels);
  return ds;
}

inline Dataset synth_gaussian(const SyntheticSpec& spec, std::int64_t n, std::uint64_t seed, bool shifted,
                              const std::string& domain) {
  Dataset ds;
  ds.domain = domain;
  ds.num_classes = spec.num_classes;
  ds.normalized = true;
  ds.shape = {n, 2, 1, 1};
  ds.images.resize(static_cast<std::size_t>(2 * n));
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const int k = int(i % spec.num_classes);
    labels[static_cast<std::size_t>(i)] = k;
    const double a = 2 * M_PI * k / double(spec.num_classes);
    double u = spec.radius * std::cos(a) + spec.cluster_sigma * g(rng);
    double v = spec.radius * std::sin(a) + spec.cluster_sigma * g(rng);
    if (shifted) {
      const double su = spec.affine[0] * u + spec.affine[1] * v + spec.offset[0];
      const double sv = spec.affine[2] * u + spec.affine[3] * v + spec.offset[1];
      u = su + spec.noise_sigma * g(rng);
      v = sv + spec.noise_sigma * g(rng);
    }
    ds.images[static_cast<std::size_t>(2 * i)] = float(std::clamp(u, -1.0, 1.0));
    ds.images[static_cast<std::size_t>(2 * i + 1)] = float(std::clamp(v, -1.0, 1.0));
  }
  ds.labels = std::move(labels);
  return ds;
}

}  // namespace detail

/// 2x2 rotation matrix for the gaussian_2d affine shift.
inline std::array<double, 4> rotation_affine(double degrees) {
  const double a = degrees * M_PI / 180.0;
  return {std::cos(a), -std::sin(a), std::sin(a), std::cos(a)};
}

/// Source and target training sets plus held-out test sets for both
/// domains. Every part is drawn from its own seed stream.
inline DomainPair synth_domain_pair(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ContractError("synthetic spec needs at least two classes");
  if (spec.source_count <= 0 || spec.target_count <= 0 || spec.test_count <= 0)
    throw ContractError("synthetic sample counts must be positive");
  if (spec.kind == SynthKind::shapes_images && spec.num_classes > static_cast<std::int64_t>(glyph_names().size()))
    throw ContractError("num_classes " + std::to_string(spec.num_classes) + " exceeds the glyph catalogue (" +
                        std::to_string(glyph_names().size()) + ")");
  auto make = spec.kind == SynthKind::shapes_images ? detail::synth_shapes : detail::synth_gaussian;
  const auto s = spec.seed * 4;
  DomainPair p;
  p.source = make(spec, spec.source_count, fnv1a("source", s), false, "source");
  p.target = make(spec, spec.target_count, fnv1a("target", s), true, "target");
  p.source_test = make(spec, spec.test_count, fnv1a("source_test", s), false, "source");
  p.target_test = make(spec, spec.test_count, fnv1a("target_test", s), true, "target");
  return p;
}

// ---------------------------------------------------------------- batching

/// Shuffle of [0, n) for one epoch, a pure function of (seed, epoch).
inline std::vector<std::int64_t> epoch_permutation(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * std::uint64_t(epoch + 1)));
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::int64_t> d(0, i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(d(rng))]);
  }
  return idx;
}

/// Indices of batch `step`: positions [step*b, (step+1)*b) of the endless
/// concatenation of per-epoch permutations. Every batch is full.
inline std::vector<std::int64_t> batch_indices(std::int64_t n, std::int64_t batch_size, std::uint64_t seed,
                                               std::int64_t step) {
  if (batch_size <= 0 || batch_size > n) throw ContractError("batch_size must be in [1, N]");
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  std::int64_t pos = step * batch_size;
  std::int64_t epoch = -1;
  std::vector<std::int64_t> perm;
  for (std::int64_t i = 0; i < batch_size; ++i, ++pos) {
    if (pos / n != epoch) {
      epoch = pos / n;
      perm = epoch_permutation(n, seed, epoch);
    }
    out.push_back(perm[static_cast<std::size_t>(pos % n)]);
  }
  return out;
}

template <class T>
Tensor<T> gather_images(const Shape& shape, const std::vector<float>& images, const std::vector<std::int64_t>& idx) {
  const auto f = shape[1] * shape[2] * shape[3];
  std::vector<T> out;
  out.reserve(idx.size() * static_cast<std::size_t>(f));
  for (auto i : idx)
    for (std::int64_t k = 0; k < f; ++k) out.push_back(T(images[static_cast<std::size_t>(i * f + k)]));
  return Tensor<T>({static_cast<std::int64_t>(idx.size()), shape[1], shape[2], shape[3]}, std::move(out));
}

template <class T>
DomainBatch<T> batch_iter(const Dataset& ds, std::int64_t batch_size, std::uint64_t seed, std::int64_t step) {
  auto idx = batch_indices(ds.size(), batch_size, seed, step);
  DomainBatch<T> b{gather_images<T>(ds.shape, ds.images, idx), std::nullopt};
  if (ds.labels) {
    std::vector<int> l;
    for (auto i : idx) l.push_back((*ds.labels)[static_cast<std::size_t>(i)]);
    b.labels = std::move(l);
  }
  return b;
}

template <class T>
DomainBatch<T> batch_iter(const UnlabeledView& view, std::int64_t batch_size, std::uint64_t seed, std::int64_t step) {
  auto idx = batch_indices(view.size(), batch_size, seed, step);
  return {gather_images<T>(view.shape(), view.images(), idx), std::nullopt};
}

/// Consecutive rows [begin, end) as a tensor, for evaluation passes.
template <class T>
Tensor<T> rows(const Dataset& ds, std::int64_t begin, std::int64_t end) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return gather_images<T>(ds.shape, ds.images, idx);
}

}  // namespace i2i
