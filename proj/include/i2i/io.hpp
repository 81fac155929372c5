#pragma once

// CSV exports, portable pixmaps and the binary checkpoint format.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "i2i/trainer.hpp"

namespace i2i {

/// Unwritable paths, unreadable or corrupt files.
class IoError : public DataError {
 public:
  using DataError::DataError;
};

// ---------------------------------------------------------------- CSV

inline const std::vector<std::string>& losses_header() {
  static const std::vector<std::string> h = {"step", "q_c",  "q_z",   "q_tr", "q_idA", "q_idB",
                                             "q_cyc", "q_trc", "total", "d_x",  "d_y",   "d_z"};
  return h;
}
inline const std::vector<std::string>& embeddings_header() {
  static const std::vector<std::string> h = {"domain", "label", "pc1", "pc2"};
  return h;
}
inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h = {"step", "split", "accuracy", "probe"};
  return h;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw IoError("malformed number '" + s + "'");
  return v;
}

struct LossRecord {
  std::int64_t step = 0;
  LossTerms terms;
};

struct EmbeddingRecord {
  std::string domain;
  int label = 0;
  double pc1 = 0, pc2 = 0;
};

struct MetricRecord {
  std::int64_t step = 0;
  std::string split;
  double accuracy = 0, probe = 0;
};

inline std::vector<std::string> csv_row(const LossRecord& r) {
  const auto& t = r.terms;
  std::vector<std::string> out{std::to_string(r.step)};
  for (double v : {t.q_c, t.q_z, t.q_tr, t.q_id_a, t.q_id_b, t.q_cyc, t.q_trc, t.total, t.d_x, t.d_y, t.d_z})
    out.push_back(format_double(v));
  return out;
}
inline std::vector<std::string> csv_row(const EmbeddingRecord& r) {
  return {r.domain, std::to_string(r.label), format_double(r.pc1), format_double(r.pc2)};
}
inline std::vector<std::string> csv_row(const MetricRecord& r) {
  return {std::to_string(r.step), r.split, format_double(r.accuracy), format_double(r.probe)};
}

inline std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path, mode);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

/// Appending CSV writer; the header is written on construction.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : path_(path), out_(open_out(path)) {
    out_ << join(header) << '\n';
    flush();
  }
  template <class R>
  void write(const R& r) {
    out_ << join(csv_row(r)) << '\n';
  }
  void flush() {
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_ + "'");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

template <class R>
void export_csv(const std::vector<R>& records, const std::string& path, const std::vector<std::string>& header) {
  CsvWriter w(path, header);
  for (const auto& r : records) w.write(r);
  w.flush();
}
inline void export_csv(const std::vector<LossRecord>& r, const std::string& path) { export_csv(r, path, losses_header()); }
inline void export_csv(const std::vector<EmbeddingRecord>& r, const std::string& path) {
  export_csv(r, path, embeddings_header());
}
inline void export_csv(const std::vector<MetricRecord>& r, const std::string& path) {
  export_csv(r, path, metrics_header());
}

/// Rows of a CSV file after checking its header.
inline std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != join(header)) throw IoError("'" + path + "': unexpected header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw IoError("'" + path + "': ragged row");
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::vector<LossRecord> read_losses_csv(const std::string& path) {
  std::vector<LossRecord> out;
  for (const auto& c : read_csv(path, losses_header())) {
    LossRecord r;
    r.step = std::stoll(c[0]);
    auto& t = r.terms;
    double* fields[] = {&t.q_c, &t.q_z, &t.q_tr, &t.q_id_a, &t.q_id_b, &t.q_cyc, &t.q_trc, &t.total, &t.d_x, &t.d_y, &t.d_z};
    for (std::size_t i = 0; i < 11; ++i) *fields[i] = parse_double(c[i + 1]);
    out.push_back(r);
  }
  return out;
}

inline std::vector<MetricRecord> read_metrics_csv(const std::string& path) {
  std::vector<MetricRecord> out;
  for (const auto& c : read_csv(path, metrics_header()))
    out.push_back({std::stoll(c[0]), c[1], parse_double(c[2]), parse_double(c[3])});
  return out;
}

// ---------------------------------------------------------------- pixmaps

struct Pixmap {
  std::int64_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> bytes;  // row-major, interleaved channels
};

inline std::uint8_t to_byte(double v) {
  const double b = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(b);
}

/// Tile a B x C x H x W batch (C = 1 or 3) into a grid with `cols` columns.
/// Empty cells are black.
template <class T>
Pixmap image_grid(const Tensor<T>& images, std::int64_t cols = 8) {
  if (images.rank() != 4) throw ShapeError("image_grid: expected [B,C,H,W], got " + to_string(images.shape()));
  const auto b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw ShapeError("image_grid: expected 1 or 3 channels");
  if (cols < 1) throw ContractError("image_grid: cols must be >= 1");
  cols = std::min(cols, std::max<std::int64_t>(b, 1));
  const auto nrows = (b + cols - 1) / cols;
  Pixmap p{cols * w, nrows * h, c, {}};
  p.bytes.assign(static_cast<std::size_t>(p.width * p.height * c), 0);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto gx = (i % cols) * w, gy = (i / cols) * h;
    for (std::int64_t k = 0; k < c; ++k)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          p.bytes[static_cast<std::size_t>(((gy + y) * p.width + gx + x) * c + k)] =
              to_byte(double(images.values()[static_cast<std::size_t>(((i * c + k) * h + y) * w + x)]));
  }
  return p;
}

inline void write_pixmap(const Pixmap& p, const std::string& path) {
  auto out = open_out(path, std::ios::binary);
  out << (p.channels == 3 ? "P6" : "P5") << '\n' << p.width << ' ' << p.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(p.bytes.data()), static_cast<std::streamsize>(p.bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Pixmap read_pixmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string magic;
  Pixmap p;
  int maxval = 0;
  in >> magic >> p.width >> p.height >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255 || p.width <= 0 || p.height <= 0)
    throw IoError("'" + path + "': not a binary 8-bit pixmap");
  in.get();
  p.channels = magic == "P6" ? 3 : 1;
  p.bytes.resize(static_cast<std::size_t>(p.width * p.height * p.channels));
  in.read(reinterpret_cast<char*>(p.bytes.data()), static_cast<std::streamsize>(p.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(p.bytes.size())) throw IoError("'" + path + "': truncated");
  return p;
}

template <class T>
void export_image_grid(const Tensor<T>& images, const std::string& path, std::int64_t cols = 8) {
  write_pixmap(image_grid(images, cols), path);
}

// ---------------------------------------------------------------- checkpoint

inline constexpr char kCheckpointMagic[4] = {'I', '2', 'I', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Everything a checkpoint holds, independent of a live bundle.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedTensor> tensors;  // sorted by name
  // TrainState
  std::int64_t step = 0;
  std::int64_t stages_entered = 0;
  std::string rng;
  std::vector<std::pair<std::string, std::int64_t>> adam_steps;
  std::vector<LossTerms> history;
  std::vector<std::string> frozen;
  // parameter sharing
  std::vector<std::pair<std::string, std::string>> slots;  // slot -> tensor name
  std::string config_json;
  std::uint64_t config_hash = 0;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class U>
  void le(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(char((std::make_unsigned_t<U>(v) >> (8 * i)) & 0xFF));
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    le(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    le(u);
  }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw CheckpointError("name too long");
    le(std::uint16_t(s.size()));
    bytes(s.data(), s.size());
  }
  void str32(const std::string& s) {
    le(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> b) : buf_(std::move(b)) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    std::make_unsigned_t<U> v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= std::make_unsigned_t<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float f32() {
    auto u = le<std::uint32_t>();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    auto u = le<std::uint64_t>();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() { return str(le<std::uint16_t>()); }
  std::string str32() { return str(le<std::uint32_t>()); }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline void write_terms(Writer& w, const LossTerms& t) {
  for (double v : {t.q_c, t.q_z, t.q_tr, t.q_id_a, t.q_id_b, t.q_cyc, t.q_trc, t.total, t.d_x, t.d_y, t.d_z}) w.f64(v);
}
inline LossTerms read_terms(Reader& r) {
  LossTerms t;
  for (double* p : {&t.q_c, &t.q_z, &t.q_tr, &t.q_id_a, &t.q_id_b, &t.q_cyc, &t.q_trc, &t.total, &t.d_x, &t.d_y, &t.d_z})
    *p = r.f64();
  return t;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.le(c.version);
  w.le(std::uint32_t(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str16(t.name);
    if (t.shape.size() > 0xFF) throw CheckpointError("rank too large");
    w.le(std::uint8_t(t.shape.size()));
    for (auto d : t.shape) w.le(std::uint32_t(d));
    for (float v : t.data) w.f32(v);
  }
  w.le(c.step);
  w.le(c.stages_entered);
  w.str32(c.rng);
  w.le(std::uint32_t(c.adam_steps.size()));
  for (const auto& [n, t] : c.adam_steps) {
    w.str16(n);
    w.le(t);
  }
  w.le(std::uint32_t(c.history.size()));
  for (const auto& h : c.history) detail::write_terms(w, h);
  w.le(std::uint32_t(c.frozen.size()));
  for (const auto& f : c.frozen) w.str16(f);
  w.le(std::uint32_t(c.slots.size()));
  for (const auto& [s, n] : c.slots) {
    w.str16(s);
    w.str16(n);
  }
  w.str32(c.config_json);
  w.le(c.config_hash);
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  detail::Reader r(std::move(bytes));
  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("bad checkpoint magic");
  Checkpoint c;
  c.version = r.le<std::uint32_t>();
  if (c.version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(c.version) + " not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto n = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str16();
    const auto rank = r.le<std::uint8_t>();
    std::int64_t count = 1;
    for (int k = 0; k < rank; ++k) {
      t.shape.push_back(r.le<std::uint32_t>());
      count *= t.shape.back();
    }
    r.need(static_cast<std::size_t>(count) * 4);
    t.data.resize(static_cast<std::size_t>(count));
    for (auto& v : t.data) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  c.step = r.le<std::int64_t>();
  c.stages_entered = r.le<std::int64_t>();
  c.rng = r.str32();
  for (auto k = r.le<std::uint32_t>(); k > 0; --k) {
    auto name = r.str16();
    c.adam_steps.emplace_back(name, r.le<std::int64_t>());
  }
  for (auto k = r.le<std::uint32_t>(); k > 0; --k) c.history.push_back(detail::read_terms(r));
  for (auto k = r.le<std::uint32_t>(); k > 0; --k) c.frozen.push_back(r.str16());
  for (auto k = r.le<std::uint32_t>(); k > 0; --k) {
    auto s = r.str16();
    c.slots.emplace_back(s, r.str16());
  }
  c.config_json = r.str32();
  c.config_hash = r.le<std::uint64_t>();
  if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint");
  if (c.config_hash != fnv1a(c.config_json)) throw CheckpointError("config hash mismatch");
  return c;
}

inline void write_checkpoint_file(const Checkpoint& c, const std::string& path) {
  const auto bytes = encode_checkpoint(c);
  auto out = open_out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(std::move(bytes));
}

inline const std::string kAdamM = "adam.m.";
inline const std::string kAdamV = "adam.v.";

inline bool is_buffer_name(const std::string& name) {
  return name.size() >= 13 && (name.ends_with("running_mean") || name.ends_with("running_var"));
}

/// Snapshot a live bundle and trainer state. Tied tensors appear once.
template <class T>
Checkpoint make_checkpoint(const ModelBundle<T>& bundle, const TrainState<T>& state, const std::string& config_json) {
  Checkpoint c;
  auto to_f32 = [](const Tensor<T>& t) { return std::vector<float>(t.values().begin(), t.values().end()); };
  for (const auto& [id, e] : bundle.params().entries()) c.tensors.push_back({e.name, e.value.shape(), to_f32(e.value)});
  for (const auto& [name, slot] : state.adam) {
    if (slot.m.numel() == 0) continue;
    c.tensors.push_back({kAdamM + name, slot.m.shape(), to_f32(slot.m)});
    c.tensors.push_back({kAdamV + name, slot.v.shape(), to_f32(slot.v)});
    c.adam_steps.emplace_back(name, slot.t);
  }
  std::sort(c.tensors.begin(), c.tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  c.step = state.step;
  c.stages_entered = state.stages_entered;
  c.rng = state.rng_text();
  c.history.assign(state.history.begin(), state.history.end());
  c.frozen.assign(state.frozen.begin(), state.frozen.end());
  for (const auto& [slot, id] : bundle.params().slots()) c.slots.emplace_back(slot, bundle.params().entry(id).name);
  c.config_json = config_json;
  c.config_hash = fnv1a(config_json);
  return c;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelBundle<T>& bundle, const TrainState<T>& state,
                     const std::string& config_json) {
  write_checkpoint_file(make_checkpoint(bundle, state, config_json), path);
}

/// Load tensors, sharing and trainer state into a bundle built from the
/// same architecture.
template <class T>
void restore_checkpoint(const Checkpoint& c, ModelBundle<T>& bundle, TrainState<T>& state) {
  auto to_t = [](const NamedTensor& n) {
    return Tensor<T>(n.shape, std::vector<T>(n.data.begin(), n.data.end()));
  };
  std::vector<typename ParamStore<T>::Entry> entries;
  for (const auto& t : c.tensors) {
    if (t.name.starts_with("adam.")) continue;
    entries.push_back({t.name, to_t(t), !is_buffer_name(t.name)});
  }
  try {
    bundle.params().restore(std::move(entries), c.slots);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint does not match the model: ") + e.what());
  }
  TrainState<T> s;
  s.step = c.step;
  s.stages_entered = c.stages_entered;
  s.set_rng_text(c.rng);
  for (const auto& [name, t] : c.adam_steps) {
    const auto* m = c.find(kAdamM + name);
    const auto* v = c.find(kAdamV + name);
    if (!m || !v) throw CheckpointError("missing optimizer moments for '" + name + "'");
    s.adam[name] = AdamSlot<T>{to_t(*m), to_t(*v), t};
  }
  s.history.assign(c.history.begin(), c.history.end());
  s.frozen.insert(c.frozen.begin(), c.frozen.end());
  state = std::move(s);
}

}  // namespace i2i
