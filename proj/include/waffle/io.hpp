// Copyright 2026 The Waffle Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "waffle/augment.hpp"
#include "waffle/backbone.hpp"
#include "waffle/eval.hpp"
#include "waffle/geometry.hpp"
#include "waffle/training.hpp"

namespace waffle {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw bytes.

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

/// Little-endian cursor over a byte buffer. Errors name the source and offset.
class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <typename V>
  void array(V* out, std::size_t n) {
    need(n * sizeof(V));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(V));
    pos_ += n * sizeof(V);
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(source_ + ": " + what + " at offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("unexpected end of file");
  }

  std::span<const char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void bytes(std::string_view s) { out_.append(s); }
  template <typename V>
  void array(const V* p, std::size_t n) {
    out_.append(reinterpret_cast<const char*>(p), n * sizeof(V));
  }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

// ---------------------------------------------------------------------------
// Scans.

enum class ScanFormat {
  kitti4,     // x, y, z, intensity
  nuscenes5,  // x, y, z, intensity, ring
};

inline ScanFormat parse_scan_format(const std::string& s) {
  if (s == "kitti4") return ScanFormat::kitti4;
  if (s == "nuscenes5") return ScanFormat::nuscenes5;
  throw Error("unknown scan format: " + s);
}

inline std::string scan_format_name(ScanFormat f) { return f == ScanFormat::kitti4 ? "kitti4" : "nuscenes5"; }

inline std::size_t scan_stride(ScanFormat f) { return f == ScanFormat::kitti4 ? 4 : 5; }

inline PointCloud decode_scan(std::span<const char> bytes, ScanFormat format, FeatureMode mode,
                              const std::string& source) {
  const std::size_t stride = scan_stride(format), rec = stride * sizeof(float);
  if (bytes.size() % rec)
    throw Error(source + ": truncated scan (" + std::to_string(bytes.size()) + " bytes, partial record at offset " +
                std::to_string(bytes.size() - bytes.size() % rec) + ")");
  const std::size_t n = bytes.size() / rec;
  std::vector<float> raw(n * stride);
  if (n) std::memcpy(raw.data(), bytes.data(), bytes.size());
  std::vector<Vec3> pos(n);
  std::vector<float> intensity(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 4; ++c)
      if (!std::isfinite(raw[i * stride + c]))
        throw Error(source + ": non-finite value at point " + std::to_string(i) + " (offset " +
                    std::to_string(i * rec + c * sizeof(float)) + ")");
    pos[i] = {raw[i * stride], raw[i * stride + 1], raw[i * stride + 2]};
    intensity[i] = raw[i * stride + 3];
  }
  return make_cloud(std::move(pos), intensity, mode);
}

inline PointCloud read_scan(const fs::path& path, ScanFormat format, FeatureMode mode = FeatureMode::k5) {
  return decode_scan(read_file(path), format, mode, path.string());
}

/// Writes positions and intensity; the nuscenes5 ring field is written as 0.
inline std::string encode_scan(const PointCloud& pc, ScanFormat format) {
  ByteWriter w;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (float v : pc.positions[i]) w.put(v);
    w.put(pc.intensity(i));
    if (format == ScanFormat::nuscenes5) w.put(0.0f);
  }
  return w.str();
}

inline void write_scan(const fs::path& path, const PointCloud& pc, ScanFormat format) {
  write_file(path, encode_scan(pc, format));
}

// ---------------------------------------------------------------------------
// Labels.

/// Raw semantic id (low 16 bits of a label word) to train id. Lines are
/// "raw train" or "raw ignore"; '#' starts a comment.
class ClassMap {
 public:
  ClassMap() = default;

  static ClassMap parse(const std::string& text, const std::string& source) {
    ClassMap m;
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      std::istringstream ls(line);
      std::string raw_s, train_s, extra;
      if (!(ls >> raw_s)) continue;
      const std::string where = source + ":" + std::to_string(no);
      if (!(ls >> train_s) || (ls >> extra)) throw Error(where + ": expected \"raw train\" or \"raw ignore\"");
      std::uint32_t raw = 0;
      auto [p, ec] = std::from_chars(raw_s.data(), raw_s.data() + raw_s.size(), raw);
      if (ec != std::errc() || p != raw_s.data() + raw_s.size() || raw > 0xFFFF)
        throw Error(where + ": bad raw id \"" + raw_s + "\"");
      std::int32_t train = kIgnoreLabel;
      if (train_s != "ignore") {
        auto [q, ec2] = std::from_chars(train_s.data(), train_s.data() + train_s.size(), train);
        if (ec2 != std::errc() || q != train_s.data() + train_s.size() || train < 0)
          throw Error(where + ": bad train id \"" + train_s + "\"");
      }
      if (!m.map_.emplace(static_cast<std::uint16_t>(raw), train).second)
        throw Error(where + ": duplicate raw id " + raw_s);
    }
    return m;
  }

  static ClassMap load(const fs::path& path) {
    const auto bytes = read_file(path);
    return parse(std::string(bytes.begin(), bytes.end()), path.string());
  }

  bool empty() const { return map_.empty(); }

  /// Unmapped raw ids become the ignore label. An empty map is the identity.
  std::int32_t to_train(std::uint16_t raw) const {
    if (map_.empty()) return raw;
    auto it = map_.find(raw);
    return it == map_.end() ? kIgnoreLabel : it->second;
  }

  /// Smallest raw id mapping to `train`; identity for an empty map.
  std::uint16_t to_raw(std::int32_t train) const {
    if (map_.empty()) {
      if (train < 0 || train > 0xFFFF) throw Error("class map: train id out of range");
      return static_cast<std::uint16_t>(train);
    }
    for (const auto& [raw, t] : map_)
      if (t == train) return raw;
    throw Error("class map: no raw id for train id " + std::to_string(train));
  }

  /// 1 + the largest train id, or 0 for an empty map.
  std::size_t num_classes() const {
    std::int32_t mx = -1;
    for (const auto& [raw, t] : map_) mx = std::max(mx, t);
    return static_cast<std::size_t>(mx + 1);
  }

 private:
  std::map<std::uint16_t, std::int32_t> map_;
};

inline std::vector<std::uint32_t> decode_label_words(std::span<const char> bytes, const std::string& source) {
  if (bytes.size() % 4)
    throw Error(source + ": truncated label file (partial word at offset " +
                std::to_string(bytes.size() - bytes.size() % 4) + ")");
  std::vector<std::uint32_t> words(bytes.size() / 4);
  if (!words.empty()) std::memcpy(words.data(), bytes.data(), bytes.size());
  return words;
}

inline std::vector<std::uint32_t> read_label_words(const fs::path& path) {
  return decode_label_words(read_file(path), path.string());
}

inline void write_label_words(const fs::path& path, std::span<const std::uint32_t> words) {
  write_file(path, std::string_view(reinterpret_cast<const char*>(words.data()), words.size() * 4));
}

struct Labels {
  std::vector<std::int32_t> semantic;
  std::vector<std::uint16_t> instance;
};

inline Labels decode_labels(std::span<const std::uint32_t> words, const ClassMap& map) {
  Labels out;
  out.semantic.resize(words.size());
  out.instance.resize(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    out.semantic[i] = map.to_train(static_cast<std::uint16_t>(words[i] & 0xFFFFu));
    out.instance[i] = static_cast<std::uint16_t>(words[i] >> 16);
  }
  return out;
}

inline Labels read_labels(const fs::path& path, std::size_t expected_points, const ClassMap& map) {
  const auto words = read_label_words(path);
  if (words.size() != expected_points)
    throw Error(path.string() + ": label count " + std::to_string(words.size()) + " does not match scan (" +
                std::to_string(expected_points) + " points)");
  return decode_labels(words, map);
}

/// Predictions in the label layout: raw semantic id in the low 16 bits.
inline std::vector<std::uint32_t> encode_predictions(std::span<const std::int32_t> pred, const ClassMap& map) {
  std::vector<std::uint32_t> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = map.to_raw(pred[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration.

/// Everything the CLI reads from a config file.
struct RunConfig {
  WaffleIronConfig model;
  TrainConfig train;
  AugmentConfig augment;
  std::string format = "kitti4";
  std::string class_map;  // path; empty means identity
};

namespace detail {

template <typename V>
V parse_number(const std::string& key, const std::string& value) {
  V v{};
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw Error("config: bad value \"" + value + "\" for key " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error("config: bad boolean \"" + value + "\" for key " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
std::string format_number(V v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace detail

inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "3dim") return FeatureMode::k3;
  if (s == "5dim") return FeatureMode::k5;
  throw Error("unknown feature mode: " + s);
}

inline std::string feature_mode_name(FeatureMode m) { return m == FeatureMode::k3 ? "3dim" : "5dim"; }

/// Sets one key. Unknown keys are rejected.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  auto& m = cfg.model;
  auto& t = cfg.train;
  auto& a = cfg.augment;
  static const char* kFov[] = {"fov_xmin", "fov_ymin", "fov_zmin", "fov_xmax", "fov_ymax", "fov_zmax"};
  for (int d = 0; d < 6; ++d)
    if (key == kFov[d]) {
      (d < 3 ? m.fov.min : m.fov.max)[d % 3] = parse_number<float>(key, value);
      return;
    }
  if (key == "depth") m.depth = parse_number<std::size_t>(key, value);
  else if (key == "width") m.width = parse_number<std::size_t>(key, value);
  else if (key == "rho") m.rho = parse_number<float>(key, value);
  else if (key == "k") m.k_neighbors = parse_number<std::size_t>(key, value);
  else if (key == "classes") m.num_classes = parse_number<std::size_t>(key, value);
  else if (key == "drop_prob") m.drop_prob = parse_number<double>(key, value);
  else if (key == "strategy") m.strategy = parse_strategy(value);
  else if (key == "feature_mode") m.feature_mode = parse_feature_mode(value);
  else if (key == "epochs") t.epochs = parse_number<std::size_t>(key, value);
  else if (key == "batch") t.batch = parse_number<std::size_t>(key, value);
  else if (key == "lr") t.lr = parse_number<double>(key, value);
  else if (key == "final_lr") t.final_lr = parse_number<double>(key, value);
  else if (key == "wd") t.wd = parse_number<double>(key, value);
  else if (key == "warmup_epochs") t.warmup_epochs = parse_number<std::size_t>(key, value);
  else if (key == "num_points") t.num_points = parse_number<std::size_t>(key, value);
  else if (key == "voxel_size") t.voxel_size = parse_number<float>(key, value);
  else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "checkpoint_every") t.checkpoint_every = parse_number<std::size_t>(key, value);
  else if (key == "aug_rotate") a.rotate = parse_bool(key, value);
  else if (key == "aug_flip") a.flip = parse_bool(key, value);
  else if (key == "aug_scale") a.scale = parse_bool(key, value);
  else if (key == "aug_cutmix") a.cutmix = parse_bool(key, value);
  else if (key == "aug_polarmix") a.polarmix = parse_bool(key, value);
  else if (key == "format") {
    parse_scan_format(value);
    cfg.format = value;
  } else if (key == "class_map") cfg.class_map = value;
  else throw Error("config: unknown key \"" + key + "\"");
}

/// Parses "key = value" lines ('#' comments). Keys may appear in any order
/// but at most once.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw Error(where + "duplicate key \"" + key + "\"");
    try {
      apply_setting(cfg, key, value);
    } catch (const Error& e) {
      throw Error(where + e.what());
    }
  }
}

inline RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  apply_config_text(cfg, text, source);
  return cfg;
}

inline RunConfig load_config(const fs::path& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()), path.string());
}

/// Canonical model description: sorted key=value lines, shortest exact numbers.
inline std::string model_config_text(const WaffleIronConfig& m) {
  using detail::format_number;
  std::map<std::string, std::string> kv;
  kv["depth"] = format_number(m.depth);
  kv["width"] = format_number(m.width);
  kv["rho"] = format_number(m.rho);
  kv["k"] = format_number(m.k_neighbors);
  kv["classes"] = format_number(m.num_classes);
  kv["drop_prob"] = format_number(m.drop_prob);
  kv["strategy"] = strategy_name(m.strategy);
  kv["feature_mode"] = feature_mode_name(m.feature_mode);
  const char* axes = "xyz";
  for (int d = 0; d < 3; ++d) {
    kv[std::string("fov_") + axes[d] + "min"] = format_number(m.fov.min[d]);
    kv[std::string("fov_") + axes[d] + "max"] = format_number(m.fov.max[d]);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline WaffleIronConfig parse_model_config(const std::string& text, const std::string& source) {
  RunConfig cfg = parse_config(text, source);
  return cfg.model;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr char kCheckpointMagic[4] = {'W', 'F', 'L', 'I'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.put(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) w.put(static_cast<float>(t[i]));
}

struct RawTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline RawTensor get_tensor(ByteReader& r) {
  RawTensor t;
  t.name = r.string(r.get<std::uint32_t>());
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) r.fail("tensor " + t.name + ": implausible rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
  t.data.resize(shape_size(t.shape));
  r.array(t.data.data(), t.data.size());
  return t;
}

template <typename T>
void assign_tensor(Tensor<T>& dst, const RawTensor& src) {
  if (dst.shape() != src.shape)
    throw Error("checkpoint: dim mismatch for tensor " + src.name + ": file " + shape_string(src.shape) +
                ", model " + shape_string(dst.shape()));
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.data[i]);
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const WaffleIron<T>& model, const OptimState<T>* optim = nullptr) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  const std::string cfg = model_config_text(model.config());
  w.put(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.put(static_cast<std::uint32_t>(model.params().entries()));
  for (const auto& [name, p] : model.params()) detail::put_tensor(w, name, p.value);
  w.put(static_cast<std::uint8_t>(optim ? 1 : 0));
  if (optim) {
    w.put(static_cast<std::uint64_t>(optim->step));
    w.put(optim->settings.beta1);
    w.put(optim->settings.beta2);
    w.put(optim->settings.eps);
    w.put(optim->settings.weight_decay);
    w.put(optim->base_lr);
    w.put(static_cast<std::uint32_t>(optim->m.size()));
    for (const auto& [name, m] : optim->m) {
      detail::put_tensor(w, name, m);
      detail::put_tensor(w, name, optim->v.at(name));
    }
  }
  return w.str();
}

template <typename T>
void save_checkpoint(const fs::path& path, const WaffleIron<T>& model, const OptimState<T>* optim = nullptr) {
  write_file(path, encode_checkpoint(model, optim));
}

struct CheckpointContents {
  WaffleIronConfig config;
  std::vector<detail::RawTensor> tensors;
  bool has_optim = false;
  std::uint64_t step = 0;
  AdamWSettings settings;
  double base_lr = 0.0;
  std::vector<std::pair<detail::RawTensor, detail::RawTensor>> moments;
};

inline CheckpointContents decode_checkpoint(std::span<const char> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw Error(source + ": bad magic");
  r.string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  CheckpointContents c;
  c.config = parse_model_config(r.string(r.get<std::uint32_t>()), source + " (config)");
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) c.tensors.push_back(detail::get_tensor(r));
  c.has_optim = r.get<std::uint8_t>() != 0;
  if (c.has_optim) {
    c.step = r.get<std::uint64_t>();
    c.settings.beta1 = r.get<double>();
    c.settings.beta2 = r.get<double>();
    c.settings.eps = r.get<double>();
    c.settings.weight_decay = r.get<double>();
    c.base_lr = r.get<double>();
    const auto m = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < m; ++i) {
      auto first = detail::get_tensor(r);
      auto second = detail::get_tensor(r);
      c.moments.emplace_back(std::move(first), std::move(second));
    }
  }
  if (!r.done()) r.fail("trailing bytes");
  return c;
}

/// Loads tensors into an existing model. Every model tensor must be present
/// with identical dims; the first offending name is reported.
template <typename T>
void load_checkpoint_into(const CheckpointContents& c, WaffleIron<T>& model, OptimState<T>* optim = nullptr) {
  std::map<std::string, const detail::RawTensor*> by_name;
  for (const auto& t : c.tensors) by_name[t.name] = &t;
  for (auto& [name, p] : model.params()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: missing tensor " + name);
    detail::assign_tensor(p.value, *it->second);
  }
  for (const auto& t : c.tensors)
    if (!model.params().contains(t.name)) throw Error("checkpoint: unexpected tensor " + t.name);
  if (optim) {
    if (!c.has_optim) throw Error("checkpoint: no optimizer state stored");
    *optim = OptimState<T>::for_params(model.params(), c.settings, c.base_lr);
    optim->step = c.step;
    for (const auto& [m, v] : c.moments) {
      auto mi = optim->m.find(m.name);
      if (mi == optim->m.end()) throw Error("checkpoint: unexpected optimizer tensor " + m.name);
      detail::assign_tensor(mi->second, m);
      detail::assign_tensor(optim->v.at(v.name), v);
    }
    if (c.moments.size() != optim->m.size()) throw Error("checkpoint: incomplete optimizer state");
  }
}

struct LoadedCheckpoint {
  WaffleIron<float> model;
  std::optional<OptimState<float>> optim;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  const auto bytes = read_file(path);
  const CheckpointContents c = decode_checkpoint(bytes, path.string());
  LoadedCheckpoint out{WaffleIron<float>(c.config), std::nullopt};
  if (c.has_optim) {
    OptimState<float> s;
    load_checkpoint_into(c, out.model, &s);
    out.optim = std::move(s);
  } else {
    load_checkpoint_into(c, out.model);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instance bank: <dir>/index.txt with one "file label points" line per
// instance, and one file per instance holding float32 (x, y, z, intensity)
// records relative to the instance centroid.

inline void save_instance_bank(const fs::path& dir, const InstanceBank& bank) {
  fs::create_directories(dir);
  std::string index = "# file label points\n";
  std::size_t id = 0;
  for (const auto& [label, list] : bank.by_class) {
    for (const auto& inst : list) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06zu.bin", id++);
      ByteWriter w;
      for (std::size_t i = 0; i < inst.points.size(); ++i) {
        for (float v : inst.points[i]) w.put(v);
        w.put(inst.intensity[i]);
      }
      write_file(dir / name, w.str());
      index += std::string(name) + " " + std::to_string(label) + " " + std::to_string(inst.points.size()) + "\n";
    }
    if (list.empty()) index += "- " + std::to_string(label) + " 0\n";
  }
  write_file(dir / "index.txt", index);
}

inline InstanceBank load_instance_bank(const fs::path& dir) {
  const auto text = read_file(dir / "index.txt");
  std::istringstream in(std::string(text.begin(), text.end()));
  InstanceBank bank;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::string file;
    std::int32_t label = 0;
    std::size_t count = 0;
    if (!(ls >> file)) continue;
    const std::string where = (dir / "index.txt").string() + ":" + std::to_string(no);
    if (!(ls >> label >> count)) throw Error(where + ": expected \"file label points\"");
    auto& list = bank.by_class[label];
    if (file == "-") continue;
    const auto bytes = read_file(dir / file);
    if (bytes.size() != count * 16)
      throw Error((dir / file).string() + ": expected " + std::to_string(count * 16) + " bytes, found " +
                  std::to_string(bytes.size()));
    if (count == 0) throw Error(where + ": instance with no points");
    ByteReader r(bytes, (dir / file).string());
    Instance inst;
    inst.label = label;
    for (std::size_t i = 0; i < count; ++i) {
      Vec3 p{r.get<float>(), r.get<float>(), r.get<float>()};
      inst.points.push_back(p);
      inst.intensity.push_back(r.get<float>());
    }
    list.push_back(std::move(inst));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// On-disk dataset: <root>/<split>/velodyne/*.bin with optional
// <root>/<split>/labels/<stem>.label.

class DirectoryDataset : public Dataset {
 public:
  DirectoryDataset(const fs::path& root, const std::string& split, ScanFormat format, FeatureMode mode,
                   ClassMap map = {})
      : format_(format), mode_(mode), map_(std::move(map)) {
    const fs::path scans = root / split / "velodyne";
    if (!fs::is_directory(scans)) throw Error("dataset: missing directory " + scans.string());
    for (const auto& e : fs::directory_iterator(scans))
      if (e.is_regular_file() && e.path().extension() == ".bin") scans_.push_back(e.path());
    std::sort(scans_.begin(), scans_.end());
    labels_dir_ = root / split / "labels";
  }

  std::size_t size() const override { return scans_.size(); }
  std::string name(std::size_t i) const override { return scans_.at(i).stem().string(); }
  fs::path scan_path(std::size_t i) const { return scans_.at(i); }
  fs::path label_path(std::size_t i) const { return labels_dir_ / (name(i) + ".label"); }
  const ClassMap& class_map() const { return map_; }

  /// Labels and instance ids are attached when the label file exists.
  PointCloud load(std::size_t i) const override {
    PointCloud pc = read_scan(scan_path(i), format_, mode_);
    const fs::path lp = label_path(i);
    if (fs::exists(lp)) {
      Labels l = read_labels(lp, pc.size(), map_);
      pc.labels = std::move(l.semantic);
      pc.instances = std::move(l.instance);
    }
    return pc;
  }

 private:
  std::vector<fs::path> scans_;
  fs::path labels_dir_;
  ScanFormat format_;
  FeatureMode mode_;
  ClassMap map_;
};

/// Confusion from stored prediction files (<pred_dir>/<stem>.label) against
/// the dataset's labels.
inline ConfusionMatrix evaluate_prediction_files(const fs::path& pred_dir, const DirectoryDataset& data,
                                                 std::size_t classes) {
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const PointCloud pc = data.load(i);
    if (!pc.has_labels()) throw Error("missing label file for scan " + data.name(i));
    const fs::path pp = pred_dir / (data.name(i) + ".label");
    const Labels pred = read_labels(pp, pc.size(), data.class_map());
    cm.update(pred.semantic, pc.labels);
  }
  return cm;
}

}  // namespace waffle
