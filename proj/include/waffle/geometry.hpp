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
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "waffle/common.hpp"

namespace waffle {

inline constexpr std::int32_t kIgnoreLabel = -1;

/// Low-level per-point input features. Column 0 is always the intensity.
enum class FeatureMode {
  k3,  // intensity, z, range
  k5,  // intensity, x, y, z, range
};

inline std::size_t feature_channels(FeatureMode mode) { return mode == FeatureMode::k3 ? 3 : 5; }

inline FeatureMode feature_mode_for(std::size_t channels) {
  if (channels == 3) return FeatureMode::k3;
  if (channels == 5) return FeatureMode::k5;
  throw Error("unsupported feature channel count " + std::to_string(channels));
}

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<float> features;  // N x channels, row-major
  std::size_t channels = 5;
  std::vector<std::int32_t> labels;      // empty when unlabeled
  std::vector<std::uint16_t> instances;  // empty when absent
  std::vector<std::uint8_t> valid;       // 0 marks zero padding

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
  bool has_labels() const { return !labels.empty(); }
  bool has_instances() const { return !instances.empty(); }

  float feature(std::size_t i, std::size_t c) const { return features[i * channels + c]; }
  float intensity(std::size_t i) const { return features[i * channels]; }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }

  void validate() const {
    const std::size_t n = size();
    if (features.size() != n * channels) throw Error("point cloud: feature rows do not match positions");
    if (valid.size() != n) throw Error("point cloud: valid mask does not match positions");
    if (!labels.empty() && labels.size() != n) throw Error("point cloud: label rows do not match positions");
    if (!instances.empty() && instances.size() != n)
      throw Error("point cloud: instance rows do not match positions");
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid[i]) continue;
      for (float v : positions[i])
        if (!std::isfinite(v)) throw Error("point cloud: non-finite position at point " + std::to_string(i));
      for (std::size_t c = 0; c < channels; ++c)
        if (!std::isfinite(feature(i, c)))
          throw Error("point cloud: non-finite feature at point " + std::to_string(i));
    }
  }
};

inline float point_range(const Vec3& p) {
  const double x = p[0], y = p[1], z = p[2];
  return static_cast<float>(std::sqrt(x * x + y * y + z * z));
}

/// Recomputes every derived feature column from the positions, keeping intensity.
inline void refresh_derived_features(PointCloud& pc) {
  for (std::size_t i = 0; i < pc.size(); ++i) {
    float* row = pc.features.data() + i * pc.channels;
    const Vec3& p = pc.positions[i];
    if (!pc.valid.empty() && !pc.valid[i]) {
      std::fill(row, row + pc.channels, 0.0f);
      continue;
    }
    if (pc.channels == 3) {
      row[1] = p[2];
      row[2] = point_range(p);
    } else {
      row[1] = p[0];
      row[2] = p[1];
      row[3] = p[2];
      row[4] = point_range(p);
    }
  }
}

inline PointCloud make_cloud(std::vector<Vec3> positions, std::span<const float> intensity,
                             FeatureMode mode) {
  if (intensity.size() != positions.size()) throw Error("make_cloud: intensity count mismatch");
  PointCloud pc;
  pc.channels = feature_channels(mode);
  pc.positions = std::move(positions);
  pc.features.assign(pc.size() * pc.channels, 0.0f);
  pc.valid.assign(pc.size(), 1);
  for (std::size_t i = 0; i < pc.size(); ++i) pc.features[i * pc.channels] = intensity[i];
  refresh_derived_features(pc);
  return pc;
}

inline PointCloud select_rows(const PointCloud& pc, std::span<const std::size_t> rows) {
  PointCloud out;
  out.channels = pc.channels;
  out.positions.reserve(rows.size());
  out.features.reserve(rows.size() * pc.channels);
  out.valid.reserve(rows.size());
  for (std::size_t r : rows) {
    out.positions.push_back(pc.positions[r]);
    out.features.insert(out.features.end(), pc.features.begin() + r * pc.channels,
                        pc.features.begin() + (r + 1) * pc.channels);
    out.valid.push_back(pc.valid[r]);
    if (!pc.labels.empty()) out.labels.push_back(pc.labels[r]);
    if (!pc.instances.empty()) out.instances.push_back(pc.instances[r]);
  }
  return out;
}

/// Appends src rows to dst. Optional columns present on only one side are
/// filled with the ignore label / instance 0.
inline void append_rows(PointCloud& dst, const PointCloud& src) {
  if (src.empty()) return;
  if (dst.channels != src.channels) throw Error("append_rows: feature channel mismatch");
  const std::size_t n0 = dst.size();
  const bool labels = !dst.labels.empty() || !src.labels.empty();
  const bool instances = !dst.instances.empty() || !src.instances.empty();
  if (labels && dst.labels.empty()) dst.labels.assign(n0, kIgnoreLabel);
  if (instances && dst.instances.empty()) dst.instances.assign(n0, 0);
  dst.positions.insert(dst.positions.end(), src.positions.begin(), src.positions.end());
  dst.features.insert(dst.features.end(), src.features.begin(), src.features.end());
  dst.valid.insert(dst.valid.end(), src.valid.begin(), src.valid.end());
  if (labels) {
    if (src.labels.empty()) dst.labels.insert(dst.labels.end(), src.size(), kIgnoreLabel);
    else dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
  }
  if (instances) {
    if (src.instances.empty()) dst.instances.insert(dst.instances.end(), src.size(), 0);
    else dst.instances.insert(dst.instances.end(), src.instances.begin(), src.instances.end());
  }
}

/// Axis-aligned field of view, half-open: min <= p < max on every axis.
struct Fov {
  Vec3 min{-50.0f, -50.0f, -3.0f};
  Vec3 max{50.0f, 50.0f, 2.0f};

  bool contains(const Vec3& p) const {
    for (int d = 0; d < 3; ++d)
      if (!(p[d] >= min[d] && p[d] < max[d])) return false;
    return true;
  }

  void validate() const {
    for (int d = 0; d < 3; ++d)
      if (!(min[d] < max[d])) throw Error("fov: min must be below max on every axis");
  }

  static Fov kitti() { return Fov{{-50.0f, -50.0f, -3.0f}, {50.0f, 50.0f, 2.0f}}; }
  static Fov nuscenes() { return Fov{{-50.0f, -50.0f, -5.0f}, {50.0f, 50.0f, 5.0f}}; }
};

struct DownsampleResult {
  PointCloud cloud;
  std::vector<std::size_t> kept;  // output row -> input row
};

/// Keeps the first point (input order) of every occupied cubic voxel.
inline DownsampleResult voxel_downsample(const PointCloud& pc, float voxel_size) {
  if (!(voxel_size > 0.0f)) throw Error("voxel_downsample: voxel size must be positive");
  struct KeyHash {
    std::size_t operator()(const std::array<std::int64_t, 3>& k) const {
      std::uint64_t h = 1469598103934665603ull;
      for (auto v : k) h = (h ^ static_cast<std::uint64_t>(v)) * 1099511628211ull;
      return static_cast<std::size_t>(h);
    }
  };
  std::unordered_set<std::array<std::int64_t, 3>, KeyHash> seen;
  seen.reserve(pc.size());
  DownsampleResult out;
  const double inv = 1.0 / static_cast<double>(voxel_size);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    std::array<std::int64_t, 3> key{};
    for (int d = 0; d < 3; ++d)
      key[d] = static_cast<std::int64_t>(std::floor(static_cast<double>(pc.positions[i][d]) * inv));
    if (seen.insert(key).second) out.kept.push_back(i);
  }
  out.cloud = select_rows(pc, out.kept);
  return out;
}

struct CropResult {
  PointCloud inside;
  std::vector<std::size_t> inside_indices;
  std::vector<std::size_t> outside_indices;
};

inline CropResult crop_fov(const PointCloud& pc, const Fov& fov) {
  CropResult out;
  for (std::size_t i = 0; i < pc.size(); ++i)
    (fov.contains(pc.positions[i]) ? out.inside_indices : out.outside_indices).push_back(i);
  out.inside = select_rows(pc, out.inside_indices);
  return out;
}

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Neighbor {
  double dist2;
  std::uint32_t index;
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
  }
};

/// Exact k-nearest-neighbour search over a subset of points. Small sets are
/// scanned directly; larger ones go through a uniform grid searched in
/// expanding shells until no unvisited cell can beat the current k-th hit.
class SpatialIndex {
 public:
  static constexpr std::size_t kBruteForceBelow = 2000;
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  SpatialIndex(std::span<const Vec3> points, std::span<const std::uint8_t> mask,
               std::size_t expected_k = 16)
      : points_(points) {
    for (std::size_t i = 0; i < points.size(); ++i)
      if (mask.empty() || mask[i]) members_.push_back(static_cast<std::uint32_t>(i));
    if (members_.size() >= kBruteForceBelow) build_grid(std::max<std::size_t>(expected_k, 1));
  }

  std::size_t members() const { return members_.size(); }

  /// The k closest members to q ordered by (distance, index), skipping `exclude`.
  void nearest(const Vec3& q, std::size_t k, std::size_t exclude, std::vector<Neighbor>& out) const {
    out.clear();
    if (k == 0) return;
    std::priority_queue<Neighbor> heap;  // max-heap on (dist2, index)
    auto offer = [&](std::uint32_t idx) {
      if (idx == exclude) return;
      Neighbor n{squared_distance(q, points_[idx]), idx};
      if (heap.size() < k) heap.push(n);
      else if (n < heap.top()) {
        heap.pop();
        heap.push(n);
      }
    };
    if (cell_start_.empty()) {
      for (auto idx : members_) offer(idx);
    } else {
      search_grid(q, k, heap, offer);
    }
    out.resize(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top();
      heap.pop();
    }
  }

 private:
  void build_grid(std::size_t k) {
    lo_ = {std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
           std::numeric_limits<double>::max()};
    std::array<double, 3> hi{-lo_[0], -lo_[1], -lo_[2]};
    for (auto idx : members_)
      for (int d = 0; d < 3; ++d) {
        lo_[d] = std::min(lo_[d], static_cast<double>(points_[idx][d]));
        hi[d] = std::max(hi[d], static_cast<double>(points_[idx][d]));
      }
    const double n = static_cast<double>(members_.size());
    std::array<double, 3> extent{};
    double max_extent = 0.0, volume = 1.0;
    for (int d = 0; d < 3; ++d) {
      extent[d] = hi[d] - lo_[d];
      max_extent = std::max(max_extent, extent[d]);
    }
    if (max_extent <= 0.0) max_extent = 1.0;
    for (int d = 0; d < 3; ++d) volume *= std::max(extent[d], max_extent * 1e-3);
    cell_ = std::cbrt(volume * static_cast<double>(k) / n);
    if (!(cell_ > 0.0)) cell_ = max_extent;
    for (;;) {
      std::size_t cells = 1;
      for (int d = 0; d < 3; ++d) {
        dims_[d] = static_cast<std::int64_t>(std::floor(extent[d] / cell_)) + 1;
        cells *= static_cast<std::size_t>(dims_[d]);
      }
      if (cells <= 4 * members_.size() + 64) break;
      cell_ *= 1.5;
    }
    const std::size_t cells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    cell_start_.assign(cells + 1, 0);
    std::vector<std::size_t> cell_of(members_.size());
    for (std::size_t m = 0; m < members_.size(); ++m) {
      cell_of[m] = flat(cell_coord(points_[members_[m]]));
      ++cell_start_[cell_of[m] + 1];
    }
    for (std::size_t c = 0; c < cells; ++c) cell_start_[c + 1] += cell_start_[c];
    sorted_.resize(members_.size());
    std::vector<std::size_t> cursor(cell_start_.begin(), cell_start_.end() - 1);
    for (std::size_t m = 0; m < members_.size(); ++m) sorted_[cursor[cell_of[m]]++] = members_[m];
  }

  std::array<std::int64_t, 3> cell_coord(const Vec3& p) const {
    std::array<std::int64_t, 3> c{};
    for (int d = 0; d < 3; ++d) {
      auto v = static_cast<std::int64_t>(std::floor((static_cast<double>(p[d]) - lo_[d]) / cell_));
      c[d] = std::clamp<std::int64_t>(v, 0, dims_[d] - 1);
    }
    return c;
  }

  std::size_t flat(const std::array<std::int64_t, 3>& c) const {
    return static_cast<std::size_t>((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
  }

  template <typename Offer>
  void search_grid(const Vec3& q, std::size_t k, std::priority_queue<Neighbor>& heap,
                   Offer&& offer) const {
    const auto c = cell_coord(q);
    for (std::int64_t r = 0;; ++r) {
      std::array<std::int64_t, 3> a{}, b{};
      for (int d = 0; d < 3; ++d) {
        a[d] = std::max<std::int64_t>(c[d] - r, 0);
        b[d] = std::min<std::int64_t>(c[d] + r, dims_[d] - 1);
      }
      for (std::int64_t x = a[0]; x <= b[0]; ++x)
        for (std::int64_t y = a[1]; y <= b[1]; ++y)
          for (std::int64_t z = a[2]; z <= b[2]; ++z) {
            const std::int64_t cheb =
                std::max({std::abs(x - c[0]), std::abs(y - c[1]), std::abs(z - c[2])});
            if (cheb != r) continue;
            const std::size_t cell = flat({x, y, z});
            for (std::size_t s = cell_start_[cell]; s < cell_start_[cell + 1]; ++s) offer(sorted_[s]);
          }
      // Lower bound on the distance to any member outside the visited box.
      double bound = std::numeric_limits<double>::infinity();
      for (int d = 0; d < 3; ++d) {
        const double qd = q[d];
        if (c[d] - r - 1 >= 0) bound = std::min(bound, std::max(0.0, qd - (lo_[d] + (c[d] - r) * cell_)));
        if (c[d] + r + 1 <= dims_[d] - 1)
          bound = std::min(bound, std::max(0.0, (lo_[d] + (c[d] + r + 1) * cell_) - qd));
      }
      if (std::isinf(bound)) return;  // whole grid visited
      bound *= 1.0 - 1e-12;
      if (heap.size() == k && heap.top().dist2 < bound * bound) return;
    }
  }

  std::span<const Vec3> points_;
  std::vector<std::uint32_t> members_;
  std::array<double, 3> lo_{};
  std::array<std::int64_t, 3> dims_{};
  double cell_ = 1.0;
  std::vector<std::size_t> cell_start_;
  std::vector<std::uint32_t> sorted_;
};

/// N x k neighbour indices, row-major.
struct NeighborList {
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;

  std::size_t rows() const { return k ? indices.size() / k : 0; }
  std::span<const std::uint32_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }
};

/// For each point, its k nearest valid points other than itself. Rows are
/// padded by repeating the farthest neighbour found; a lone point uses itself.
inline NeighborList knn(const PointCloud& pc, std::size_t k) {
  if (k == 0) throw Error("knn: k must be at least 1");
  if (pc.valid_count() == 0) throw Error("empty cloud");
  SpatialIndex index(pc.positions, pc.valid, k);
  NeighborList out;
  out.k = k;
  out.indices.resize(pc.size() * k);
  std::vector<Neighbor> found;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    index.nearest(pc.positions[i], k, i, found);
    std::uint32_t* row = out.indices.data() + i * k;
    if (found.empty()) {
      std::fill(row, row + k, static_cast<std::uint32_t>(i));
      continue;
    }
    for (std::size_t m = 0; m < k; ++m) row[m] = found[std::min(m, found.size() - 1)].index;
  }
  return out;
}

/// Index of the nearest masked source point for every destination point.
inline std::vector<std::uint32_t> nearest_sources(std::span<const Vec3> src,
                                                  std::span<const std::uint8_t> src_mask,
                                                  std::span<const Vec3> dst) {
  SpatialIndex index(src, src_mask, 1);
  if (index.members() == 0) throw Error("empty source cloud");
  std::vector<std::uint32_t> out(dst.size());
  std::vector<Neighbor> found;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    index.nearest(dst[i], 1, SpatialIndex::kNone, found);
    out[i] = found.front().index;
  }
  return out;
}

inline std::vector<std::int32_t> nn_propagate_labels(const PointCloud& src,
                                                     std::span<const std::int32_t> src_labels,
                                                     std::span<const Vec3> dst) {
  if (src_labels.size() != src.size()) throw Error("nn_propagate_labels: label count mismatch");
  const auto nearest = nearest_sources(src.positions, src.valid, dst);
  std::vector<std::int32_t> out(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) out[i] = src_labels[nearest[i]];
  return out;
}

/// Keeps exactly n_target rows around `anchor`: the anchor plus its
/// n_target - 1 closest points, in input order. Input must have no padding.
inline PointCloud sample_around(const PointCloud& pc, std::size_t n_target, std::size_t anchor) {
  std::vector<Neighbor> order;
  order.reserve(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i)
    if (i != anchor)
      order.push_back({squared_distance(pc.positions[anchor], pc.positions[i]), static_cast<std::uint32_t>(i)});
  const std::size_t take = std::min(n_target - 1, order.size());
  std::nth_element(order.begin(), order.begin() + take, order.end());
  std::vector<std::size_t> rows{anchor};
  for (std::size_t m = 0; m < take; ++m) rows.push_back(order[m].index);
  std::sort(rows.begin(), rows.end());
  return select_rows(pc, rows);
}

/// Resizes a cloud to exactly n_target rows: crops around a random anchor
/// when too large, zero-pads with invalid rows when too small.
inline PointCloud sample_fixed(const PointCloud& pc, std::size_t n_target, Rng& rng) {
  if (n_target == 0) throw Error("sample_fixed: target size must be at least 1");
  if (pc.size() > n_target) return sample_around(pc, n_target, rng.index(pc.size()));
  PointCloud out = pc;
  const std::size_t pad = n_target - pc.size();
  if (pad == 0) return out;
  out.positions.insert(out.positions.end(), pad, Vec3{0.0f, 0.0f, 0.0f});
  out.features.insert(out.features.end(), pad * pc.channels, 0.0f);
  out.valid.insert(out.valid.end(), pad, 0);
  if (!out.labels.empty()) out.labels.insert(out.labels.end(), pad, kIgnoreLabel);
  if (!out.instances.empty()) out.instances.insert(out.instances.end(), pad, 0);
  return out;
}

}  // namespace waffle
