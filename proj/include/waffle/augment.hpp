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
#include <map>
#include <numbers>
#include <numeric>
#include <vector>

#include "waffle/common.hpp"
#include "waffle/geometry.hpp"

namespace waffle {

/// SemanticKITTI train ids used by the default class lists.
namespace kitti_classes {
inline constexpr std::int32_t kBicycle = 1;
inline constexpr std::int32_t kMotorcycle = 2;
inline constexpr std::int32_t kOtherVehicle = 4;
inline constexpr std::int32_t kPerson = 5;
inline constexpr std::int32_t kBicyclist = 6;
inline constexpr std::int32_t kRoad = 8;
inline constexpr std::int32_t kParking = 9;
inline constexpr std::int32_t kSidewalk = 10;
}  // namespace kitti_classes

struct AugmentConfig {
  bool rotate = true;
  double rotation_range = kTwoPi;  // theta ~ U[0, rotation_range)
  bool flip = true;
  double flip_prob_x = 0.5;
  double flip_prob_y = 0.5;
  bool scale = true;
  double scale_min = 0.95;
  double scale_max = 1.05;
  bool cutmix = false;
  std::size_t cutmix_max_per_class = 40;
  bool polarmix = false;
  double sector_min = std::numbers::pi / 4;
  double sector_max = 3 * std::numbers::pi / 4;
  std::vector<std::int32_t> instance_classes{kitti_classes::kBicycle, kitti_classes::kMotorcycle,
                                             kitti_classes::kOtherVehicle, kitti_classes::kPerson,
                                             kitti_classes::kBicyclist};
  std::vector<std::int32_t> surface_classes{kitti_classes::kRoad, kitti_classes::kParking,
                                            kitti_classes::kSidewalk};

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw Error("augment: scale range must lie in (0, inf)");
    if (!(rotation_range >= 0.0)) throw Error("augment: rotation range must be non-negative");
    if (!(flip_prob_x >= 0.0 && flip_prob_x <= 1.0 && flip_prob_y >= 0.0 && flip_prob_y <= 1.0))
      throw Error("augment: flip probabilities must lie in [0, 1]");
    if (!(sector_min >= 0.0 && sector_min <= sector_max && sector_max <= kTwoPi))
      throw Error("augment: sector width range must lie in [0, 2pi]");
  }
};

// ---------------------------------------------------------------------------
// Scene transforms. Padding rows are left untouched.

/// p' = s * (a x + b y, c x + d y, z), then derived features are recomputed.
inline PointCloud transform_xy(const PointCloud& pc, double a, double b, double c, double d, double s) {
  PointCloud out = pc;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out.valid[i]) continue;
    const double x = pc.positions[i][0], y = pc.positions[i][1], z = pc.positions[i][2];
    out.positions[i] = {static_cast<float>(s * (a * x + b * y)), static_cast<float>(s * (c * x + d * y)),
                        static_cast<float>(s * z)};
  }
  refresh_derived_features(out);
  return out;
}

inline PointCloud rotate_z(const PointCloud& pc, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return transform_xy(pc, c, -s, s, c, 1.0);
}

inline PointCloud flip_axes(const PointCloud& pc, bool flip_x, bool flip_y) {
  return transform_xy(pc, flip_x ? -1.0 : 1.0, 0.0, 0.0, flip_y ? -1.0 : 1.0, 1.0);
}

inline PointCloud scale_cloud(const PointCloud& pc, double s) { return transform_xy(pc, 1.0, 0.0, 0.0, 1.0, s); }

inline PointCloud random_rotate_z(const PointCloud& pc, Rng& rng, double range = kTwoPi) {
  return rotate_z(pc, rng.uniform(0.0, range));
}

inline PointCloud random_flip(const PointCloud& pc, Rng& rng, double prob_x = 0.5, double prob_y = 0.5) {
  const bool fx = rng.bernoulli(prob_x);
  const bool fy = rng.bernoulli(prob_y);
  return flip_axes(pc, fx, fy);
}

inline PointCloud random_scale(const PointCloud& pc, Rng& rng, double lo = 0.95, double hi = 1.05) {
  return scale_cloud(pc, rng.uniform(lo, hi));
}

// ---------------------------------------------------------------------------
// Instance bank.

struct Instance {
  std::int32_t label = 0;
  std::vector<Vec3> points;  // relative to the instance centroid
  std::vector<float> intensity;
};

/// Instances grouped by class, in (class, scan, instance id) order.
struct InstanceBank {
  std::map<std::int32_t, std::vector<Instance>> by_class;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, list] : by_class) n += list.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  /// Adds every (class, instance id) group of a labeled scan. Instance id 0
  /// marks stuff points and is skipped.
  void add_scan(const PointCloud& pc, std::span<const std::int32_t> classes) {
    if (!pc.has_labels() || !pc.has_instances()) throw Error("instance bank: scan has no instance ids");
    for (auto c : classes) by_class[c];
    std::map<std::pair<std::int32_t, std::uint16_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      if (!pc.valid[i] || pc.instances[i] == 0) continue;
      if (std::find(classes.begin(), classes.end(), pc.labels[i]) == classes.end()) continue;
      groups[{pc.labels[i], pc.instances[i]}].push_back(i);
    }
    for (const auto& [key, rows] : groups) {
      double cx = 0.0, cy = 0.0, cz = 0.0;
      for (auto r : rows) {
        cx += pc.positions[r][0];
        cy += pc.positions[r][1];
        cz += pc.positions[r][2];
      }
      const double n = static_cast<double>(rows.size());
      cx /= n;
      cy /= n;
      cz /= n;
      Instance inst;
      inst.label = key.first;
      for (auto r : rows) {
        inst.points.push_back({static_cast<float>(pc.positions[r][0] - cx), static_cast<float>(pc.positions[r][1] - cy),
                               static_cast<float>(pc.positions[r][2] - cz)});
        inst.intensity.push_back(pc.intensity(r));
      }
      by_class[key.first].push_back(std::move(inst));
    }
  }

  /// Requested classes for which no instance was found.
  std::vector<std::int32_t> missing_classes() const {
    std::vector<std::int32_t> out;
    for (const auto& [c, list] : by_class)
      if (list.empty()) out.push_back(c);
    return out;
  }
};

inline InstanceBank build_instance_bank(std::span<const PointCloud> scans, std::span<const std::int32_t> classes) {
  InstanceBank bank;
  for (const auto& pc : scans) bank.add_scan(pc, classes);
  return bank;
}

namespace detail {

/// Cloud of one instance after rotation, single-axis flip and scaling.
inline std::vector<Vec3> transform_instance(const Instance& inst, Rng& rng, const AugmentConfig& cfg) {
  const double theta = rng.uniform(0.0, kTwoPi);
  const std::size_t axis = rng.index(2);
  const bool flip = rng.bernoulli(0.5);
  const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double c = std::cos(theta), sn = std::sin(theta);
  std::vector<Vec3> out(inst.points.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = c * inst.points[i][0] - sn * inst.points[i][1];
    double y = sn * inst.points[i][0] + c * inst.points[i][1];
    if (flip) (axis == 0 ? x : y) = -(axis == 0 ? x : y);
    out[i] = {static_cast<float>(s * x), static_cast<float>(s * y), static_cast<float>(s * inst.points[i][2])};
  }
  return out;
}

}  // namespace detail

/// Pastes up to cfg.cutmix_max_per_class random instances of every bank class
/// onto random surface points. The instance's xy centroid is placed on the
/// surface point and its lowest point is lifted to the surface point's height.
inline PointCloud instance_cutmix(const PointCloud& pc, const InstanceBank& bank, const AugmentConfig& cfg, Rng& rng) {
  if (bank.empty() || cfg.cutmix_max_per_class == 0) return pc;
  if (!pc.has_labels()) throw Error("instance_cutmix: scene has no labels");
  std::vector<std::size_t> surface;
  for (std::size_t i = 0; i < pc.size(); ++i)
    if (pc.valid[i] && std::find(cfg.surface_classes.begin(), cfg.surface_classes.end(), pc.labels[i]) !=
                           cfg.surface_classes.end())
      surface.push_back(i);
  if (surface.empty()) return pc;

  const FeatureMode mode = feature_mode_for(pc.channels);
  PointCloud out = pc;
  for (const auto& [label, list] : bank.by_class) {
    const std::size_t take = std::min(cfg.cutmix_max_per_class, list.size());
    std::vector<std::size_t> order(list.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t m = 0; m < take; ++m) std::swap(order[m], order[m + rng.index(order.size() - m)]);
    for (std::size_t m = 0; m < take; ++m) {
      const Instance& inst = list[order[m]];
      std::vector<Vec3> pts = detail::transform_instance(inst, rng, cfg);
      const Vec3& target = pc.positions[surface[rng.index(surface.size())]];
      double cx = 0.0, cy = 0.0;
      std::size_t ground = 0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        cx += pts[i][0];
        cy += pts[i][1];
        if (pts[i][2] < pts[ground][2]) ground = i;
      }
      cx /= static_cast<double>(pts.size());
      cy /= static_cast<double>(pts.size());
      const double dx = target[0] - cx, dy = target[1] - cy;
      const double dz = static_cast<double>(target[2]) - pts[ground][2];
      for (auto& p : pts)
        p = {static_cast<float>(p[0] + dx), static_cast<float>(p[1] + dy), static_cast<float>(p[2] + dz)};
      PointCloud chunk = make_cloud(std::move(pts), inst.intensity, mode);
      chunk.labels.assign(chunk.size(), label);
      if (out.has_instances()) chunk.instances.assign(chunk.size(), 0);
      append_rows(out, chunk);
    }
  }
  return out;
}

/// True when the azimuth of p lies in [alpha, alpha + sigma) modulo 2 pi.
inline bool in_sector(const Vec3& p, double alpha, double sigma) {
  const double az = std::atan2(static_cast<double>(p[1]), static_cast<double>(p[0]));
  double rel = std::fmod(az - alpha, kTwoPi);
  if (rel < 0.0) rel += kTwoPi;
  return rel < sigma;
}

/// Scene swap of the sector [alpha, alpha + sigma), then instance pasting:
/// valid points of `classes` in b are appended at their position and rotated
/// by 2pi/3 and 4pi/3. Output rows: kept rows of a, sector rows of b, pasted rows.
inline PointCloud polarmix(const PointCloud& a, const PointCloud& b, std::span<const std::int32_t> classes,
                           double alpha, double sigma) {
  if (!a.has_labels() || !b.has_labels()) throw Error("polarmix: both scenes need labels");
  if (a.channels != b.channels) throw Error("polarmix: feature channel mismatch");
  std::vector<std::size_t> keep_a, take_b, paste;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.valid[i] && !in_sector(a.positions[i], alpha, sigma)) keep_a.push_back(i);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b.valid[i]) continue;
    if (in_sector(b.positions[i], alpha, sigma)) take_b.push_back(i);
    if (std::find(classes.begin(), classes.end(), b.labels[i]) != classes.end()) paste.push_back(i);
  }
  PointCloud out = select_rows(a, keep_a);
  append_rows(out, select_rows(b, take_b));
  if (!paste.empty()) {
    const PointCloud inst = select_rows(b, paste);
    append_rows(out, inst);
    append_rows(out, rotate_z(inst, kTwoPi / 3.0));
    append_rows(out, rotate_z(inst, 2.0 * kTwoPi / 3.0));
  }
  return out;
}

inline PointCloud random_polarmix(const PointCloud& a, const PointCloud& b, const AugmentConfig& cfg, Rng& rng) {
  const double alpha = rng.uniform(0.0, kTwoPi);
  const double sigma = rng.uniform(cfg.sector_min, cfg.sector_max);
  return polarmix(a, b, cfg.instance_classes, alpha, sigma);
}

/// Training-time pipeline: polarmix (when a partner scene is given), cutmix
/// (when a bank is given), then rotation, flips and scaling.
inline PointCloud augment_scene(const PointCloud& pc, const AugmentConfig& cfg, Rng& rng,
                                const InstanceBank* bank = nullptr, const PointCloud* partner = nullptr) {
  PointCloud out = pc;
  if (cfg.polarmix && partner) out = random_polarmix(out, *partner, cfg, rng);
  if (cfg.cutmix && bank) out = instance_cutmix(out, *bank, cfg, rng);
  if (cfg.rotate) out = random_rotate_z(out, rng, cfg.rotation_range);
  if (cfg.flip) out = random_flip(out, rng, cfg.flip_prob_x, cfg.flip_prob_y);
  if (cfg.scale) out = random_scale(out, rng, cfg.scale_min, cfg.scale_max);
  return out;
}

}  // namespace waffle
