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

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "waffle/augment.hpp"
#include "waffle/backbone.hpp"
#include "waffle/geometry.hpp"
#include "waffle/training.hpp"

namespace waffle {

/// K x K counts, row = ground truth, column = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_.at(gt * classes_ + pred); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Counts every point whose ground truth is not the ignore label.
  void update(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
    if (pred.size() != gt.size()) throw Error("confusion_update: prediction/label count mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      check(gt[i], i, "label");
      check(pred[i], i, "prediction");
    }
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (gt[i] != kIgnoreLabel) ++counts_[static_cast<std::size_t>(gt[i]) * classes_ + pred[i]];
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes_ != classes_) throw Error("confusion matrix class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  void check(std::int32_t v, std::size_t i, const char* what) const {
    if (v < 0 || static_cast<std::size_t>(v) >= classes_)
      throw Error(std::string("confusion_update: ") + what + " " + std::to_string(v) + " out of range at point " +
                  std::to_string(i));
  }

  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<double> per_class;  // NaN where TP + FP + FN = 0
  double miou = std::numeric_limits<double>::quiet_NaN();

  bool included(std::size_t c) const { return !std::isnan(per_class[c]); }
};

inline IouResult iou(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  IouResult r;
  r.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.per_class[c];
    ++used;
  }
  if (used) r.miou = sum / static_cast<double>(used);
  return r;
}

// ---------------------------------------------------------------------------
// Inference.

/// Softmax probabilities of a cropped, unpadded cloud in eval mode.
template <typename T>
Tensor<T> predict_probs(WaffleIron<T>& model, const PointCloud& pc) {
  const SceneInputs<T> in = prepare_inputs<T>(pc, model.config());
  return softmax(model.forward(in, ForwardOptions::eval()));
}

struct TtaOptions {
  std::size_t n_aug = 10;
  bool transform = true;         // random z-rotation and axis flips
  bool stochastic_depth = true;  // residual drops active, batch norm frozen
};

/// Mean softmax over n_aug variants. Each variant is transformed and re-cropped
/// to the field of view; a point averages the variants in which it survived.
/// Points dropped by every variant take the mean of their nearest surviving
/// point's probabilities instead.
template <typename T>
Tensor<T> tta_probs(WaffleIron<T>& model, const PointCloud& pc, const TtaOptions& opt, Rng& rng) {
  if (opt.n_aug == 0) throw Error("tta: n_aug must be at least 1");
  const std::size_t k = model.config().num_classes, n = pc.size();
  std::vector<double> acc(k * n, 0.0), fallback(k * n, 0.0);
  std::vector<std::size_t> seen(n, 0);
  ForwardOptions fwd;
  fwd.stochastic_depth = opt.stochastic_depth;
  for (std::size_t a = 0; a < opt.n_aug; ++a) {
    PointCloud variant = pc;
    if (opt.transform) {
      variant = random_rotate_z(variant, rng);
      variant = random_flip(variant, rng);
    }
    const CropResult crop = crop_fov(variant, model.config().fov);
    if (crop.inside.valid_count() == 0) throw Error("tta: variant has no points inside the field of view");
    const SceneInputs<T> in = prepare_inputs<T>(crop.inside, model.config());
    const Tensor<T> probs = softmax(model.forward(in, fwd, &rng));
    const std::size_t m = crop.inside.size();
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t i = crop.inside_indices[j];
      ++seen[i];
      for (std::size_t c = 0; c < k; ++c) acc[c * n + i] += probs(c, j);
    }
    if (m == n) continue;
    const auto src = nearest_sources(crop.inside.positions, crop.inside.valid, variant.positions);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < n; ++i) fallback[c * n + i] += probs(c, src[i]);
  }
  Tensor<T> out({k, n});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < n; ++i)
      out(c, i) = static_cast<T>(seen[i] ? acc[c * n + i] / static_cast<double>(seen[i])
                                         : fallback[c * n + i] / static_cast<double>(opt.n_aug));
  return out;
}

template <typename T>
std::vector<std::int32_t> tta_infer(WaffleIron<T>& model, const PointCloud& pc, const TtaOptions& opt, Rng& rng) {
  return argmax_labels(tta_probs(model, pc, opt, rng));
}

struct InferOptions {
  float voxel_size = 0.1f;  // 0 disables downsampling
  bool tta = false;
  TtaOptions tta_options;
  std::uint64_t seed = 0;
};

/// Full-scan inference: voxel downsampling, FOV crop, prediction on every
/// remaining point, then nearest-neighbour propagation to all input points.
template <typename T>
std::vector<std::int32_t> infer_scan(WaffleIron<T>& model, const PointCloud& raw, const InferOptions& opt) {
  const PointCloud ds = opt.voxel_size > 0.0f ? voxel_downsample(raw, opt.voxel_size).cloud : raw;
  const PointCloud cropped = crop_fov(ds, model.config().fov).inside;
  if (cropped.valid_count() == 0) throw Error("no points inside the field of view");
  std::vector<std::int32_t> pred;
  if (opt.tta) {
    Rng rng(opt.seed);
    pred = tta_infer(model, cropped, opt.tta_options, rng);
  } else {
    pred = argmax_labels(predict_probs(model, cropped));
  }
  return nn_propagate_labels(cropped, pred, raw.positions);
}

struct EvalReport {
  ConfusionMatrix cm;
  IouResult result;
  std::size_t scans = 0;
};

/// Confusion over every labeled point of every scan in the split.
template <typename T>
EvalReport evaluate_split(const Dataset& data, WaffleIron<T>& model, const InferOptions& opt,
                          std::vector<std::vector<std::int32_t>>* predictions = nullptr) {
  std::vector<PointCloud> scans;
  std::string missing;
  for (std::size_t i = 0; i < data.size(); ++i) {
    PointCloud pc = data.load(i);
    if (!pc.has_labels()) missing += (missing.empty() ? "" : ", ") + data.name(i);
    scans.push_back(std::move(pc));
  }
  if (!missing.empty()) throw Error("missing label files for scans: " + missing);
  EvalReport r{ConfusionMatrix(model.config().num_classes), {}, scans.size()};
  for (std::size_t i = 0; i < scans.size(); ++i) {
    std::vector<std::int32_t> pred;
    try {
      InferOptions scan_opt = opt;
      scan_opt.seed = opt.seed + i;
      pred = infer_scan(model, scans[i], scan_opt);
    } catch (const Error& e) {
      throw Error("scan " + data.name(i) + ": " + e.what());
    }
    r.cm.update(pred, scans[i].labels);
    if (predictions) predictions->push_back(std::move(pred));
  }
  r.result = iou(r.cm);
  return r;
}

// ---------------------------------------------------------------------------
// Reports.

inline std::string class_label(std::span<const std::string> names, std::size_t c) {
  return c < names.size() && !names[c].empty() ? names[c] : "class" + std::to_string(c);
}

/// Machine-readable per-class IoU; excluded classes are written as "nan".
inline std::string iou_csv(const IouResult& r, std::span<const std::string> names = {}) {
  std::ostringstream os;
  os << "class,iou\n" << std::setprecision(17);
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    os << class_label(names, c) << ',';
    if (r.included(c)) os << r.per_class[c];
    else os << "nan";
    os << '\n';
  }
  return os.str();
}

inline std::string iou_table(const IouResult& r, std::span<const std::string> names = {}) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "class" << "IoU\n" << std::fixed << std::setprecision(2);
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    os << std::setw(20) << class_label(names, c);
    if (r.included(c)) os << 100.0 * r.per_class[c] << '\n';
    else os << "-\n";
  }
  return os.str();
}

inline std::string miou_line(const IouResult& r) {
  std::ostringstream os;
  os << "mIoU " << std::fixed << std::setprecision(2) << 100.0 * r.miou;
  return os.str();
}

}  // namespace waffle
