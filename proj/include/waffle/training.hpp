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
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "waffle/augment.hpp"
#include "waffle/backbone.hpp"
#include "waffle/geometry.hpp"
#include "waffle/tensor.hpp"

namespace waffle {

// ---------------------------------------------------------------------------
// Losses. Points count when valid and labeled with a class in [0, K).

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // d value / d input, same shape as the input
};

namespace detail {

inline std::vector<std::uint8_t> scored_mask(std::span<const std::int32_t> labels, std::span<const std::uint8_t> valid,
                                             std::size_t classes, std::size_t n, const char* what) {
  if (labels.size() != n) throw Error(std::string(what) + ": label count does not match points");
  if (!valid.empty() && valid.size() != n) throw Error(std::string(what) + ": valid mask does not match points");
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid.empty() && !valid[i]) continue;
    if (labels[i] == kIgnoreLabel) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw Error(std::string(what) + ": label " + std::to_string(labels[i]) + " out of range at point " +
                  std::to_string(i));
    mask[i] = 1;
  }
  return mask;
}

}  // namespace detail

/// Column-wise softmax of K x N logits.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const std::size_t k = logits.dim(0), n = logits.dim(1);
  Tensor<T> probs({k, n});
  std::vector<double> e(k);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits(0, i);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(logits(c, i)));
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += e[c] = std::exp(static_cast<double>(logits(c, i)) - mx);
    for (std::size_t c = 0; c < k; ++c) probs(c, i) = static_cast<T>(e[c] / s);
  }
  return probs;
}

/// Mean negative log-likelihood over scored points.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                            std::span<const std::uint8_t> valid) {
  if (logits.rank() != 2) throw Error("shape mismatch in cross_entropy");
  const std::size_t k = logits.dim(0), n = logits.dim(1);
  const auto mask = detail::scored_mask(labels, valid, k, n, "cross_entropy");
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  if (count == 0) throw Error("cross_entropy: no labeled points");
  LossResult<T> r;
  r.grad = Tensor<T>({k, n});
  std::vector<double> e(k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    double mx = logits(0, i);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(logits(c, i)));
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += e[c] = std::exp(static_cast<double>(logits(c, i)) - mx);
    const auto y = static_cast<std::size_t>(labels[i]);
    total += std::log(s) + mx - logits(y, i);
    for (std::size_t c = 0; c < k; ++c)
      r.grad(c, i) = static_cast<T>((e[c] / s - (c == y ? 1.0 : 0.0)) / static_cast<double>(count));
  }
  r.value = total / static_cast<double>(count);
  return r;
}

/// Lovasz-softmax over probabilities, averaged over the classes present
/// among scored points. Gradient is with respect to the probabilities.
template <typename T>
LossResult<T> lovasz_softmax(const Tensor<T>& probs, std::span<const std::int32_t> labels,
                             std::span<const std::uint8_t> valid) {
  if (probs.rank() != 2) throw Error("shape mismatch in lovasz_softmax");
  const std::size_t k = probs.dim(0), n = probs.dim(1);
  const auto mask = detail::scored_mask(labels, valid, k, n, "lovasz_softmax");
  std::vector<std::size_t> pts;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) pts.push_back(i);
  if (pts.empty()) throw Error("lovasz_softmax: no labeled points");
  std::vector<std::uint8_t> present(k, 0);
  for (auto i : pts) present[labels[i]] = 1;
  const auto n_present = static_cast<double>(std::count(present.begin(), present.end(), std::uint8_t{1}));

  LossResult<T> r;
  r.grad = Tensor<T>({k, n});
  const std::size_t m = pts.size();
  std::vector<double> err(m);
  std::vector<std::size_t> order(m);
  std::vector<double> weight(m);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    if (!present[c]) continue;
    double gts = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const bool fg = labels[pts[j]] == static_cast<std::int32_t>(c);
      gts += fg;
      const double p = probs(c, pts[j]);
      err[j] = fg ? 1.0 - p : p;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    double cum_fg = 0.0, prev = 0.0, class_loss = 0.0;
    for (std::size_t s = 0; s < m; ++s) {
      const bool fg = labels[pts[order[s]]] == static_cast<std::int32_t>(c);
      cum_fg += fg;
      const double inter = gts - cum_fg;
      const double uni = gts + (static_cast<double>(s + 1) - cum_fg);
      const double jac = 1.0 - inter / uni;
      weight[s] = jac - prev;
      prev = jac;
      class_loss += err[order[s]] * weight[s];
    }
    total += class_loss;
    for (std::size_t s = 0; s < m; ++s) {
      const std::size_t i = pts[order[s]];
      const bool fg = labels[i] == static_cast<std::int32_t>(c);
      r.grad(c, i) = static_cast<T>((fg ? -weight[s] : weight[s]) / n_present);
    }
  }
  r.value = total / n_present;
  return r;
}

/// Cross-entropy plus Lovasz-softmax, with the gradient taken w.r.t. logits.
template <typename T>
LossResult<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                                std::span<const std::uint8_t> valid) {
  LossResult<T> ce = cross_entropy(logits, labels, valid);
  const Tensor<T> probs = softmax(logits);
  const LossResult<T> lv = lovasz_softmax(probs, labels, valid);
  const std::size_t k = logits.dim(0), n = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) dot += static_cast<double>(probs(c, i)) * lv.grad(c, i);
    for (std::size_t c = 0; c < k; ++c)
      ce.grad(c, i) += static_cast<T>(static_cast<double>(probs(c, i)) * (lv.grad(c, i) - dot));
  }
  ce.value += lv.value;
  return ce;
}

/// Argmax per column; ties resolve to the lower class id.
template <typename T>
std::vector<std::int32_t> argmax_labels(const Tensor<T>& scores) {
  const std::size_t k = scores.dim(0), n = scores.dim(1);
  std::vector<std::int32_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (scores(c, i) > scores(best, i)) best = c;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.003;
};

template <typename T>
struct OptimState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::size_t step = 0;
  AdamWSettings settings;
  double base_lr = 1e-3;

  static OptimState for_params(const ParamStore<T>& params, AdamWSettings settings = {}, double base_lr = 1e-3) {
    OptimState s;
    s.settings = settings;
    s.base_lr = base_lr;
    for (const auto& [name, p] : params)
      if (p.trainable) {
        s.m.emplace(name, Tensor<T>(p.value.shape()));
        s.v.emplace(name, Tensor<T>(p.value.shape()));
      }
    return s;
  }
};

/// One AdamW update of every trainable parameter. Weight decay is applied to
/// the parameter before the adaptive step. Nothing is modified when any
/// gradient is non-finite.
template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state, double lr) {
  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    for (const T g : p.grad.values())
      if (!std::isfinite(static_cast<double>(g))) throw Error("adamw: non-finite gradient in " + name);
    auto it = state.m.find(name);
    if (it == state.m.end() || it->second.shape() != p.value.shape())
      throw Error("adamw: optimizer state does not match parameter " + name);
  }
  ++state.step;
  const auto& s = state.settings;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      double w = p.value[i];
      w -= lr * s.weight_decay * w;
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + s.eps);
      p.value[i] = static_cast<T>(w);
    }
  }
}

struct Schedule {
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
  double peak_lr = 1e-3;
  double final_lr = 1e-5;

  void validate() const {
    if (!(total_steps > 0 && warmup_steps <= total_steps))
      throw Error("schedule: need 0 < total_steps and warmup_steps <= total_steps (got " +
                  std::to_string(warmup_steps) + ", " + std::to_string(total_steps) + ")");
  }
};

/// Linear warmup from 0 to peak, then cosine annealing down to final. With no
/// warmup the schedule starts at peak.
inline double lr_at(std::size_t step, const Schedule& s) {
  s.validate();
  if (step > s.total_steps) throw Error("lr_at: step beyond total_steps");
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step == s.warmup_steps) return s.peak_lr;
  const double t = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.final_lr + 0.5 * (s.peak_lr - s.final_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Data.

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual PointCloud load(std::size_t i) const = 0;
  virtual std::string name(std::size_t i) const = 0;
};

class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset() = default;
  explicit InMemoryDataset(std::vector<PointCloud> scans) : scans_(std::move(scans)) {}

  void add(PointCloud pc, std::string name = {}) {
    if (name.empty()) name = "scan" + std::to_string(scans_.size());
    scans_.push_back(std::move(pc));
    names_.push_back(std::move(name));
  }

  std::size_t size() const override { return scans_.size(); }
  PointCloud load(std::size_t i) const override { return scans_.at(i); }
  std::string name(std::size_t i) const override {
    return i < names_.size() ? names_[i] : "scan" + std::to_string(i);
  }

 private:
  std::vector<PointCloud> scans_;
  std::vector<std::string> names_;
};

/// Random scene whose labels are three horizontal z bands.
inline PointCloud make_zband_scene(std::size_t n, std::uint64_t seed, FeatureMode mode = FeatureMode::k5) {
  Rng rng(seed);
  std::vector<Vec3> pos(n);
  std::vector<float> intensity(n);
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = {static_cast<float>(rng.uniform(-4.0, 4.0)), static_cast<float>(rng.uniform(-4.0, 4.0)),
              static_cast<float>(rng.uniform(-1.5, 1.5))};
    intensity[i] = static_cast<float>(rng.uniform());
    labels[i] = pos[i][2] < -0.5f ? 0 : (pos[i][2] < 0.5f ? 1 : 2);
  }
  PointCloud pc = make_cloud(std::move(pos), intensity, mode);
  pc.labels = std::move(labels);
  return pc;
}

/// Fov enclosing make_zband_scene output.
inline Fov zband_fov() { return Fov{{-4.0f, -4.0f, -1.5f}, {4.0f, 4.0f, 1.5f}}; }

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  std::size_t epochs = 45;
  std::size_t batch = 4;
  double lr = 1e-3;
  double final_lr = 1e-5;
  double wd = 0.003;
  std::size_t warmup_epochs = 4;
  std::size_t num_points = 20000;
  float voxel_size = 0.1f;  // 0 disables downsampling
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 keeps only the final checkpoint

  std::size_t steps_per_epoch(std::size_t scans) const { return (scans + batch - 1) / batch; }

  Schedule schedule(std::size_t scans) const {
    const std::size_t spe = steps_per_epoch(scans);
    // Runs shorter than the warmup never leave it.
    return Schedule{std::min(warmup_epochs, epochs) * spe, epochs * spe, lr, final_lr};
  }

  void validate() const {
    if (epochs == 0) throw Error("config: epochs must be at least 1");
    if (batch == 0) throw Error("config: batch must be at least 1");
    if (num_points == 0) throw Error("config: num_points must be at least 1");
    if (!(lr >= 0.0) || !(wd >= 0.0)) throw Error("config: lr and wd must be non-negative");
    if (voxel_size < 0.0f) throw Error("config: voxel_size must be non-negative");
  }
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;  // rate used by the epoch's last step
  double train_acc = 0.0;
  double wall_seconds = 0.0;
};

template <typename T>
struct TrainCallbacks {
  std::function<void(std::size_t step, double loss)> on_step;
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(std::size_t epoch, const WaffleIron<T>&, const OptimState<T>&)> on_checkpoint;
};

/// Accuracy over scored points (valid, non-ignore).
inline double point_accuracy(std::span<const std::int32_t> pred, std::span<const std::int32_t> labels,
                             std::span<const std::uint8_t> valid, std::size_t* scored = nullptr) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if ((!valid.empty() && !valid[i]) || labels[i] == kIgnoreLabel) continue;
    ++total;
    hit += pred[i] == labels[i];
  }
  if (scored) *scored = total;
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// Applies one training step's gradient accumulation for a single prepared
/// cloud. Returns the loss; `correct`/`scored` receive accuracy counts.
template <typename T>
double accumulate_gradients(WaffleIron<T>& model, const PointCloud& pc, Rng& rng, double grad_scale,
                            std::size_t* correct = nullptr, std::size_t* scored = nullptr) {
  const SceneInputs<T> in = prepare_inputs<T>(pc, model.config());
  ForwardTape<T> tape;
  const Tensor<T> logits = model.forward(in, ForwardOptions::train(), &rng, &tape);
  LossResult<T> loss = segmentation_loss(logits, pc.labels, pc.valid);
  for (auto& g : loss.grad.values()) g = static_cast<T>(g * grad_scale);
  model.backward(in, tape, loss.grad);
  if (correct || scored) {
    const auto pred = argmax_labels(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!pc.valid[i] || pc.labels[i] == kIgnoreLabel) continue;
      if (scored) ++*scored;
      if (correct && pred[i] == pc.labels[i]) ++*correct;
    }
  }
  return loss.value;
}

/// Pre-network preparation of one training scan: voxel downsampling,
/// augmentation, FOV crop and fixed-size sampling.
inline PointCloud prepare_training_cloud(const PointCloud& raw, const WaffleIronConfig& model_cfg,
                                         const TrainConfig& cfg, const AugmentConfig& aug, Rng& rng,
                                         const InstanceBank* bank, const PointCloud* partner) {
  PointCloud pc = cfg.voxel_size > 0.0f ? voxel_downsample(raw, cfg.voxel_size).cloud : raw;
  pc = augment_scene(pc, aug, rng, bank, partner);
  pc = crop_fov(pc, model_cfg.fov).inside;
  if (pc.valid_count() == 0) throw Error("no points inside the field of view");
  return sample_fixed(pc, cfg.num_points, rng);
}

/// Runs cfg.epochs epochs of AdamW over the dataset. Each optimizer step
/// accumulates gradients over up to cfg.batch scans, each weighted 1/batch.
template <typename T>
void train_loop(WaffleIron<T>& model, OptimState<T>& state, const Dataset& data, const TrainConfig& cfg,
                const AugmentConfig& aug, const InstanceBank* bank = nullptr, const TrainCallbacks<T>& cb = {}) {
  cfg.validate();
  aug.validate();
  if (data.size() == 0) throw Error("train: dataset is empty");
  const Schedule sched = cfg.schedule(data.size());
  sched.validate();
  state.settings.weight_decay = cfg.wd;
  state.base_lr = cfg.lr;
  Rng rng(cfg.seed);
  std::size_t step = state.step;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double loss_sum = 0.0, lr = 0.0;
    std::size_t loss_count = 0, correct = 0, scored = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      model.params().zero_grad();
      double step_loss = 0.0;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        try {
          const PointCloud raw = data.load(idx);
          PointCloud partner;
          const bool use_partner = aug.polarmix && data.size() > 1;
          if (use_partner) {
            std::size_t other = rng.index(data.size() - 1);
            if (other >= idx) ++other;
            partner = data.load(other);
            if (cfg.voxel_size > 0.0f) partner = voxel_downsample(partner, cfg.voxel_size).cloud;
          }
          const PointCloud pc =
              prepare_training_cloud(raw, model.config(), cfg, aug, rng, bank, use_partner ? &partner : nullptr);
          const double loss = accumulate_gradients(model, pc, rng, 1.0 / static_cast<double>(stop - start),
                                                   &correct, &scored);
          step_loss += loss;
          loss_sum += loss;
          ++loss_count;
        } catch (const Error& e) {
          throw Error("scan " + data.name(idx) + ": " + e.what());
        }
      }
      ++step;
      lr = lr_at(std::min(step, sched.total_steps), sched);
      adamw_step(model.params(), state, lr);
      if (cb.on_step) cb.on_step(step, step_loss / static_cast<double>(stop - start));
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    stats.lr = lr;
    stats.train_acc = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
    stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cb.on_epoch) cb.on_epoch(stats);
    const bool cadence = cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0;
    if (cb.on_checkpoint && (cadence || epoch == cfg.epochs)) cb.on_checkpoint(epoch, model, state);
  }
}

// ---------------------------------------------------------------------------
// Overfit harness on the synthetic z-band scene.

struct OverfitSettings {
  std::size_t points = 1000;
  std::size_t steps = 200;
  std::size_t warmup_steps = 20;
  double peak_lr = 1e-2;
  double final_lr = 1e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 7;
  WaffleIronConfig model = default_model();

  static WaffleIronConfig default_model() {
    WaffleIronConfig c;
    c.depth = 3;
    c.width = 32;
    c.rho = 0.5f;
    c.fov = zband_fov();
    c.k_neighbors = 8;
    c.num_classes = 3;
    c.drop_prob = 0.0;
    return c;
  }
};

struct OverfitResult {
  std::vector<double> losses;  // one per step
  double train_accuracy = 0.0;  // eval-mode, after the last step
  WaffleIron<float> model;
  OptimState<float> state;
  PointCloud scene;
};

/// Repeated full-scene steps on one fixed synthetic scene.
inline OverfitResult run_overfit(const OverfitSettings& s) {
  PointCloud scene = make_zband_scene(s.points, s.seed, s.model.feature_mode);
  WaffleIron<float> model(s.model, s.seed + 1);
  auto state = OptimState<float>::for_params(model.params(), AdamWSettings{0.9, 0.999, 1e-8, s.weight_decay}, s.peak_lr);
  const Schedule sched{s.warmup_steps, s.steps, s.peak_lr, s.final_lr};
  sched.validate();
  const SceneInputs<float> in = prepare_inputs<float>(scene, s.model);
  Rng rng(s.seed + 2);
  std::vector<double> losses;
  for (std::size_t step = 0; step < s.steps; ++step) {
    model.params().zero_grad();
    ForwardTape<float> tape;
    const Tensor<float> logits = model.forward(in, ForwardOptions::train(), &rng, &tape);
    const LossResult<float> loss = segmentation_loss(logits, scene.labels, scene.valid);
    model.backward(in, tape, loss.grad);
    adamw_step(model.params(), state, lr_at(step + 1, sched));
    losses.push_back(loss.value);
  }
  const Tensor<float> logits = model.forward(in, ForwardOptions::eval());
  const double acc = point_accuracy(argmax_labels(logits), scene.labels, scene.valid);
  return OverfitResult{std::move(losses), acc, std::move(model), std::move(state), std::move(scene)};
}

}  // namespace waffle
