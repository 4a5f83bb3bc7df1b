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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "model_check.hpp"
#include "oracles.hpp"
#include "waffle/training.hpp"

namespace waffle {
namespace {

using oracle::random_tensor;
using TD = Tensor<double>;

std::vector<std::int32_t> random_labels(std::size_t n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> out(n);
  for (auto& l : out) l = static_cast<std::int32_t>(rng.index(k));
  return out;
}

/// Lovász extension of the Jaccard loss by its threshold-integral definition:
/// sum over distinct error levels v_1 > v_2 > ... of (v_k - v_{k+1}) * J(M_k),
/// where M_k = {i : e_i >= v_k} and J(M) = |M| / |gt u M|.
double lovasz_oracle(const TD& probs, const std::vector<std::int32_t>& labels) {
  const std::size_t k = probs.dim(0), n = probs.dim(1);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> e(n);
    std::vector<bool> gt(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = labels[i] == static_cast<std::int32_t>(c);
      any = any || gt[i];
      e[i] = gt[i] ? 1.0 - probs(c, i) : probs(c, i);
    }
    if (!any) continue;
    ++present;
    std::set<double, std::greater<>> levels(e.begin(), e.end());
    std::vector<double> v(levels.begin(), levels.end());
    v.push_back(0.0);
    double f = 0.0;
    for (std::size_t l = 0; l + 1 < v.size(); ++l) {
      std::size_t m = 0, uni = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool in = e[i] >= v[l];
        m += in;
        uni += in || gt[i];
      }
      f += (v[l] - v[l + 1]) * static_cast<double>(m) / static_cast<double>(uni);
    }
    total += f;
  }
  return total / static_cast<double>(present);
}

TEST(CrossEntropyTest, UniformLogitsGiveLogK) {
  const TD logits({19, 6});
  const auto r = cross_entropy(logits, std::vector<std::int32_t>{0, 3, 18, 7, 7, 1}, {});
  EXPECT_NEAR(r.value, std::log(19.0), 1e-12);
  EXPECT_NEAR(std::log(19.0), 2.944, 1e-3);
}

TEST(CrossEntropyTest, LargeMarginOnCorrectClassIsNearZero) {
  TD logits({3, 2});
  logits(1, 0) = 60.0;
  logits(2, 1) = 60.0;
  EXPECT_LT(cross_entropy(logits, std::vector<std::int32_t>{1, 2}, {}).value, 1e-20);
}

TEST(CrossEntropyTest, MatchesLogSumExpOracleAndFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TD logits = random_tensor<double>({4, 10}, seed, -3.0, 3.0);
    auto labels = random_labels(10, 4, seed + 1);
    labels[2] = kIgnoreLabel;
    std::vector<std::uint8_t> valid(10, 1);
    valid[7] = 0;
    double want = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      if (!valid[i] || labels[i] == kIgnoreLabel) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += std::exp(logits(c, i));
      want += std::log(s) - logits(static_cast<std::size_t>(labels[i]), i);
      ++count;
    }
    want /= static_cast<double>(count);
    const auto r = cross_entropy(logits, labels, valid);
    EXPECT_NEAR(r.value, want, 1e-6);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(r.grad(c, 2), 0.0);
      EXPECT_EQ(r.grad(c, 7), 0.0);
    }
    const nn::GradTarget t[] = {{"logits", logits.values(), r.grad.values()}};
    EXPECT_LT(nn::grad_check([&] { return cross_entropy(logits, labels, valid).value; }, t, 1e-3), 1e-4);
  }
}

TEST(CrossEntropyTest, NoScoredPointsOrBadLabelsThrow) {
  const TD logits({3, 2});
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel}, {}), Error);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0, 1}, std::vector<std::uint8_t>{0, 0}), Error);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0, 3}, {}), Error);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::int32_t>{0}, {}), Error);
}

TEST(LovaszTest, PerfectPredictionsGiveZero) {
  TD probs({3, 4});
  const std::vector<std::int32_t> labels{0, 2, 1, 2};
  for (std::size_t i = 0; i < 4; ++i) probs(static_cast<std::size_t>(labels[i]), i) = 1.0;
  EXPECT_EQ(lovasz_softmax(probs, labels, {}).value, 0.0);
}

TEST(LovaszTest, SingleConfidentMistakeGivesOne) {
  const TD probs({2, 1}, {0.0, 1.0});
  EXPECT_DOUBLE_EQ(lovasz_softmax(probs, std::vector<std::int32_t>{0}, {}).value, 1.0);
}

TEST(LovaszTest, MatchesThresholdIntegralOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TD probs = softmax(random_tensor<double>({3, 8}, seed, -2.0, 2.0));
    const auto labels = random_labels(8, 3, seed + 50);
    EXPECT_NEAR(lovasz_softmax(probs, labels, {}).value, lovasz_oracle(probs, labels), 1e-12) << "seed " << seed;
  }
}

TEST(LovaszTest, InvariantToPointPermutation) {
  const TD probs = softmax(random_tensor<double>({4, 30}, 3, -2.0, 2.0));
  const auto labels = random_labels(30, 4, 4);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(5);
  for (std::size_t i = 30; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  TD pp({4, 30});
  std::vector<std::int32_t> lp(30);
  for (std::size_t j = 0; j < 30; ++j) {
    lp[j] = labels[perm[j]];
    for (std::size_t c = 0; c < 4; ++c) pp(c, j) = probs(c, perm[j]);
  }
  const auto a = lovasz_softmax(probs, labels, {}), b = lovasz_softmax(pp, lp, {});
  EXPECT_EQ(a.value, b.value);
  for (std::size_t j = 0; j < 30; ++j)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(b.grad(c, j), a.grad(c, perm[j]));
}

TEST(LovaszTest, IgnoresPaddingAndIgnoreLabels) {
  const TD probs = softmax(random_tensor<double>({3, 8}, 6));
  auto labels = random_labels(8, 3, 7);
  const double base = lovasz_softmax(probs, labels, {}).value;
  TD wider({3, 10});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 8; ++i) wider(c, i) = probs(c, i);
  wider(0, 8) = wider(1, 9) = 1.0;
  labels.push_back(kIgnoreLabel);
  labels.push_back(2);
  std::vector<std::uint8_t> valid(10, 1);
  valid[9] = 0;
  EXPECT_NEAR(lovasz_softmax(wider, labels, valid).value, base, 1e-15);
}

TEST(SegmentationLossTest, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TD logits = random_tensor<double>({4, 12}, seed, -2.0, 2.0);
    const auto labels = random_labels(12, 4, seed + 9);
    const auto r = segmentation_loss(logits, labels, {});
    EXPECT_NEAR(r.value,
                cross_entropy(logits, labels, {}).value + lovasz_softmax(softmax(logits), labels, {}).value, 1e-12);
    const nn::GradTarget t[] = {{"logits", logits.values(), r.grad.values()}};
    EXPECT_LT(nn::grad_check([&] { return segmentation_loss(logits, labels, {}).value; }, t, 1e-5), 1e-3)
        << "seed " << seed;
  }
}

TEST(ArgmaxTest, TiesGoToLowerClass) {
  const Tensor<float> s({3, 3}, {0.2f, 0.5f, 0.1f, 0.2f, 0.5f, 0.7f, 0.1f, 0.0f, 0.7f});
  EXPECT_EQ(argmax_labels(s), (std::vector<std::int32_t>{0, 0, 1}));
}

ParamStore<double> scalar_store(double value, double grad) {
  ParamStore<double> ps;
  auto& p = ps.add("w", Tensor<double>({1}, value));
  p.grad[0] = grad;
  ps.add("stat", Tensor<double>({1}, 5.0), false);
  return ps;
}

TEST(AdamWTest, SingleStepMatchesHandCalculation) {
  auto ps = scalar_store(0.5, 0.2);
  auto st = OptimState<double>::for_params(ps, AdamWSettings{0.9, 0.999, 1e-8, 0.01});
  adamw_step(ps, st, 0.1);
  // Decay: 0.5 - 0.1 * 0.01 * 0.5 = 0.4995. m_hat = 0.2, v_hat = 0.04.
  const double want = 0.4995 - 0.1 * 0.2 / (0.2 + 1e-8);
  EXPECT_NEAR(ps.at("w").value[0], want, 1e-15);
  EXPECT_NEAR(st.m.at("w")[0], 0.02, 1e-15);
  EXPECT_NEAR(st.v.at("w")[0], 0.001 * 0.04, 1e-15);
  EXPECT_EQ(ps.at("stat").value[0], 5.0);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamWTest, ZeroGradientsWithoutDecayLeaveParameters) {
  auto ps = scalar_store(0.5, 0.0);
  auto st = OptimState<double>::for_params(ps, AdamWSettings{0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) adamw_step(ps, st, 0.1);
  EXPECT_EQ(ps.at("w").value[0], 0.5);
}

TEST(AdamWTest, DecayShrinksGeometrically) {
  auto ps = scalar_store(2.0, 0.0);
  auto st = OptimState<double>::for_params(ps, AdamWSettings{0.9, 0.999, 1e-8, 0.5});
  for (int i = 0; i < 3; ++i) adamw_step(ps, st, 0.1);
  EXPECT_NEAR(ps.at("w").value[0], 2.0 * std::pow(1.0 - 0.05, 3), 1e-14);
}

TEST(AdamWTest, NonFiniteGradientNamesParameterAndChangesNothing) {
  ParamStore<double> ps;
  ps.add("a", Tensor<double>({2}, 1.0)).grad[0] = 0.5;
  ps.add("b", Tensor<double>({2}, 1.0)).grad[1] = NAN;
  auto st = OptimState<double>::for_params(ps);
  try {
    adamw_step(ps, st, 0.1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(ps.at("a").value[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(ScheduleTest, Endpoints) {
  const Schedule s{400, 4500, 1e-3, 1e-5};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_EQ(lr_at(400, s), 1e-3);
  EXPECT_NEAR(lr_at(4500, s), 1e-5, 1e-12);
  EXPECT_NEAR(lr_at(200, s), 5e-4, 1e-15);
  EXPECT_THROW(lr_at(4501, s), Error);
}

TEST(ScheduleTest, PeakIsExactForAnyWarmupLength) {
  for (std::size_t w = 1; w < 3000; w += 7) EXPECT_EQ(lr_at(w, Schedule{w, w + 10, 1e-3, 1e-5}), 1e-3) << w;
}

TEST(ScheduleTest, ContinuousAtJunctionAndMonotoneAfter) {
  const Schedule s{40, 450, 1e-3, 1e-5};
  EXPECT_NEAR(lr_at(41, s), lr_at(40, s), 1e-3 * 1e-4);
  for (std::size_t t = 1; t <= 40; ++t) EXPECT_GT(lr_at(t, s), lr_at(t - 1, s));
  for (std::size_t t = 41; t <= 450; ++t) EXPECT_LE(lr_at(t, s), lr_at(t - 1, s));
}

TEST(ScheduleTest, TrainConfigDerivesStepsFromEpochs) {
  TrainConfig cfg;
  const Schedule s = cfg.schedule(10);
  EXPECT_EQ(s.warmup_steps, 4u * 3u);
  EXPECT_EQ(s.total_steps, 45u * 3u);
  cfg.epochs = 1;
  EXPECT_EQ(cfg.schedule(1).warmup_steps, 1u);
  EXPECT_NO_THROW(cfg.schedule(1).validate());
  EXPECT_THROW((Schedule{5, 4}).validate(), Error);
  EXPECT_EQ(lr_at(0, Schedule{0, 10, 1e-3, 1e-5}), 1e-3);
}

TEST(ZbandSceneTest, LabelsFollowHeightBands) {
  const PointCloud pc = make_zband_scene(500, 3);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const float z = pc.positions[i][2];
    EXPECT_EQ(pc.labels[i], z < -0.5f ? 0 : (z < 0.5f ? 1 : 2));
    EXPECT_TRUE(zband_fov().contains(pc.positions[i]));
  }
}

WaffleIronConfig tiny_model() {
  WaffleIronConfig m = OverfitSettings::default_model();
  m.width = 8;
  m.k_neighbors = 4;
  m.rho = 1.0f;
  return m;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 1;
  t.batch = 1;
  t.num_points = 200;
  t.voxel_size = 0.0f;
  return t;
}

TEST(TrainLoopTest, ZeroLearningRateLeavesParameters) {
  WaffleIron<float> model(tiny_model(), 1);
  auto state = OptimState<float>::for_params(model.params());
  const InMemoryDataset data({make_zband_scene(300, 2)});
  TrainConfig cfg = tiny_train();
  cfg.lr = 0.0;
  cfg.final_lr = 0.0;
  const WaffleIron<float> before = model;
  std::size_t steps = 0;
  TrainCallbacks<float> cb;
  cb.on_step = [&](std::size_t, double loss) {
    ++steps;
    EXPECT_TRUE(std::isfinite(loss));
  };
  train_loop(model, state, data, cfg, AugmentConfig{}, nullptr, cb);
  EXPECT_EQ(steps, 1u);
  for (const auto& [name, p] : before.params())
    if (p.trainable) {
      EXPECT_EQ(model.params().at(name).value, p.value) << name;
    }
}

TEST(TrainLoopTest, CallbacksAndCheckpointCadence) {
  WaffleIron<float> model(tiny_model(), 3);
  auto state = OptimState<float>::for_params(model.params());
  InMemoryDataset data;
  for (std::uint64_t s = 0; s < 3; ++s) data.add(make_zband_scene(150, s + 10), "scan" + std::to_string(s));
  TrainConfig cfg = tiny_train();
  cfg.epochs = 5;
  cfg.batch = 2;
  cfg.warmup_epochs = 1;
  cfg.checkpoint_every = 2;
  std::vector<std::size_t> checkpoints, epochs;
  TrainCallbacks<float> cb;
  cb.on_epoch = [&](const EpochStats& s) {
    epochs.push_back(s.epoch);
    EXPECT_TRUE(std::isfinite(s.mean_loss));
    EXPECT_GE(s.train_acc, 0.0);
    EXPECT_LE(s.train_acc, 1.0);
  };
  cb.on_checkpoint = [&](std::size_t e, const WaffleIron<float>&, const OptimState<float>&) {
    checkpoints.push_back(e);
  };
  train_loop(model, state, data, cfg, AugmentConfig{}, nullptr, cb);
  EXPECT_EQ(epochs, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(checkpoints, (std::vector<std::size_t>{2, 4, 5}));
  EXPECT_EQ(state.step, 10u);
}

TEST(TrainLoopTest, ErrorsNameTheScan) {
  WaffleIron<float> model(tiny_model(), 4);
  auto state = OptimState<float>::for_params(model.params());
  PointCloud far = make_zband_scene(50, 5);
  for (auto& p : far.positions) p[0] += 100.0f;
  refresh_derived_features(far);
  InMemoryDataset data;
  data.add(far, "000042");
  try {
    train_loop(model, state, data, tiny_train(), AugmentConfig{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("scan 000042"), std::string::npos) << e.what();
  }
}

TEST(TrainLoopTest, SeededRunsAreIdentical) {
  auto run = [] {
    WaffleIron<float> model(tiny_model(), 6);
    auto state = OptimState<float>::for_params(model.params());
    InMemoryDataset data;
    for (std::uint64_t s = 0; s < 2; ++s) data.add(make_zband_scene(150, s + 20));
    TrainConfig cfg = tiny_train();
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    AugmentConfig aug;
    aug.polarmix = true;
    train_loop(model, state, data, cfg, aug);
    return model;
  };
  const auto a = run(), b = run();
  for (const auto& [name, p] : a.params()) EXPECT_EQ(b.params().at(name).value, p.value) << name;
}

TEST(EndToEndGradientTest, WaffleIron3x32SegmentationLoss) {
  WaffleIronConfig cfg = OverfitSettings::default_model();
  cfg.rho = 1.0f;
  WaffleIron<double> model(cfg, 11);
  for (auto& [name, p] : model.params())
    if (name.ends_with(".scale")) p.value.fill(0.5);
  const PointCloud pc = make_zband_scene(60, 12);
  const auto in = prepare_inputs<double>(pc, cfg);
  auto loss = [&](const TD& logits) { return segmentation_loss(logits, pc.labels, pc.valid); };
  const auto r = oracle::model_grad_check(model, in, oracle::check_options(), 0, loss, 1e-5);
  EXPECT_EQ(r.scalars, param_count(cfg));
  EXPECT_LT(r.error, 1e-3);
}

const OverfitResult& overfit() {
  static const OverfitResult r = run_overfit(OverfitSettings{});
  return r;
}

TEST(OverfitTest, ReachesNinetyNinePercent) {
  EXPECT_GE(overfit().train_accuracy, 0.99);
  EXPECT_EQ(overfit().losses.size(), 200u);
}

TEST(OverfitTest, LossDecreasesInTrend) {
  const auto& losses = overfit().losses;
  std::vector<double> medians;
  for (std::size_t w = 0; w + 10 <= losses.size(); w += 10) {
    std::vector<double> win(losses.begin() + static_cast<long>(w), losses.begin() + static_cast<long>(w + 10));
    for (double v : win) ASSERT_TRUE(std::isfinite(v));
    std::nth_element(win.begin(), win.begin() + 5, win.end());
    medians.push_back(win[5]);
  }
  std::size_t down = 0;
  for (std::size_t i = 1; i < medians.size(); ++i) down += medians[i] < medians[i - 1];
  EXPECT_GE(down * 10, (medians.size() - 1) * 8);
  EXPECT_LT(medians.back(), 0.1 * medians.front());
}

}  // namespace
}  // namespace waffle
