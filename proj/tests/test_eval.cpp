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

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "waffle/eval.hpp"
#include "waffle/io.hpp"

namespace waffle {
namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t g = 0; g < rows.size(); ++g)
    for (std::size_t p = 0; p < rows.size(); ++p) cm.at(g, p) = rows[g][p];
  return cm;
}

TEST(ConfusionTest, PerfectPredictionsAreDiagonal) {
  ConfusionMatrix cm(3);
  const std::vector<std::int32_t> gt{0, 1, 2, 2, 1, 0, 0};
  cm.update(gt, gt);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(cm.at(g, p), g == p ? (g == 0 ? 3u : 2u) : 0u);
  EXPECT_EQ(cm.total(), gt.size());
}

TEST(ConfusionTest, IgnoredPointsAreNeverCounted) {
  ConfusionMatrix cm(2);
  cm.update(std::vector<std::int32_t>{0, 1, 1}, std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel, kIgnoreLabel});
  EXPECT_EQ(cm, ConfusionMatrix(2));
}

TEST(ConfusionTest, MatchesCountingOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<std::int32_t> pred(500), gt(500);
    for (std::size_t i = 0; i < 500; ++i) {
      pred[i] = static_cast<std::int32_t>(rng.index(5));
      gt[i] = rng.bernoulli(0.1) ? kIgnoreLabel : static_cast<std::int32_t>(rng.index(5));
    }
    ConfusionMatrix cm(5);
    cm.update(pred, gt);
    std::size_t scored = 0;
    for (std::size_t g = 0; g < 5; ++g)
      for (std::size_t p = 0; p < 5; ++p) {
        std::uint64_t n = 0;
        for (std::size_t i = 0; i < 500; ++i)
          n += gt[i] == static_cast<std::int32_t>(g) && pred[i] == static_cast<std::int32_t>(p);
        EXPECT_EQ(cm.at(g, p), n);
      }
    for (auto g : gt) scored += g != kIgnoreLabel;
    EXPECT_EQ(cm.total(), scored);
  }
}

TEST(ConfusionTest, OutOfRangeLabelsThrowWithoutCounting) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(cm.update(std::vector<std::int32_t>{0, 1}, std::vector<std::int32_t>{0, 3}), Error);
  EXPECT_THROW(cm.update(std::vector<std::int32_t>{0, 5}, std::vector<std::int32_t>{0, 1}), Error);
  EXPECT_THROW(cm.update(std::vector<std::int32_t>{0}, std::vector<std::int32_t>{0, 1}), Error);
  EXPECT_EQ(cm.total(), 0u);
}

TEST(ConfusionTest, MergingIsAddition) {
  ConfusionMatrix a(2), b(2), both(2);
  const std::vector<std::int32_t> p1{0, 1, 1}, g1{0, 0, 1}, p2{1, 0}, g2{1, 1};
  a.update(p1, g1);
  b.update(p2, g2);
  both.update(p1, g1);
  both.update(p2, g2);
  ConfusionMatrix sum = a;
  sum += b;
  EXPECT_EQ(sum, both);
  ConfusionMatrix other(3);
  EXPECT_THROW(other += a, Error);
}

TEST(IouTest, DiagonalMatrixGivesOne) {
  const auto r = iou(from_rows({{4, 0, 0}, {0, 2, 0}, {0, 0, 9}}));
  for (double v : r.per_class) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.miou, 1.0);
}

TEST(IouTest, TwoClassHandCount) {
  const auto r = iou(from_rows({{3, 1}, {1, 3}}));
  EXPECT_DOUBLE_EQ(r.per_class[0], 0.6);
  EXPECT_DOUBLE_EQ(r.per_class[1], 0.6);
  EXPECT_DOUBLE_EQ(r.miou, 0.6);
  EXPECT_EQ(miou_line(r), "mIoU 60.00");
}

TEST(IouTest, AbsentClassIsExcluded) {
  const auto r = iou(from_rows({{3, 0, 1}, {0, 0, 0}, {1, 0, 3}}));
  EXPECT_FALSE(r.included(1));
  EXPECT_TRUE(std::isnan(r.per_class[1]));
  EXPECT_DOUBLE_EQ(r.miou, 0.6);
  EXPECT_EQ(iou_csv(r), "class,iou\nclass0,0.59999999999999998\nclass1,nan\nclass2,0.59999999999999998\n");
  const std::vector<std::string> names{"car", "", "road"};
  EXPECT_NE(iou_table(r, names).find("road"), std::string::npos);
  EXPECT_NE(iou_table(r, names).find("class1"), std::string::npos);
}

TEST(IouTest, ScaleFree) {
  Rng rng(3);
  ConfusionMatrix cm(4);
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t p = 0; p < 4; ++p) cm.at(g, p) = rng.index(20);
  const auto a = iou(cm);
  ConfusionMatrix scaled(4);
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t p = 0; p < 4; ++p) scaled.at(g, p) = 7 * cm.at(g, p);
  const auto b = iou(scaled);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a.per_class[c], b.per_class[c], 1e-15);
  EXPECT_NEAR(a.miou, b.miou, 1e-15);
}

TEST(IouTest, ConstantPredictorOnBalancedScene) {
  ConfusionMatrix cm(2);
  cm.update(std::vector<std::int32_t>{0, 0, 0, 0}, std::vector<std::int32_t>{0, 0, 1, 1});
  const auto r = iou(cm);
  EXPECT_DOUBLE_EQ(r.per_class[0], 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[1], 0.0);
  EXPECT_DOUBLE_EQ(r.miou, 0.25);
}

WaffleIronConfig small_model() {
  WaffleIronConfig m = OverfitSettings::default_model();
  m.width = 8;
  m.k_neighbors = 4;
  return m;
}

TEST(TtaTest, SingleIdentityVariantEqualsPlainInference) {
  WaffleIron<float> model(small_model(), 1);
  const PointCloud pc = make_zband_scene(200, 2);
  TtaOptions opt;
  opt.n_aug = 1;
  opt.transform = false;
  opt.stochastic_depth = false;
  Rng rng(3);
  EXPECT_EQ(tta_probs(model, pc, opt, rng), predict_probs(model, pc));
  opt.n_aug = 10;
  EXPECT_EQ(tta_infer(model, pc, opt, rng), argmax_labels(predict_probs(model, pc)));
  opt.n_aug = 0;
  EXPECT_THROW(tta_probs(model, pc, opt, rng), Error);
}

TEST(TtaTest, ProbabilitiesStayNormalizedUnderTransformsAndDrops) {
  auto cfg = small_model();
  cfg.drop_prob = 0.3;
  WaffleIron<float> model(cfg, 4);
  const PointCloud pc = make_zband_scene(150, 5);
  Rng rng(6);
  const auto probs = tta_probs(model, pc, TtaOptions{}, rng);
  ASSERT_EQ(probs.shape(), (Shape{3, 150}));
  for (std::size_t i = 0; i < 150; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += probs(c, i);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
  Rng again(6);
  EXPECT_EQ(tta_probs(model, pc, TtaOptions{}, again), probs);
}

const OverfitResult& trained() {
  static const OverfitResult r = run_overfit(OverfitSettings{});
  return r;
}

TEST(TtaTest, AccuracyWithinOnePointOfPlainInference) {
  WaffleIron<float> model = trained().model;
  const PointCloud& scene = trained().scene;
  const double plain = point_accuracy(argmax_labels(predict_probs(model, scene)), scene.labels, scene.valid);
  Rng rng(7);
  const double tta = point_accuracy(tta_infer(model, scene, TtaOptions{}, rng), scene.labels, scene.valid);
  EXPECT_GE(tta, plain - 0.01) << "plain " << plain << " tta " << tta;
}

TEST(EvaluateTest, PerfectModelScoresOne) {
  WaffleIron<float> model = trained().model;
  ASSERT_EQ(trained().train_accuracy, 1.0);
  const InMemoryDataset data({trained().scene});
  InferOptions opt;
  opt.voxel_size = 0.0f;
  const auto report = evaluate_split(data, model, opt);
  EXPECT_EQ(report.result.miou, 1.0);
  EXPECT_EQ(report.cm.total(), trained().scene.size());
}

TEST(EvaluateTest, EveryOriginalPointReceivesALabel) {
  WaffleIron<float> model(small_model(), 8);
  PointCloud pc = make_zband_scene(300, 9);
  // Points outside the field of view and duplicates inside one voxel.
  PointCloud extra = make_cloud({Vec3{10.0f, 0.0f, 0.0f}, Vec3{-6.0f, 7.0f, 2.5f}, pc.positions[0], pc.positions[0]},
                                std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f}, FeatureMode::k5);
  extra.labels = {0, 1, 2, 2};
  append_rows(pc, extra);
  InferOptions opt;
  opt.voxel_size = 0.1f;
  const auto pred = infer_scan(model, pc, opt);
  ASSERT_EQ(pred.size(), pc.size());
  for (auto p : pred) {
    EXPECT_GE(p, 0);
    EXPECT_LT(p, 3);
  }
  opt.tta = true;
  opt.tta_options.n_aug = 2;
  EXPECT_EQ(infer_scan(model, pc, opt).size(), pc.size());
}

TEST(EvaluateTest, MissingLabelsAreListed) {
  WaffleIron<float> model(small_model(), 10);
  InMemoryDataset data;
  data.add(make_zband_scene(50, 1), "a");
  PointCloud unlabeled = make_zband_scene(50, 2);
  unlabeled.labels.clear();
  data.add(unlabeled, "b");
  data.add(unlabeled, "c");
  try {
    evaluate_split(data, model, InferOptions{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("missing label files for scans: b, c"), std::string::npos) << e.what();
  }
}

TEST(EvaluateTest, StoredPredictionFilesMatchInMemoryPath) {
  fixture::TempDir dir("eval");
  const ClassMap map = ClassMap::parse("0 ignore\n10 0\n11 1\n40 2\n44 2\n", "map");
  std::vector<PointCloud> scans;
  for (std::uint64_t s = 0; s < 3; ++s) {
    PointCloud pc = make_zband_scene(250, s + 30);
    pc.labels[5] = kIgnoreLabel;
    scans.push_back(pc);
  }
  fixture::write_dataset(dir.path(), "val", scans, map);
  const DirectoryDataset data(dir.path(), "val", ScanFormat::kitti4, FeatureMode::k5, map);
  WaffleIron<float> model(small_model(), 11);
  std::vector<std::vector<std::int32_t>> preds;
  const auto report = evaluate_split(data, model, InferOptions{}, &preds);
  ASSERT_EQ(preds.size(), 3u);
  fs::create_directories(dir / "pred");
  for (std::size_t i = 0; i < 3; ++i)
    write_label_words(dir / "pred" / (data.name(i) + ".label"), encode_predictions(preds[i], map));
  EXPECT_EQ(evaluate_prediction_files(dir / "pred", data, 3), report.cm);
  EXPECT_EQ(report.cm.total(), 3u * 249u);
}

}  // namespace
}  // namespace waffle
