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
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "waffle/eval.hpp"
#include "waffle/io.hpp"
#include "waffle/projection.hpp"
#include "waffle/training.hpp"

namespace waffle {

namespace cli_detail {

inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got \"" + s + "\"");
    apply_setting(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
}

/// Explicit map path wins; otherwise <data>/class_map.txt when present.
inline ClassMap resolve_class_map(const std::string& explicit_path, const fs::path& data_dir) {
  if (!explicit_path.empty()) return ClassMap::load(explicit_path);
  if (!data_dir.empty() && fs::exists(data_dir / "class_map.txt")) return ClassMap::load(data_dir / "class_map.txt");
  return {};
}

inline std::string tsv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

struct TrainArgs {
  std::string config, data, out, split = "train";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

inline int run_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = load_config(a.config);
  apply_overrides(cfg, a.sets);
  if (a.seed_given) cfg.train.seed = a.seed;
  cfg.model.validate();
  const ClassMap map = resolve_class_map(cfg.class_map, a.data);
  DirectoryDataset data(a.data, a.split, parse_scan_format(cfg.format), cfg.model.feature_mode, map);
  if (data.size() == 0) throw Error("dataset " + a.data + "/" + a.split + " has no scans");
  fs::create_directories(a.out);

  InstanceBank bank;
  if (cfg.augment.cutmix) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const PointCloud pc = data.load(i);
      if (pc.has_instances()) bank.add_scan(pc, cfg.augment.instance_classes);
    }
    for (auto c : bank.missing_classes()) out << "warning: no instances of class " << c << " found\n";
    save_instance_bank(fs::path(a.out) / "instance_bank", bank);
  }

  WaffleIron<float> model(cfg.model, cfg.train.seed);
  auto state = OptimState<float>::for_params(model.params(), AdamWSettings{0.9, 0.999, 1e-8, cfg.train.wd},
                                             cfg.train.lr);
  std::ofstream log(fs::path(a.out) / "train_log.tsv", std::ios::trunc);
  if (!log) throw Error("cannot write " + (fs::path(a.out) / "train_log.tsv").string());
  TrainCallbacks<float> cb;
  cb.on_epoch = [&](const EpochStats& s) {
    log << s.epoch << '\t' << tsv_number(s.mean_loss) << '\t' << tsv_number(s.lr) << '\t' << tsv_number(s.train_acc)
        << '\t' << tsv_number(s.wall_seconds) << '\n';
    log.flush();
    out << "epoch " << s.epoch << " loss " << s.mean_loss << " acc " << s.train_acc << '\n';
  };
  cb.on_checkpoint = [&](std::size_t epoch, const WaffleIron<float>& m, const OptimState<float>& st) {
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_epoch%03zu.wfli", epoch);
    save_checkpoint(fs::path(a.out) / name, m, &st);
  };
  train_loop(model, state, data, cfg.train, cfg.augment, cfg.augment.cutmix ? &bank : nullptr, cb);
  save_checkpoint(fs::path(a.out) / "model.wfli", model, &state);
  out << "wrote " << (fs::path(a.out) / "model.wfli").string() << '\n';
  return 0;
}

struct InferArgs {
  std::string ckpt, scan, out, format = "kitti4", class_map;
  bool tta = false;
  std::size_t n_aug = 10;
  std::uint64_t seed = 0;
  float voxel = 0.1f;
};

inline int run_infer(const InferArgs& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const ClassMap map = resolve_class_map(a.class_map, {});
  const PointCloud pc = read_scan(a.scan, parse_scan_format(a.format), ck.model.config().feature_mode);
  InferOptions opt;
  opt.voxel_size = a.voxel;
  opt.tta = a.tta;
  opt.tta_options.n_aug = a.n_aug;
  opt.seed = a.seed;
  const auto pred = infer_scan(ck.model, pc, opt);
  write_label_words(a.out, encode_predictions(pred, map));
  out << "wrote " << pred.size() << " labels to " << a.out << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, split, format = "kitti4", class_map, csv, pred_dir, from_predictions;
  bool tta = false;
  std::size_t n_aug = 10;
  std::uint64_t seed = 0;
  float voxel = 0.1f;
};

inline int run_eval(const EvalArgs& a, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const ClassMap map = resolve_class_map(a.class_map, a.data);
  DirectoryDataset data(a.data, a.split, parse_scan_format(a.format), ck.model.config().feature_mode, map);
  IouResult result;
  if (!a.from_predictions.empty()) {
    result = iou(evaluate_prediction_files(a.from_predictions, data, ck.model.config().num_classes));
  } else {
    InferOptions opt;
    opt.voxel_size = a.voxel;
    opt.tta = a.tta;
    opt.tta_options.n_aug = a.n_aug;
    opt.seed = a.seed;
    std::vector<std::vector<std::int32_t>> preds;
    EvalReport r = evaluate_split(data, ck.model, opt, a.pred_dir.empty() ? nullptr : &preds);
    if (!a.pred_dir.empty()) {
      fs::create_directories(a.pred_dir);
      for (std::size_t i = 0; i < preds.size(); ++i)
        write_label_words(fs::path(a.pred_dir) / (data.name(i) + ".label"), encode_predictions(preds[i], map));
    }
    result = r.result;
  }
  out << iou_table(result) << miou_line(result) << '\n';
  if (!a.csv.empty()) write_file(a.csv, iou_csv(result));
  return 0;
}

struct BenchArgs {
  std::size_t points = 20000, channels = 64, repeats = 5;
  float rho = 0.4f;
  std::uint64_t seed = 0;
};

/// Median wall time in nanoseconds of `fn` over `repeats` runs.
template <typename Fn>
long long median_nanos(std::size_t repeats, Fn&& fn) {
  std::vector<long long> t;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

inline int run_bench(const BenchArgs& a, std::ostream& out) {
  if (a.points == 0 || a.channels == 0 || a.repeats == 0) throw Error("bench: sizes must be positive");
  Rng rng(a.seed);
  const Fov fov = Fov::kitti();
  std::vector<Vec3> pos(a.points);
  for (auto& p : pos)
    for (int d = 0; d < 3; ++d) p[d] = static_cast<float>(rng.uniform(fov.min[d], fov.max[d]));
  const std::vector<std::uint8_t> valid(a.points, 1);
  const ProjectionPair proj = build_projection(pos, valid, make_plane(fov, kPlaneXY, a.rho));
  const auto sparse = SparseProjection<float>::build(proj);
  Tensor<float> x({a.channels, a.points});
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const Tensor<float> grid = proj.flatten(x);
  volatile float sink = 0.0f;
  out << "kernel,op,points,channels,cells,nanos\n";
  auto row = [&](const char* kernel, const char* op, long long ns) {
    out << kernel << ',' << op << ',' << a.points << ',' << a.channels << ',' << proj.cells() << ',' << ns << '\n';
  };
  row("gather_scatter", "flatten", median_nanos(a.repeats, [&] { sink = sink + proj.flatten(x)[0]; }));
  row("gather_scatter", "inflate", median_nanos(a.repeats, [&] { sink = sink + proj.inflate(grid)[0]; }));
  row("sparse_matrix", "flatten", median_nanos(a.repeats, [&] { sink = sink + sparse.flatten(x)[0]; }));
  row("sparse_matrix", "inflate", median_nanos(a.repeats, [&] { sink = sink + sparse.inflate(grid)[0]; }));
  return 0;
}

}  // namespace cli_detail

/// Entry point of the waffle tool. Returns 0 on success, 2 on argument
/// errors (usage is printed) and 1 on runtime errors.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"WaffleIron lidar semantic segmentation", "waffle"};
  app.require_subcommand(1);

  cli_detail::TrainArgs train;
  auto* sc_train = app.add_subcommand("train", "Train a model on <data>/<split>");
  sc_train->add_option("--config", train.config, "Config file")->required();
  sc_train->add_option("--data", train.data, "Dataset root")->required();
  sc_train->add_option("--out", train.out, "Output directory")->required();
  sc_train->add_option("--split", train.split, "Training split")->capture_default_str();
  auto* seed_opt = sc_train->add_option("--seed", train.seed, "Random seed (overrides config)");
  sc_train->add_option("--set", train.sets, "Override a config key (key=value)")->take_all();

  cli_detail::InferArgs infer;
  auto* sc_infer = app.add_subcommand("infer", "Predict labels for one scan");
  sc_infer->add_option("--ckpt", infer.ckpt, "Checkpoint")->required();
  sc_infer->add_option("--scan", infer.scan, "Scan file")->required();
  sc_infer->add_option("--out", infer.out, "Prediction file")->required();
  sc_infer->add_flag("--tta", infer.tta, "Test-time augmentation");
  sc_infer->add_option("--n-aug", infer.n_aug, "TTA variants")->capture_default_str();
  sc_infer->add_option("--format", infer.format, "kitti4 or nuscenes5")->capture_default_str();
  sc_infer->add_option("--class-map", infer.class_map, "Class map for raw ids");
  sc_infer->add_option("--voxel", infer.voxel, "Voxel size, 0 disables")->capture_default_str();
  sc_infer->add_option("--seed", infer.seed, "TTA seed")->capture_default_str();

  cli_detail::EvalArgs eval;
  auto* sc_eval = app.add_subcommand("eval", "Compute per-class IoU and mIoU on a split");
  sc_eval->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  sc_eval->add_option("--data", eval.data, "Dataset root")->required();
  sc_eval->add_option("--split", eval.split, "Split name")->required();
  sc_eval->add_flag("--tta", eval.tta, "Test-time augmentation");
  sc_eval->add_option("--n-aug", eval.n_aug, "TTA variants")->capture_default_str();
  sc_eval->add_option("--format", eval.format, "kitti4 or nuscenes5")->capture_default_str();
  sc_eval->add_option("--class-map", eval.class_map, "Class map (default <data>/class_map.txt)");
  sc_eval->add_option("--csv", eval.csv, "Write class,iou CSV here");
  sc_eval->add_option("--pred-dir", eval.pred_dir, "Also write prediction files here");
  sc_eval->add_option("--from-predictions", eval.from_predictions, "Score stored prediction files instead");
  sc_eval->add_option("--voxel", eval.voxel, "Voxel size, 0 disables")->capture_default_str();
  sc_eval->add_option("--seed", eval.seed, "TTA seed")->capture_default_str();

  cli_detail::BenchArgs bench;
  auto* sc_bench = app.add_subcommand("bench", "Time flatten/inflate kernels (CSV)");
  sc_bench->add_option("--points", bench.points, "Point count")->required();
  sc_bench->add_option("--channels", bench.channels, "Feature channels")->required();
  sc_bench->add_option("--rho", bench.rho, "Grid resolution in meters")->required();
  sc_bench->add_option("--repeats", bench.repeats, "Timed runs per kernel")->capture_default_str();
  sc_bench->add_option("--seed", bench.seed, "Random seed")->capture_default_str();

  std::string pc_config;
  std::vector<std::string> pc_sets;
  auto* sc_count = app.add_subcommand("paramcount", "Print the trainable parameter count");
  sc_count->add_option("--config", pc_config, "Config file")->required();
  sc_count->add_option("--set", pc_sets, "Override a config key (key=value)")->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (e.get_exit_code() != 0) err << app.help();
    return e.get_exit_code() == 0 ? 0 : 2;
  }
  train.seed_given = seed_opt->count() > 0;

  try {
    if (*sc_train) return cli_detail::run_train(train, out);
    if (*sc_infer) return cli_detail::run_infer(infer, out);
    if (*sc_eval) return cli_detail::run_eval(eval, out);
    if (*sc_bench) return cli_detail::run_bench(bench, out);
    if (*sc_count) {
      RunConfig cfg = load_config(pc_config);
      cli_detail::apply_overrides(cfg, pc_sets);
      cfg.model.validate();
      out << param_count(cfg.model) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace waffle
