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

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "waffle/geometry.hpp"
#include "waffle/nn.hpp"
#include "waffle/projection.hpp"
#include "waffle/tensor.hpp"

namespace waffle {

/// Architecture hyperparameters. WaffleIron-L-F denotes depth L, width F.
struct WaffleIronConfig {
  std::size_t depth = 48;
  std::size_t width = 256;
  float rho = 0.4f;
  Fov fov = Fov::kitti();
  std::size_t k_neighbors = 16;
  std::size_t num_classes = 19;
  double drop_prob = 0.2;
  Strategy strategy = Strategy::baseline;
  FeatureMode feature_mode = FeatureMode::k5;

  std::size_t input_channels() const { return feature_channels(feature_mode); }
  std::size_t branches() const { return strategy == Strategy::parallel ? 3 : 1; }

  void validate() const {
    if ((strategy == Strategy::baseline || strategy == Strategy::reverse) && depth % 3 != 0)
      throw Error("config: depth must be a multiple of 3 for the baseline and reverse strategies");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw Error("config: drop_prob must lie in [0, 1)");
    if (width < 2 || width % 2 != 0) throw Error("config: width must be a positive even number");
    if (num_classes < 1) throw Error("config: classes must be at least 1");
    if (k_neighbors < 1) throw Error("config: k must be at least 1");
    if (!(rho > 0.0f)) throw Error("config: rho must be positive");
    fov.validate();
  }
};

/// Exact trainable-parameter count, computed in closed form.
inline std::size_t param_count(const WaffleIronConfig& cfg) {
  const std::size_t c = cfg.input_channels(), f = cfg.width, half = f / 2, k = cfg.num_classes;
  const std::size_t embed = 2 * c                // input batch norm
                            + c * half + half     // global branch
                            + c * half + half     // local MLP, first layer
                            + half * half + half  // local MLP, second layer
                            + f * f + f;          // merge layer
  const std::size_t token_branch = 2 * f + 2 * (9 * f + f) + f;
  const std::size_t channel = 2 * f + 2 * (f * f + f) + f;
  const std::size_t layer = cfg.branches() * token_branch + channel;
  return embed + cfg.depth * layer + k * f + k;
}

/// Network inputs derived from one point cloud: transposed features, the
/// embedding neighbourhoods and one projection per plane in use.
template <typename T>
struct SceneInputs {
  Tensor<T> features;  // C x N
  std::vector<std::uint8_t> valid;
  NeighborList neighbors;
  std::array<std::optional<ProjectionPair>, 3> projections;

  std::size_t points() const { return valid.size(); }

  const ProjectionPair& projection(PlaneAxes axes) const {
    const auto& p = projections[axes.slot()];
    if (!p) throw Error("no projection prepared for plane " + axes.name());
    return *p;
  }
};

template <typename T>
SceneInputs<T> prepare_inputs(const PointCloud& pc, const WaffleIronConfig& cfg) {
  if (pc.channels != cfg.input_channels())
    throw Error("config/param mismatch: cloud has " + std::to_string(pc.channels) + " feature channels, model expects " +
                std::to_string(cfg.input_channels()));
  SceneInputs<T> in;
  const std::size_t n = pc.size(), c = pc.channels;
  in.features = Tensor<T>({c, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) in.features(ch, i) = static_cast<T>(pc.feature(i, ch));
  in.valid = pc.valid;
  in.neighbors = knn(pc, cfg.k_neighbors);
  std::array<bool, 3> used{};
  for (std::size_t l = 0; l < std::max<std::size_t>(cfg.depth, 1); ++l)
    for (auto axes : plane_schedule(l, cfg.strategy)) used[axes.slot()] = true;
  for (std::size_t s = 0; s < 3; ++s)
    if (used[s]) in.projections[s] = build_projection(pc.positions, pc.valid, make_plane(cfg.fov, kAllPlanes[s], cfg.rho));
  return in;
}

struct ForwardOptions {
  bool batch_stats = false;           // batch norm uses batch statistics
  bool stochastic_depth = false;      // residual branches dropped at config.drop_prob
  bool update_running_stats = false;  // fold batch statistics into running stats

  static ForwardOptions train() { return {true, true, true}; }
  static ForwardOptions eval() { return {}; }
};

/// Intermediate values kept for the backward pass.
template <typename T>
struct ForwardTape {
  struct Embed {
    nn::BatchNormCache<T> bn;
    Tensor<T> normalized;  // BN(h), C x N
    Tensor<T> pairs;       // h_j - h_i, C x (N k)
    Tensor<T> act;         // ReLU output of the local MLP, F/2 x (N k)
    std::vector<std::uint32_t> argmax;
    Tensor<T> concat;      // F x N
  };
  struct Branch {
    PlaneAxes plane;
    nn::BatchNormCache<T> bn;
    Tensor<T> grid;  // flattened, F x H x W
    Tensor<T> act;   // after first conv + ReLU
    Tensor<T> inflated;
  };
  struct Layer {
    bool token_kept = true;
    bool channel_kept = true;
    std::vector<Branch> branches;
    nn::BatchNormCache<T> bn;
    Tensor<T> normed;
    Tensor<T> act;
    Tensor<T> mlp;
  };

  Embed embed;
  std::vector<Layer> layers;
  Tensor<T> tokens;  // classifier input
  T keep_scale = T{1};
  bool batch_stats = false;
};

namespace detail {

template <typename T>
void add_scaled(Tensor<T>& dst, const Tensor<T>& src, T alpha) {
  require_shape(src, dst.shape(), "residual add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace detail

/// The segmentation network: embedding, depth x (token mixing, channel
/// mixing) residual layers, and a linear classifier.
template <typename T>
class WaffleIron {
 public:
  explicit WaffleIron(WaffleIronConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t c = config_.input_channels(), f = config_.width, half = f / 2;
    add_bn("embed.bn", c);
    add_linear(rng, "embed.global", half, c);
    add_linear(rng, "embed.local1", half, c);
    add_linear(rng, "embed.local2", half, half);
    add_linear(rng, "embed.merge", f, f);
    for (std::size_t l = 0; l < config_.depth; ++l) {
      for (std::size_t b = 0; b < config_.branches(); ++b) {
        const std::string p = token_prefix(l, b);
        add_bn(p + ".bn", f);
        add_dwconv(rng, p + ".conv1", f);
        add_dwconv(rng, p + ".conv2", f);
        add_scale(p + ".scale", f);
      }
      const std::string p = "layers." + std::to_string(l) + ".channel";
      add_bn(p + ".bn", f);
      add_linear(rng, p + ".fc1", f, f);
      add_linear(rng, p + ".fc2", f, f);
      add_scale(p + ".scale", f);
    }
    add_linear(rng, "classifier", config_.num_classes, f);
    bind();
  }

  WaffleIron(const WaffleIron& other) : config_(other.config_), params_(other.params_) { bind(); }
  WaffleIron(WaffleIron&& other) noexcept : config_(std::move(other.config_)), params_(std::move(other.params_)) {
    bind();
  }
  WaffleIron& operator=(const WaffleIron& other) {
    config_ = other.config_;
    params_ = other.params_;
    bind();
    return *this;
  }
  WaffleIron& operator=(WaffleIron&& other) noexcept {
    config_ = std::move(other.config_);
    params_ = std::move(other.params_);
    bind();
    return *this;
  }

  const WaffleIronConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  template <typename U>
  WaffleIron<U> cast() const {
    WaffleIron<U> out(config_);
    for (const auto& [name, p] : params_) out.params().at(name).value = p.value.template cast<U>();
    return out;
  }

  static std::string token_prefix(std::size_t layer, std::size_t branch_count_index, Strategy strategy) {
    const std::string base = "layers." + std::to_string(layer) + ".token";
    if (strategy != Strategy::parallel) return base;
    return base + "_" + kAllPlanes[branch_count_index].name();
  }

  // -------------------------------------------------------------------------
  // Forward pieces.

  /// Initial tokens, F x N.
  Tensor<T> embed(const SceneInputs<T>& in, const ForwardOptions& opt, typename ForwardTape<T>::Embed* tape = nullptr) {
    const std::size_t n = in.points(), k = in.neighbors.k, c = config_.input_channels();
    require_shape(in.features, {c, n}, "embedding input");
    if (in.neighbors.rows() != n) throw Error("embedding: neighbour list has " + std::to_string(in.neighbors.rows()) +
                                              " rows for " + std::to_string(n) + " points");
    for (auto idx : in.neighbors.indices)
      if (idx >= n) throw Error("embedding: neighbour index out of range");

    nn::BatchNormCache<T> bn_cache;
    Tensor<T> hn = nn::batchnorm_forward(in.features, embed_.bn.gamma->value, embed_.bn.beta->value,
                                         embed_.bn.mean->value, embed_.bn.var->value, in.valid, opt.batch_stats,
                                         opt.update_running_stats, tape ? &bn_cache : nullptr);
    Tensor<T> global = nn::linear_forward(hn, embed_.global.w->value, embed_.global.b->value);

    Tensor<T> pairs({c, n * k});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < k; ++m) pairs(ch, i * k + m) = hn(ch, in.neighbors.indices[i * k + m]) - hn(ch, i);
    Tensor<T> act = nn::relu_forward(nn::linear_forward(pairs, embed_.local1.w->value, embed_.local1.b->value));
    Tensor<T> pair_out = nn::linear_forward(act, embed_.local2.w->value, embed_.local2.b->value);
    std::vector<std::uint32_t> groups(n * k);
    std::iota(groups.begin(), groups.end(), 0u);
    std::vector<std::uint32_t> argmax;
    Tensor<T> local = nn::neighborhood_max_forward(pair_out, groups, k, tape ? &argmax : nullptr);

    const std::size_t half = config_.width / 2;
    Tensor<T> concat({config_.width, n});
    std::copy(global.data(), global.data() + half * n, concat.data());
    std::copy(local.data(), local.data() + half * n, concat.data() + half * n);
    Tensor<T> tokens = nn::linear_forward(concat, embed_.merge.w->value, embed_.merge.b->value);
    if (tape) {
      tape->bn = std::move(bn_cache);
      tape->normalized = std::move(hn);
      tape->pairs = std::move(pairs);
      tape->act = std::move(act);
      tape->argmax = std::move(argmax);
      tape->concat = std::move(concat);
    }
    return tokens;
  }

  /// tokens + scale * sum over branches of layerscale(inflate(FFN(flatten(BN(tokens))))).
  Tensor<T> token_mix(const Tensor<T>& tokens, std::size_t layer, const SceneInputs<T>& in, const ForwardOptions& opt,
                      T residual_scale = T{1}, typename ForwardTape<T>::Layer* tape = nullptr) {
    const auto planes = plane_schedule(layer, config_.strategy);
    Tensor<T> out = tokens;
    if (tape) {
      tape->branches.resize(planes.size());
      for (std::size_t b = 0; b < planes.size(); ++b) tape->branches[b].plane = planes[b];
    }
    for (std::size_t b = 0; b < planes.size(); ++b) {
      const auto& refs = layers_.at(layer).token[b];
      const ProjectionPair& proj = in.projection(planes[b]);
      const auto& plane = proj.plane();
      nn::BatchNormCache<T> bn_cache;
      Tensor<T> normed = nn::batchnorm_forward(tokens, refs.bn.gamma->value, refs.bn.beta->value, refs.bn.mean->value,
                                               refs.bn.var->value, in.valid, opt.batch_stats, opt.update_running_stats,
                                               tape ? &bn_cache : nullptr);
      Tensor<T> grid = proj.flatten(normed);
      grid.reshape({config_.width, plane.height, plane.width});
      Tensor<T> act = nn::relu_forward(nn::depthwise_conv3x3_forward(grid, refs.conv1.k->value, refs.conv1.b->value));
      Tensor<T> conv = nn::depthwise_conv3x3_forward(act, refs.conv2.k->value, refs.conv2.b->value);
      conv.reshape({config_.width, plane.cells()});
      Tensor<T> inflated = proj.inflate(conv);
      detail::add_scaled(out, nn::layerscale_forward(inflated, refs.scale->value), residual_scale);
      if (tape) {
        auto& bt = tape->branches[b];
        bt.bn = std::move(bn_cache);
        bt.grid = std::move(grid);
        bt.act = std::move(act);
        bt.inflated = std::move(inflated);
      }
    }
    return out;
  }

  /// tokens + scale * layerscale(MLP(BN(tokens))), applied per point.
  Tensor<T> channel_mix(const Tensor<T>& tokens, std::size_t layer, std::span<const std::uint8_t> valid,
                        const ForwardOptions& opt, T residual_scale = T{1},
                        typename ForwardTape<T>::Layer* tape = nullptr) {
    const auto& refs = layers_.at(layer);
    nn::BatchNormCache<T> bn_cache;
    Tensor<T> normed = nn::batchnorm_forward(tokens, refs.bn.gamma->value, refs.bn.beta->value, refs.bn.mean->value,
                                             refs.bn.var->value, valid, opt.batch_stats, opt.update_running_stats,
                                             tape ? &bn_cache : nullptr);
    Tensor<T> act = nn::relu_forward(nn::linear_forward(normed, refs.fc1.w->value, refs.fc1.b->value));
    Tensor<T> mlp = nn::linear_forward(act, refs.fc2.w->value, refs.fc2.b->value);
    Tensor<T> out = tokens;
    detail::add_scaled(out, nn::layerscale_forward(mlp, refs.scale->value), residual_scale);
    if (tape) {
      tape->bn = std::move(bn_cache);
      tape->normed = std::move(normed);
      tape->act = std::move(act);
      tape->mlp = std::move(mlp);
    }
    return out;
  }

  /// Logits, K x N. Stochastic depth draws two uniforms per layer from rng.
  Tensor<T> forward(const SceneInputs<T>& in, const ForwardOptions& opt, Rng* rng = nullptr,
                    ForwardTape<T>* tape = nullptr) {
    const bool drop = opt.stochastic_depth && config_.drop_prob > 0.0;
    if (drop && !rng) throw Error("forward: stochastic depth requires a random stream");
    Rng* const draw = drop ? rng : nullptr;
    const T keep_scale = opt.stochastic_depth ? static_cast<T>(1.0 / (1.0 - config_.drop_prob)) : T{1};
    if (tape) {
      tape->layers.assign(config_.depth, {});
      tape->keep_scale = keep_scale;
      tape->batch_stats = opt.batch_stats;
    }
    Tensor<T> tokens = embed(in, opt, tape ? &tape->embed : nullptr);
    for (std::size_t l = 0; l < config_.depth; ++l) {
      bool token_kept = true, channel_kept = true;
      if (draw) {
        token_kept = draw->uniform() >= config_.drop_prob;
        channel_kept = draw->uniform() >= config_.drop_prob;
      }
      auto* lt = tape ? &tape->layers[l] : nullptr;
      if (lt) {
        lt->token_kept = token_kept;
        lt->channel_kept = channel_kept;
      }
      if (token_kept) tokens = token_mix(tokens, l, in, opt, keep_scale, lt);
      if (channel_kept) tokens = channel_mix(tokens, l, in.valid, opt, keep_scale, lt);
    }
    Tensor<T> logits = nn::linear_forward(tokens, classifier_.w->value, classifier_.b->value);
    if (tape) tape->tokens = std::move(tokens);
    return logits;
  }

  /// Accumulates parameter gradients for dL/dlogits.
  void backward(const SceneInputs<T>& in, const ForwardTape<T>& tape, const Tensor<T>& dlogits) {
    Tensor<T> dtok = nn::linear_backward(tape.tokens, classifier_.w->value, dlogits, &classifier_.w->grad,
                                         &classifier_.b->grad);
    const auto& valid = in.valid;
    for (std::size_t l = config_.depth; l-- > 0;) {
      const auto& lt = tape.layers[l];
      auto& refs = layers_[l];
      if (lt.channel_kept) {
        Tensor<T> dr = dtok;
        for (auto& v : dr.values()) v *= tape.keep_scale;
        Tensor<T> dmlp = nn::layerscale_backward(lt.mlp, refs.scale->value, dr, &refs.scale->grad);
        Tensor<T> dact = nn::linear_backward(lt.act, refs.fc2.w->value, dmlp, &refs.fc2.w->grad, &refs.fc2.b->grad);
        Tensor<T> dhid = nn::relu_backward(lt.act, dact);
        Tensor<T> dnormed =
            nn::linear_backward(lt.normed, refs.fc1.w->value, dhid, &refs.fc1.w->grad, &refs.fc1.b->grad);
        detail::add_scaled(dtok,
                           nn::batchnorm_backward(lt.bn, refs.bn.gamma->value, dnormed, valid, &refs.bn.gamma->grad,
                                                  &refs.bn.beta->grad),
                           T{1});
      }
      if (lt.token_kept) {
        Tensor<T> dr = dtok;
        for (auto& v : dr.values()) v *= tape.keep_scale;
        const auto planes = plane_schedule(l, config_.strategy);
        for (std::size_t b = 0; b < planes.size(); ++b) {
          const auto& bt = lt.branches[b];
          auto& br = refs.token[b];
          const ProjectionPair& proj = in.projection(planes[b]);
          const auto& plane = proj.plane();
          Tensor<T> dinfl = nn::layerscale_backward(bt.inflated, br.scale->value, dr, &br.scale->grad);
          Tensor<T> dconv = proj.flatten_sum(dinfl);
          dconv.reshape({config_.width, plane.height, plane.width});
          Tensor<T> dact = nn::depthwise_conv3x3_backward(bt.act, br.conv2.k->value, dconv, &br.conv2.k->grad,
                                                          &br.conv2.b->grad);
          Tensor<T> dhid = nn::relu_backward(bt.act, dact);
          Tensor<T> dgrid = nn::depthwise_conv3x3_backward(bt.grid, br.conv1.k->value, dhid, &br.conv1.k->grad,
                                                           &br.conv1.b->grad);
          dgrid.reshape({config_.width, plane.cells()});
          Tensor<T> dnormed = proj.flatten_backward(dgrid);
          detail::add_scaled(dtok,
                             nn::batchnorm_backward(bt.bn, br.bn.gamma->value, dnormed, valid, &br.bn.gamma->grad,
                                                    &br.bn.beta->grad),
                             T{1});
        }
      }
    }
    embed_backward(in, tape.embed, dtok);
  }

 private:
  struct LinearRef {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
  };
  struct ConvRef {
    Parameter<T>* k = nullptr;
    Parameter<T>* b = nullptr;
  };
  struct BnRef {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* mean = nullptr;
    Parameter<T>* var = nullptr;
  };
  struct BranchRef {
    BnRef bn;
    ConvRef conv1, conv2;
    Parameter<T>* scale = nullptr;
  };
  struct LayerRef {
    std::vector<BranchRef> token;
    BnRef bn;
    LinearRef fc1, fc2;
    Parameter<T>* scale = nullptr;
  };
  struct EmbedRef {
    BnRef bn;
    LinearRef global, local1, local2, merge;
  };

  std::string token_prefix(std::size_t layer, std::size_t branch) const {
    return token_prefix(layer, branch, config_.strategy);
  }

  void add_linear(Rng& rng, const std::string& prefix, std::size_t out, std::size_t in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    Tensor<T> w({out, in});
    for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    params_.add(prefix + ".weight", std::move(w));
    params_.add(prefix + ".bias", Tensor<T>({out}));
  }

  void add_dwconv(Rng& rng, const std::string& prefix, std::size_t ch) {
    const double bound = std::sqrt(1.0 / 9.0);
    Tensor<T> k({ch, 3, 3});
    for (auto& v : k.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    params_.add(prefix + ".weight", std::move(k));
    params_.add(prefix + ".bias", Tensor<T>({ch}));
  }

  void add_bn(const std::string& prefix, std::size_t ch) {
    params_.add(prefix + ".weight", Tensor<T>({ch}, T{1}));
    params_.add(prefix + ".bias", Tensor<T>({ch}));
    params_.add(prefix + ".running_mean", Tensor<T>({ch}), false);
    params_.add(prefix + ".running_var", Tensor<T>({ch}, T{1}), false);
  }

  void add_scale(const std::string& name, std::size_t ch) {
    params_.add(name, Tensor<T>({ch}, static_cast<T>(1e-2)));
  }

  LinearRef linear_ref(const std::string& p) { return {&params_.at(p + ".weight"), &params_.at(p + ".bias")}; }
  ConvRef conv_ref(const std::string& p) { return {&params_.at(p + ".weight"), &params_.at(p + ".bias")}; }
  BnRef bn_ref(const std::string& p) {
    return {&params_.at(p + ".weight"), &params_.at(p + ".bias"), &params_.at(p + ".running_mean"),
            &params_.at(p + ".running_var")};
  }

  void bind() {
    embed_ = {bn_ref("embed.bn"), linear_ref("embed.global"), linear_ref("embed.local1"), linear_ref("embed.local2"),
              linear_ref("embed.merge")};
    layers_.assign(config_.depth, {});
    for (std::size_t l = 0; l < config_.depth; ++l) {
      auto& lr = layers_[l];
      for (std::size_t b = 0; b < config_.branches(); ++b) {
        const std::string p = token_prefix(l, b);
        lr.token.push_back({bn_ref(p + ".bn"), conv_ref(p + ".conv1"), conv_ref(p + ".conv2"), &params_.at(p + ".scale")});
      }
      const std::string p = "layers." + std::to_string(l) + ".channel";
      lr.bn = bn_ref(p + ".bn");
      lr.fc1 = linear_ref(p + ".fc1");
      lr.fc2 = linear_ref(p + ".fc2");
      lr.scale = &params_.at(p + ".scale");
    }
    classifier_ = linear_ref("classifier");
  }

  void embed_backward(const SceneInputs<T>& in, const typename ForwardTape<T>::Embed& et, const Tensor<T>& dtokens) {
    const std::size_t n = in.points(), k = in.neighbors.k, c = config_.input_channels(), half = config_.width / 2;
    Tensor<T> dconcat =
        nn::linear_backward(et.concat, embed_.merge.w->value, dtokens, &embed_.merge.w->grad, &embed_.merge.b->grad);
    Tensor<T> dglobal({half, n}, std::vector<T>(dconcat.data(), dconcat.data() + half * n));
    Tensor<T> dlocal({half, n}, std::vector<T>(dconcat.data() + half * n, dconcat.data() + 2 * half * n));
    Tensor<T> dh = nn::linear_backward(et.normalized, embed_.global.w->value, dglobal, &embed_.global.w->grad,
                                       &embed_.global.b->grad);
    Tensor<T> dpair_out = nn::neighborhood_max_backward(et.argmax, dlocal, n * k);
    Tensor<T> dact = nn::linear_backward(et.act, embed_.local2.w->value, dpair_out, &embed_.local2.w->grad,
                                         &embed_.local2.b->grad);
    Tensor<T> dhid = nn::relu_backward(et.act, dact);
    Tensor<T> dpairs =
        nn::linear_backward(et.pairs, embed_.local1.w->value, dhid, &embed_.local1.w->grad, &embed_.local1.b->grad);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < k; ++m) {
          const T g = dpairs(ch, i * k + m);
          dh(ch, in.neighbors.indices[i * k + m]) += g;
          dh(ch, i) -= g;
        }
    nn::batchnorm_backward(et.bn, embed_.bn.gamma->value, dh, in.valid, &embed_.bn.gamma->grad, &embed_.bn.beta->grad);
  }

  WaffleIronConfig config_;
  ParamStore<T> params_;
  EmbedRef embed_;
  std::vector<LayerRef> layers_;
  LinearRef classifier_;
};

}  // namespace waffle
