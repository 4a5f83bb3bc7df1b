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
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "waffle/tensor.hpp"

// Layers with hand-written backward passes. Feature tensors are channel-major
// (channels x points). Backward functions return the input gradient and
// accumulate (+=) parameter gradients into the tensors they are given.

namespace waffle::nn {

// ---------------------------------------------------------------------------
// Pointwise linear layer (1x1 convolution).

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(0) || b.size() != w.dim(0))
    throw Error("shape mismatch in linear: x " + shape_string(x.shape()) + ", w " +
                shape_string(w.shape()) + ", b " + shape_string(b.shape()));
  const std::size_t out_ch = w.dim(0), in_ch = w.dim(1), n = x.dim(1);
  Tensor<T> y({out_ch, n});
  for (std::size_t o = 0; o < out_ch; ++o) {
    T* yr = y.data() + o * n;
    std::fill(yr, yr + n, b[o]);
    for (std::size_t i = 0; i < in_ch; ++i) {
      const T wi = w(o, i);
      const T* xr = x.data() + i * n;
      for (std::size_t p = 0; p < n; ++p) yr[p] += wi * xr[p];
    }
  }
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dw,
                          Tensor<T>* db) {
  const std::size_t out_ch = w.dim(0), in_ch = w.dim(1), n = x.dim(1);
  require_shape(dy, {out_ch, n}, "linear backward");
  Tensor<T> dx({in_ch, n});
  for (std::size_t o = 0; o < out_ch; ++o) {
    const T* dyr = dy.data() + o * n;
    for (std::size_t i = 0; i < in_ch; ++i) {
      const T wi = w(o, i);
      T* dxr = dx.data() + i * n;
      for (std::size_t p = 0; p < n; ++p) dxr[p] += wi * dyr[p];
    }
    if (dw) {
      for (std::size_t i = 0; i < in_ch; ++i) {
        const T* xr = x.data() + i * n;
        double s = 0.0;
        for (std::size_t p = 0; p < n; ++p) s += static_cast<double>(dyr[p]) * xr[p];
        (*dw)(o, i) += static_cast<T>(s);
      }
    }
    if (db) {
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) s += dyr[p];
      (*db)[o] += static_cast<T>(s);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.values()) v = v > T{0} ? v : T{0};
  return y;
}

/// `y` is the forward output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(y[i] > T{0})) dx[i] = T{0};
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalisation over the point axis.

struct BatchNormSettings {
  double eps = 1e-5;
  double momentum = 0.1;
};

template <typename T>
struct BatchNormCache {
  std::vector<double> inv_std;
  Tensor<T> normalized;  // before the affine transform
  bool batch_stats = false;
};

/// Train mode (batch_stats) normalises with the biased mean/variance of the
/// valid columns and optionally folds them into the running statistics.
/// Eval mode uses the running statistics.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var,
                            std::span<const std::uint8_t> valid, bool batch_stats, bool update_running,
                            BatchNormCache<T>* cache, const BatchNormSettings& settings = {}) {
  if (x.rank() != 2 || gamma.size() != x.dim(0) || beta.size() != x.dim(0) ||
      running_mean.size() != x.dim(0) || running_var.size() != x.dim(0))
    throw Error("shape mismatch in batchnorm: x " + shape_string(x.shape()));
  const std::size_t f = x.dim(0), n = x.dim(1);
  if (!valid.empty() && valid.size() != n) throw Error("shape mismatch in batchnorm: valid mask");
  std::size_t count = n;
  if (!valid.empty()) count = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  if (batch_stats && count == 0) throw Error("batchnorm: no valid columns in train mode");

  Tensor<T> y({f, n});
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>({f, n});
  std::vector<double> inv_std(f);
  for (std::size_t c = 0; c < f; ++c) {
    const T* xr = x.data() + c * n;
    double mean, var;
    if (batch_stats) {
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p)
        if (valid.empty() || valid[p]) s += xr[p];
      mean = s / count;
      double ss = 0.0;
      for (std::size_t p = 0; p < n; ++p)
        if (valid.empty() || valid[p]) ss += (xr[p] - mean) * (xr[p] - mean);
      var = ss / count;
      if (update_running) {
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean[c] = static_cast<T>((1.0 - settings.momentum) * running_mean[c] + settings.momentum * mean);
        running_var[c] = static_cast<T>((1.0 - settings.momentum) * running_var[c] + settings.momentum * unbiased);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + settings.eps);
    T* yr = y.data() + c * n;
    for (std::size_t p = 0; p < n; ++p) {
      const double h = (xr[p] - mean) * inv_std[c];
      if (cache) xhat(c, p) = static_cast<T>(h);
      yr[p] = static_cast<T>(h * gamma[c] + beta[c]);
    }
  }
  if (cache) {
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(xhat);
    cache->batch_stats = batch_stats;
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy,
                             std::span<const std::uint8_t> valid, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const Tensor<T>& xhat = cache.normalized;
  require_shape(dy, xhat.shape(), "batchnorm backward");
  const std::size_t f = xhat.dim(0), n = xhat.dim(1);
  std::size_t count = n;
  if (!valid.empty()) count = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  Tensor<T> dx({f, n});
  for (std::size_t c = 0; c < f; ++c) {
    const T* dyr = dy.data() + c * n;
    const T* hr = xhat.data() + c * n;
    double sum_dy = 0.0, sum_dy_h = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      sum_dy += dyr[p];
      sum_dy_h += static_cast<double>(dyr[p]) * hr[p];
    }
    if (dgamma) (*dgamma)[c] += static_cast<T>(sum_dy_h);
    if (dbeta) (*dbeta)[c] += static_cast<T>(sum_dy);
    const double g = gamma[c], s = cache.inv_std[c];
    T* dxr = dx.data() + c * n;
    if (!cache.batch_stats) {
      for (std::size_t p = 0; p < n; ++p) dxr[p] = static_cast<T>(dyr[p] * g * s);
      continue;
    }
    // Statistics depend on valid columns only, but every column's output
    // depends on them.
    const double mean_dxhat = g * sum_dy / count;
    const double mean_dxhat_h = g * sum_dy_h / count;
    for (std::size_t p = 0; p < n; ++p) {
      const double dxhat = dyr[p] * g;
      if (valid.empty() || valid[p]) dxr[p] = static_cast<T>(s * (dxhat - mean_dxhat - hr[p] * mean_dxhat_h));
      else dxr[p] = static_cast<T>(s * dxhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution, zero padding 1, stride 1.

template <typename T>
Tensor<T> depthwise_conv3x3_forward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
  if (x.rank() != 3 || k.rank() != 3 || k.dim(0) != x.dim(0) || k.dim(1) != 3 || k.dim(2) != 3 ||
      b.size() != x.dim(0))
    throw Error("shape mismatch in depthwise_conv3x3: x " + shape_string(x.shape()) + ", k " +
                shape_string(k.shape()));
  const std::size_t f = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < f; ++c) {
    const T* xc = x.data() + c * h * w;
    T* yc = y.data() + c * h * w;
    std::fill(yc, yc + h * w, b[c]);
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const T kv = k(c, dr + 1, dc + 1);
        const std::size_t r0 = dr < 0 ? 1 : 0, r1 = dr > 0 ? h - 1 : h;
        const std::size_t c0 = dc < 0 ? 1 : 0, c1 = dc > 0 ? w - 1 : w;
        for (std::size_t r = r0; r < r1; ++r) {
          T* yrow = yc + r * w;
          const T* xrow = xc + (r + dr) * w + dc;
          for (std::size_t q = c0; q < c1; ++q) yrow[q] += kv * xrow[q];
        }
      }
  }
  return y;
}

template <typename T>
Tensor<T> depthwise_conv3x3_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy,
                                     Tensor<T>* dk, Tensor<T>* db) {
  require_shape(dy, x.shape(), "depthwise_conv3x3 backward");
  const std::size_t f = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> dx(x.shape());
  for (std::size_t c = 0; c < f; ++c) {
    const T* xc = x.data() + c * h * w;
    const T* dyc = dy.data() + c * h * w;
    T* dxc = dx.data() + c * h * w;
    if (db) {
      double s = 0.0;
      for (std::size_t i = 0; i < h * w; ++i) s += dyc[i];
      (*db)[c] += static_cast<T>(s);
    }
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const T kv = k(c, dr + 1, dc + 1);
        const std::size_t r0 = dr < 0 ? 1 : 0, r1 = dr > 0 ? h - 1 : h;
        const std::size_t c0 = dc < 0 ? 1 : 0, c1 = dc > 0 ? w - 1 : w;
        double s = 0.0;
        for (std::size_t r = r0; r < r1; ++r) {
          const T* dyrow = dyc + r * w;
          const T* xrow = xc + (r + dr) * w + dc;
          T* dxrow = dxc + (r + dr) * w + dc;
          for (std::size_t q = c0; q < c1; ++q) {
            dxrow[q] += kv * dyrow[q];
            s += static_cast<double>(dyrow[q]) * xrow[q];
          }
        }
        if (dk) (*dk)(c, dr + 1, dc + 1) += static_cast<T>(s);
      }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layerscale: per-channel diagonal scaling.

template <typename T>
Tensor<T> layerscale_forward(const Tensor<T>& x, const Tensor<T>& d) {
  if (x.rank() != 2 || d.size() != x.dim(0))
    throw Error("shape mismatch in layerscale: x " + shape_string(x.shape()));
  Tensor<T> y = x;
  const std::size_t n = x.dim(1);
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t p = 0; p < n; ++p) y(c, p) *= d[c];
  return y;
}

template <typename T>
Tensor<T> layerscale_backward(const Tensor<T>& x, const Tensor<T>& d, const Tensor<T>& dy, Tensor<T>* dd) {
  require_shape(dy, x.shape(), "layerscale backward");
  Tensor<T> dx = dy;
  const std::size_t n = x.dim(1);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      s += static_cast<double>(dy(c, p)) * x(c, p);
      dx(c, p) *= d[c];
    }
    if (dd) (*dd)[c] += static_cast<T>(s);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Channel-wise max over neighbour columns.

/// y[:, i] = max over m of x[:, neighbors[i * k + m]]. Ties resolve to the
/// smallest source column, which is where the gradient is routed.
template <typename T>
Tensor<T> neighborhood_max_forward(const Tensor<T>& x, std::span<const std::uint32_t> neighbors, std::size_t k,
                                   std::vector<std::uint32_t>* argmax) {
  if (x.rank() != 2) throw Error("shape mismatch in neighborhood_max");
  if (k == 0) throw Error("neighborhood_max: empty neighbour row");
  if (neighbors.size() % k) throw Error("neighborhood_max: neighbour list not a multiple of k");
  const std::size_t f = x.dim(0), src = x.dim(1), rows = neighbors.size() / k;
  for (auto idx : neighbors)
    if (idx >= src) throw Error("neighborhood_max: neighbour index out of range");
  Tensor<T> y({f, rows});
  if (argmax) argmax->assign(f * rows, 0);
  for (std::size_t c = 0; c < f; ++c) {
    const T* xr = x.data() + c * src;
    for (std::size_t i = 0; i < rows; ++i) {
      const std::uint32_t* nb = neighbors.data() + i * k;
      std::uint32_t best = nb[0];
      T bv = xr[best];
      for (std::size_t m = 1; m < k; ++m) {
        const T v = xr[nb[m]];
        if (v > bv || (v == bv && nb[m] < best)) {
          bv = v;
          best = nb[m];
        }
      }
      y(c, i) = bv;
      if (argmax) (*argmax)[c * rows + i] = best;
    }
  }
  return y;
}

template <typename T>
Tensor<T> neighborhood_max_backward(const std::vector<std::uint32_t>& argmax, const Tensor<T>& dy,
                                    std::size_t src_cols) {
  const std::size_t f = dy.dim(0), rows = dy.dim(1);
  if (argmax.size() != f * rows) throw Error("shape mismatch in neighborhood_max backward");
  Tensor<T> dx({f, src_cols});
  for (std::size_t c = 0; c < f; ++c)
    for (std::size_t i = 0; i < rows; ++i) dx(c, argmax[c * rows + i]) += dy(c, i);
  return dx;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradTarget {
  std::string name;
  std::span<double> values;          // perturbed in place, restored afterwards
  std::span<const double> analytic;  // gradient computed by backward
};

/// Largest |analytic - numeric| / max(1, |numeric|) over every scalar of every
/// target, with numeric gradients from central differences of `loss`.
inline double grad_check(const std::function<double()>& loss, std::span<const GradTarget> targets, double eps) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw Error("grad_check: eps must lie in [1e-5, 1e-2]");
  double worst = 0.0;
  for (const auto& t : targets) {
    if (t.values.size() != t.analytic.size()) throw Error("grad_check: gradient size mismatch for " + t.name);
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double orig = t.values[i];
      t.values[i] = orig + eps;
      const double up = loss();
      t.values[i] = orig - eps;
      const double down = loss();
      t.values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(t.analytic[i]))
        throw Error("grad_check: non-finite value in " + t.name + "[" + std::to_string(i) + "]");
      worst = std::max(worst, std::abs(t.analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace waffle::nn
