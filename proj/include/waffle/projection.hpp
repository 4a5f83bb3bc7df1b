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
#include <span>
#include <string>
#include <vector>

#include "waffle/common.hpp"
#include "waffle/geometry.hpp"
#include "waffle/tensor.hpp"

namespace waffle {

/// Ordered pair of coordinate axes spanning a projection plane.
struct PlaneAxes {
  int first = 0;
  int second = 1;

  friend bool operator==(const PlaneAxes&, const PlaneAxes&) = default;

  std::string name() const {
    static constexpr char kAxis[] = {'x', 'y', 'z'};
    return std::string{kAxis[first], kAxis[second]};
  }

  /// Slot 0/1/2 for xy/xz/yz.
  std::size_t slot() const { return first == 0 ? (second == 1 ? 0 : 1) : 2; }
};

inline constexpr PlaneAxes kPlaneXY{0, 1};
inline constexpr PlaneAxes kPlaneXZ{0, 2};
inline constexpr PlaneAxes kPlaneYZ{1, 2};
inline constexpr std::array<PlaneAxes, 3> kAllPlanes{kPlaneXY, kPlaneXZ, kPlaneYZ};

struct PlaneSpec {
  PlaneAxes axes;
  std::size_t height = 0;  // cells along axes.first
  std::size_t width = 0;   // cells along axes.second
  float resolution = 0.4f;
  std::array<float, 2> origin{};

  std::size_t cells() const { return height * width; }
};

/// Grid covering the FOV on the given plane; the last row/column may extend
/// past the FOV maximum.
inline PlaneSpec make_plane(const Fov& fov, PlaneAxes axes, float resolution) {
  if (!(resolution > 0.0f)) throw Error("grid resolution must be positive");
  fov.validate();
  auto cells_along = [&](int a) {
    const double span = static_cast<double>(fov.max[a]) - fov.min[a];
    return static_cast<std::size_t>(std::ceil(span / resolution - 1e-6));
  };
  PlaneSpec p;
  p.axes = axes;
  p.height = std::max<std::size_t>(cells_along(axes.first), 1);
  p.width = std::max<std::size_t>(cells_along(axes.second), 1);
  p.resolution = resolution;
  p.origin = {fov.min[axes.first], fov.min[axes.second]};
  return p;
}

/// Per-point flattened cell index on one plane.
struct CellMap {
  std::vector<std::uint32_t> cell_index;
  std::vector<std::uint8_t> valid;
  PlaneSpec plane;
};

namespace detail {

// Quantisation treats positions within 1e-5 of a cell of the upper boundary
// as lying on it, absorbing float32 rounding of coordinates like -50 + 0.8.
inline constexpr double kCellSnap = 1e-5;

/// Cell coordinate along one axis, or -1 when the coordinate lies off the grid.
inline std::int64_t quantize(float coord, float origin, float resolution, std::int64_t cells) {
  const double t = (static_cast<double>(coord) - origin) / resolution;
  if (!(t >= 0.0) || t >= static_cast<double>(cells)) return -1;
  return std::min(static_cast<std::int64_t>(std::floor(t + kCellSnap)), cells - 1);
}

}  // namespace detail

inline CellMap cell_indices(std::span<const Vec3> points, std::span<const std::uint8_t> valid,
                            const PlaneSpec& plane) {
  CellMap map;
  map.plane = plane;
  map.cell_index.assign(points.size(), 0);
  map.valid.assign(points.size(), 1);
  if (!valid.empty()) std::copy(valid.begin(), valid.end(), map.valid.begin());
  const auto h = static_cast<std::int64_t>(plane.height);
  const auto w = static_cast<std::int64_t>(plane.width);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!map.valid[i]) continue;
    const auto q0 = detail::quantize(points[i][plane.axes.first], plane.origin[0], plane.resolution, h);
    const auto q1 = detail::quantize(points[i][plane.axes.second], plane.origin[1], plane.resolution, w);
    if (q0 < 0 || q1 < 0)
      throw Error("point outside grid (point " + std::to_string(i) + ", plane " + plane.axes.name() + ")");
    map.cell_index[i] = static_cast<std::uint32_t>(q0 * w + q1);
  }
  return map;
}

/// Flatten/Inflate operators for one plane, realised as scatter/gather over
/// the cell map. Flatten averages the valid points of each cell; Inflate
/// copies each cell back to its points.
class ProjectionPair {
 public:
  ProjectionPair() = default;
  explicit ProjectionPair(CellMap map) : map_(std::move(map)), counts_(map_.plane.cells(), 0) {
    for (std::size_t i = 0; i < map_.cell_index.size(); ++i)
      if (map_.valid[i]) {
        ++counts_[map_.cell_index[i]];
        ++valid_count_;
      }
  }

  const PlaneSpec& plane() const { return map_.plane; }
  std::size_t points() const { return map_.cell_index.size(); }
  std::size_t cells() const { return counts_.size(); }
  std::size_t valid_count() const { return valid_count_; }
  std::span<const std::uint32_t> cell_index() const { return map_.cell_index; }
  std::span<const std::uint32_t> counts() const { return counts_; }
  std::span<const std::uint8_t> valid() const { return map_.valid; }

  /// Per-cell mean of valid point columns; empty cells are zero. Sums are
  /// accumulated in ascending point order in double precision.
  template <typename T>
  Tensor<T> flatten(const Tensor<T>& x) const {
    return accumulate(x, true);
  }

  /// Per-cell sum (unnormalised flatten); the adjoint of inflate.
  template <typename T>
  Tensor<T> flatten_sum(const Tensor<T>& x) const {
    return accumulate(x, false);
  }

  template <typename T>
  Tensor<T> inflate(const Tensor<T>& grid) const {
    if (grid.rank() != 2 || grid.dim(1) != cells())
      throw Error("shape mismatch in inflate: grid " + shape_string(grid.shape()) + " vs " +
                  std::to_string(cells()) + " cells");
    const std::size_t f = grid.dim(0), n = points();
    Tensor<T> out({f, n});
    for (std::size_t c = 0; c < f; ++c) {
      const T* g = grid.data() + c * cells();
      T* o = out.data() + c * n;
      for (std::size_t i = 0; i < n; ++i) o[i] = map_.valid[i] ? g[map_.cell_index[i]] : T{0};
    }
    return out;
  }

  /// Gradient of flatten: each valid point receives its cell's gradient / count.
  template <typename T>
  Tensor<T> flatten_backward(const Tensor<T>& dgrid) const {
    Tensor<T> scaled = dgrid;
    const std::size_t f = dgrid.dim(0), m = cells();
    for (std::size_t c = 0; c < f; ++c)
      for (std::size_t j = 0; j < m; ++j)
        if (counts_[j]) scaled[c * m + j] = static_cast<T>(scaled[c * m + j] / static_cast<T>(counts_[j]));
    return inflate(scaled);
  }

 private:
  template <typename T>
  Tensor<T> accumulate(const Tensor<T>& x, bool mean) const {
    if (x.rank() != 2 || x.dim(1) != points())
      throw Error("shape mismatch in flatten: features " + shape_string(x.shape()) + " vs " +
                  std::to_string(points()) + " points");
    const std::size_t f = x.dim(0), n = points(), m = cells();
    Tensor<T> out({f, m});
    std::vector<double> acc(m);
    for (std::size_t c = 0; c < f; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* xr = x.data() + c * n;
      for (std::size_t i = 0; i < n; ++i)
        if (map_.valid[i]) acc[map_.cell_index[i]] += static_cast<double>(xr[i]);
      T* o = out.data() + c * m;
      for (std::size_t j = 0; j < m; ++j) {
        if (!counts_[j]) continue;
        o[j] = static_cast<T>(mean ? acc[j] / counts_[j] : acc[j]);
      }
    }
    return out;
  }

  CellMap map_;
  std::vector<std::uint32_t> counts_;
  std::size_t valid_count_ = 0;
};

inline ProjectionPair build_projection(std::span<const Vec3> points, std::span<const std::uint8_t> valid,
                                       const PlaneSpec& plane) {
  return ProjectionPair(cell_indices(points, valid, plane));
}

/// Compressed sparse row matrix.
template <typename T>
struct CsrMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::uint32_t> col;
  std::vector<T> val;
};

/// out(F x rows) = x(F x cols) * A^T, i.e. out[:, r] = sum_c A[r, c] x[:, c].
template <typename T>
Tensor<T> spmm(const CsrMatrix<T>& a, const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != a.cols)
    throw Error("shape mismatch in spmm: dense " + shape_string(x.shape()) + " vs sparse " +
                std::to_string(a.rows) + "x" + std::to_string(a.cols));
  const std::size_t f = x.dim(0);
  Tensor<T> out({f, a.rows});
  for (std::size_t c = 0; c < f; ++c) {
    const T* xr = x.data() + c * a.cols;
    T* o = out.data() + c * a.rows;
    for (std::size_t r = 0; r < a.rows; ++r) {
      double s = 0.0;
      for (std::size_t e = a.row_ptr[r]; e < a.row_ptr[r + 1]; ++e)
        s += static_cast<double>(a.val[e]) * static_cast<double>(xr[a.col[e]]);
      o[r] = static_cast<T>(s);
    }
  }
  return out;
}

/// The same projection as explicit sparse matrices: `flatten` is M x N with
/// weight 1/count per valid point, `inflate` is N x M with a single 1 per
/// valid point row.
template <typename T>
struct SparseProjection {
  CsrMatrix<T> flatten_matrix;
  CsrMatrix<T> inflate_matrix;

  static SparseProjection build(const ProjectionPair& proj) {
    SparseProjection sp;
    const std::size_t n = proj.points(), m = proj.cells();
    auto cells = proj.cell_index();
    auto valid = proj.valid();
    auto counts = proj.counts();

    auto& fl = sp.flatten_matrix;
    fl.rows = m;
    fl.cols = n;
    fl.row_ptr.assign(m + 1, 0);
    for (std::size_t i = 0; i < n; ++i)
      if (valid[i]) ++fl.row_ptr[cells[i] + 1];
    for (std::size_t j = 0; j < m; ++j) fl.row_ptr[j + 1] += fl.row_ptr[j];
    fl.col.resize(fl.row_ptr[m]);
    fl.val.resize(fl.row_ptr[m]);
    std::vector<std::size_t> cursor(fl.row_ptr.begin(), fl.row_ptr.end() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid[i]) continue;
      const std::size_t e = cursor[cells[i]]++;
      fl.col[e] = static_cast<std::uint32_t>(i);
      fl.val[e] = static_cast<T>(1.0 / counts[cells[i]]);
    }

    auto& in = sp.inflate_matrix;
    in.rows = n;
    in.cols = m;
    in.row_ptr.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
      in.row_ptr[i + 1] = in.row_ptr[i];
      if (!valid[i]) continue;
      in.col.push_back(cells[i]);
      in.val.push_back(T{1});
      ++in.row_ptr[i + 1];
    }
    return sp;
  }

  Tensor<T> flatten(const Tensor<T>& x) const { return spmm(flatten_matrix, x); }
  Tensor<T> inflate(const Tensor<T>& grid) const { return spmm(inflate_matrix, grid); }
};

enum class Kernel { sparse_matrix, gather_scatter };

/// Largest absolute difference between the two kernel implementations over
/// flatten(x) and inflate(flatten(x)).
template <typename T>
double kernel_equivalence(const Tensor<T>& x, const ProjectionPair& proj) {
  const auto sparse = SparseProjection<T>::build(proj);
  const Tensor<T> flat_g = proj.flatten(x);
  const Tensor<T> flat_s = sparse.flatten(x);
  const Tensor<T> inf_g = proj.inflate(flat_g);
  const Tensor<T> inf_s = sparse.inflate(flat_g);
  double dev = 0.0;
  for (std::size_t i = 0; i < flat_g.size(); ++i)
    dev = std::max(dev, std::abs(static_cast<double>(flat_g[i]) - flat_s[i]));
  for (std::size_t i = 0; i < inf_g.size(); ++i)
    dev = std::max(dev, std::abs(static_cast<double>(inf_g[i]) - inf_s[i]));
  return dev;
}

enum class Strategy { baseline, reverse, parallel, bev };

inline Strategy parse_strategy(const std::string& s) {
  if (s == "baseline") return Strategy::baseline;
  if (s == "reverse") return Strategy::reverse;
  if (s == "parallel") return Strategy::parallel;
  if (s == "bev") return Strategy::bev;
  throw Error("unknown strategy: " + s);
}

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::baseline: return "baseline";
    case Strategy::reverse: return "reverse";
    case Strategy::parallel: return "parallel";
    case Strategy::bev: return "bev";
  }
  return "baseline";
}

/// Planes used by layer `layer` (0-based). Parallel returns all three; their
/// inflated residuals are summed by the caller.
inline std::vector<PlaneAxes> plane_schedule(std::size_t layer, Strategy strategy) {
  switch (strategy) {
    case Strategy::baseline: return {kAllPlanes[layer % 3]};
    case Strategy::reverse: return {kAllPlanes[2 - layer % 3]};
    case Strategy::bev: return {kPlaneXY};
    case Strategy::parallel: return {kPlaneXY, kPlaneXZ, kPlaneYZ};
  }
  throw Error("unknown strategy");
}

}  // namespace waffle
