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
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "waffle/common.hpp"

namespace waffle {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Feature matrices are stored channel-major (F x N).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T& operator()(std::size_t a, std::size_t b, std::size_t c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  const T& operator()(std::size_t a, std::size_t b, std::size_t c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }

  /// Row r of a rank-2 tensor (one channel across all points).
  std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * shape_[1], shape_[1]};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{0}); }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size())
      throw Error("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw Error(std::string("shape mismatch in ") + what + ": expected " +
                shape_string(expected) + ", got " + shape_string(t.shape()));
}

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;  // empty for non-trainable entries
  bool trainable = true;
};

/// Named parameters. Iteration order is the lexicographic name order, which
/// fixes the layout of checkpoints and optimizer state.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (items_.count(name)) throw Error("duplicate parameter name: " + name);
    Parameter<T> p;
    if (trainable) p.grad = Tensor<T>(value.shape());
    p.value = std::move(value);
    p.trainable = trainable;
    return items_.emplace(name, std::move(p)).first->second;
  }

  bool contains(const std::string& name) const { return items_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = items_.find(name);
    if (it == items_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = items_.find(name);
    if (it == items_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t entries() const { return items_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : items_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : items_)
      if (p.trainable) p.grad.zero();
  }

 private:
  std::map<std::string, Parameter<T>> items_;
};

}  // namespace waffle
