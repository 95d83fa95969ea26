/* Copyright 2026 The vla4d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "vla4d/errors.hpp"

namespace vla4d {

using Shape = std::vector<int>;

// Aligned to the widest SIMD packet so vectorised reductions peel the same
// way for every allocation; plain std::vector storage made results depend on
// the heap address.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense row-major float64 array. Rank-2 views treat the first axis as rows
// and flatten the rest into columns.
struct Tensor {
  Shape shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, Buffer values);
  Tensor(Shape s, const std::vector<double>& values);
  Tensor(Shape s, std::initializer_list<double> values);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    return shape.empty() || shape[0] == 0
               ? 1
               : static_cast<int>(data.size() / static_cast<std::size_t>(shape[0]));
  }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const {
    return data[static_cast<std::size_t>(i)];
  }
  double& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols() + c];
  }

  MatMap mat() { return MatMap(data.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows(), cols()); }
  ConstMatMap cmat() const { return mat(); }

  Tensor reshaped(Shape s) const;
  bool all_finite() const;
  void fill(double v);
};

}  // namespace vla4d
