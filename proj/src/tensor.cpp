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
#include "vla4d/tensor.hpp"

#include <cmath>
#include <sstream>

namespace vla4d {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)),
      data(static_cast<std::size_t>(shape_numel(shape)), fill) {}

Tensor::Tensor(Shape s, const std::vector<double>& values)
    : Tensor(std::move(s), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(Shape s, std::initializer_list<double> values)
    : Tensor(std::move(s), Buffer(values)) {}

Tensor::Tensor(Shape s, Buffer values)
    : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("tensor data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape) + " to " +
                     shape_str(s));
  }
  return Tensor(std::move(s), data);
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

}  // namespace vla4d
