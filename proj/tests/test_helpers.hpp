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

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vla4d/autograd.hpp"
#include "vla4d/metrics.hpp"
#include "vla4d/occgrid.hpp"

namespace vla4d::testing {

struct GradReport {
  double worst = 0.0;  // largest per-input relative error
  std::string worst_name;
};

// Compares backward() against central differences for every input. The
// relative error of one input is |analytic - numeric| / max(|analytic|,
// |numeric|, floor) over its whole gradient vector.
inline GradReport gradcheck(const std::function<ad::Var()>& f,
                            const std::vector<std::pair<std::string, ad::Var>>& inputs,
                            double h = 1e-5, double floor = 1e-8) {
  for (const auto& [name, v] : inputs) const_cast<ad::Var&>(v).zero_grad();
  f().backward();
  GradReport rep;
  for (const auto& [name, v] : inputs) {
    ad::Var var = v;
    const Tensor analytic = var.grad();
    double diff = 0, na = 0, nn = 0;
    for (std::int64_t i = 0; i < var.value().numel(); ++i) {
      double& x = var.mutable_value()[i];
      const double saved = x;
      double plus, minus;
      {
        ad::NoGradGuard ng;
        x = saved + h;
        plus = f().item();
        x = saved - h;
        minus = f().item();
      }
      x = saved;
      const double num = (plus - minus) / (2 * h);
      const double a = analytic.data.empty() ? 0.0 : analytic[i];
      diff += (a - num) * (a - num);
      na += a * a;
      nn += num * num;
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    if (rel >= rep.worst) {
      rep.worst = rel;
      rep.worst_name = name;
    }
  }
  return rep;
}

inline ad::Var random_leaf(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  return ad::Var(ad::normal_tensor(std::move(shape), stddev, rng), true);
}

// Random labels: each voxel occupied with probability `density`.
inline occgrid::OccupancyGrid random_grid(const occgrid::GridSpec& spec, double density,
                                          std::mt19937_64& rng, int classes = 9) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(spec.voxel_count()), 0);
  std::bernoulli_distribution occ(density);
  std::uniform_int_distribution<int> cls(1, classes - 1);
  for (auto& l : labels) {
    if (occ(rng)) l = static_cast<std::uint8_t>(cls(rng));
  }
  return occgrid::OccupancyGrid(spec, std::move(labels));
}

struct MarchHit {
  bool hit = false;
  std::array<int, 3> voxel{};
  int cls = 0;
  double depth = 0.0;
};

// Fixed-step ray marcher: samples the ray every `step` metres and reports
// the first sample that falls in an occupied voxel. Samples outside the
// volume are skipped until the ray has left it for good.
inline MarchHit brute_force_march(const occgrid::OccupancyGrid& grid,
                                  const std::array<double, 3>& o,
                                  const std::array<double, 3>& d, double step = 1e-3) {
  const auto& s = grid.spec();
  const double reach = std::hypot(s.x_max() - s.x_min, s.y_max() - s.y_min, s.z_max() - s.z_min) +
                       std::hypot(o[0] - s.x_min, o[1] - s.y_min, o[2] - s.z_min);
  MarchHit out;
  for (double t = 0.0; t <= reach; t += step) {
    const double p[3] = {o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]};
    const int x = static_cast<int>(std::floor((p[0] - s.x_min) / s.voxel_size));
    const int y = static_cast<int>(std::floor((p[1] - s.y_min) / s.voxel_size));
    const int z = static_cast<int>(std::floor((p[2] - s.z_min) / s.dz));
    if (!s.in_bounds(x, y, z)) continue;
    const int c = grid.at(x, y, z);
    if (c != 0) {
      out.hit = true;
      out.voxel = {x, y, z};
      out.cls = c;
      out.depth = t;
      return out;
    }
  }
  return out;
}

// Distance along the ray to the entry face of an axis-aligned voxel box
// (slab method); nullopt when the ray misses the box.
inline std::optional<double> box_entry(const occgrid::GridSpec& s, const std::array<int, 3>& v,
                                       const std::array<double, 3>& o,
                                       const std::array<double, 3>& d) {
  const double lo[3] = {s.x_min + v[0] * s.voxel_size, s.y_min + v[1] * s.voxel_size,
                        s.z_min + v[2] * s.dz};
  const double hi[3] = {lo[0] + s.voxel_size, lo[1] + s.voxel_size, lo[2] + s.dz};
  double t0 = 0.0, t1 = 1e300;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;
  return t0;
}

inline std::array<double, 3> random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    std::array<double, 3> d = {n(rng), n(rng), n(rng)};
    const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (len > 1e-6) return {d[0] / len, d[1] / len, d[2] / len};
  }
}

// Fresh per-test scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vla4d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vla4d::testing
