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
#include "vla4d/footprint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vla4d::occgrid {

std::array<std::array<double, 2>, 4> OrientedRect::corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = 0.5 * length, hw = 0.5 * width;
  const std::array<std::array<double, 2>, 4> local = {
      {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<std::array<double, 2>, 4> out{};
  for (int i = 0; i < 4; ++i) {
    out[i] = {cx + c * local[i][0] - s * local[i][1],
              cy + s * local[i][0] + c * local[i][1]};
  }
  return out;
}

namespace {

void project(const std::array<std::array<double, 2>, 4>& pts, double ax, double ay,
             double& lo, double& hi) {
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  for (const auto& p : pts) {
    const double d = p[0] * ax + p[1] * ay;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
}

}  // namespace

bool rects_overlap(const OrientedRect& a, const OrientedRect& b, bool strict) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double axes[4][2] = {{std::cos(a.yaw), std::sin(a.yaw)},
                             {-std::sin(a.yaw), std::cos(a.yaw)},
                             {std::cos(b.yaw), std::sin(b.yaw)},
                             {-std::sin(b.yaw), std::cos(b.yaw)}};
  // Projections of exactly touching shapes can differ by rounding noise.
  constexpr double kTouch = 1e-9;
  for (const auto& ax : axes) {
    double alo, ahi, blo, bhi;
    project(ca, ax[0], ax[1], alo, ahi);
    project(cb, ax[0], ax[1], blo, bhi);
    const double overlap = std::min(ahi, bhi) - std::max(alo, blo);
    if (strict ? overlap <= kTouch : overlap < -kTouch) return false;
  }
  return true;
}

std::array<double, kPlanFrames> plan_headings(const TrajectoryPlan& plan) {
  std::array<double, kPlanFrames> yaw{};
  double prev = 0.0, px = 0.0, py = 0.0;
  for (int i = 0; i < kPlanFrames; ++i) {
    const double dx = plan.waypoints[i][0] - px;
    const double dy = plan.waypoints[i][1] - py;
    if (std::hypot(dx, dy) > 0.05) prev = std::atan2(dy, dx);
    yaw[i] = prev;
    px = plan.waypoints[i][0];
    py = plan.waypoints[i][1];
  }
  return yaw;
}

OrientedRect ego_rect_at(const TrajectoryPlan& plan, int frame, double length,
                         double width) {
  const auto yaw = plan_headings(plan);
  return {plan.waypoints[frame][0], plan.waypoints[frame][1], length, width, yaw[frame]};
}

OrientedRect column_rect(const GridSpec& spec, int x, int y) {
  return {spec.x_min + (x + 0.5) * spec.voxel_size, spec.y_min + (y + 0.5) * spec.voxel_size,
          spec.voxel_size, spec.voxel_size, 0.0};
}

std::vector<std::array<int, 2>> columns_under(const GridSpec& spec, const OrientedRect& r) {
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& c : r.corners()) {
    xlo = std::min(xlo, c[0]);
    xhi = std::max(xhi, c[0]);
    ylo = std::min(ylo, c[1]);
    yhi = std::max(yhi, c[1]);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor((xlo - spec.x_min) / spec.voxel_size)) - 1);
  const int x1 = std::min(spec.nx - 1, static_cast<int>(std::floor((xhi - spec.x_min) / spec.voxel_size)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor((ylo - spec.y_min) / spec.voxel_size)) - 1);
  const int y1 = std::min(spec.ny - 1, static_cast<int>(std::floor((yhi - spec.y_min) / spec.voxel_size)) + 1);
  std::vector<std::array<int, 2>> out;
  for (int x = x0; x <= x1; ++x) {
    for (int y = y0; y <= y1; ++y) {
      if (rects_overlap(r, column_rect(spec, x, y), true)) out.push_back({x, y});
    }
  }
  return out;
}

}  // namespace vla4d::occgrid
