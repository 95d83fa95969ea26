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
#include <vector>

#include "vla4d/occgrid.hpp"

namespace vla4d::occgrid {

// Rectangle in the ground plane. `length` runs along `yaw`.
struct OrientedRect {
  double cx = 0;
  double cy = 0;
  double length = 0;
  double width = 0;
  double yaw = 0;

  std::array<std::array<double, 2>, 4> corners() const;
};

// Separating-axis test. Strict mode requires positive-area overlap, so
// rectangles that only touch along an edge do not overlap.
bool rects_overlap(const OrientedRect& a, const OrientedRect& b, bool strict = true);

inline constexpr double kEgoLength = 4.1;
inline constexpr double kEgoWidth = 1.85;

// Heading at each waypoint from the displacement to the previous one (the
// ego origin for the first). Near-zero steps keep the previous heading.
std::array<double, kPlanFrames> plan_headings(const TrajectoryPlan& plan);

OrientedRect ego_rect_at(const TrajectoryPlan& plan, int frame,
                         double length = kEgoLength, double width = kEgoWidth);

// Ground-plane square of column (x, y).
OrientedRect column_rect(const GridSpec& spec, int x, int y);

// Columns whose square overlaps `r` with positive area.
std::vector<std::array<int, 2>> columns_under(const GridSpec& spec, const OrientedRect& r);

}  // namespace vla4d::occgrid
