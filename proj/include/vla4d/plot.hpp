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
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vla4d/occgrid.hpp"

namespace vla4d::plot {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {0, 0, 0});
  void set(int x, int y, std::array<std::uint8_t, 3> c);
  std::array<std::uint8_t, 3> get(int x, int y) const;
};

// 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& img);

std::array<std::uint8_t, 3> class_color(int class_id);

// Top-down view, forward (+x) pointing up and +y to the left. Each column
// shows its highest non-free class; trajectories are drawn as polylines
// from the ego origin (ground truth green, prediction red).
Image occupancy_panel(const occgrid::OccupancyGrid& grid, const occgrid::TrajectoryPlan* gt,
                      const occgrid::TrajectoryPlan* pred, int cell_px = 8);
// Per-column velocity of the highest dynamic voxel, hue by direction and
// brightness by speed (saturating at max_speed). Static columns keep their class
// colour at quarter brightness.
Image flow_panel(const occgrid::OccupancyGrid& grid, const std::vector<double>& velocity,
                 const std::vector<std::uint8_t>* dynamic, double max_speed = 8.0, int cell_px = 8);

// Panels left to right with a white gap.
Image hstack(const std::vector<Image>& panels, int gap = 4);

}  // namespace vla4d::plot
