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
#include "vla4d/plot.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

namespace vla4d::plot {

using Rgb = std::array<std::uint8_t, 3>;

Image::Image(int w, int h, Rgb fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + i);
}

void Image::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<std::size_t>(y) * width + x) * 3);
}

Rgb Image::get(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!f) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png write failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Rgb class_color(int class_id) {
  static const Rgb kColors[] = {
      {0, 0, 0},        // free
      {0, 150, 245},    // car
      {160, 32, 240},   // truck
      {255, 30, 30},    // pedestrian
      {255, 192, 203},  // bicycle
      {90, 90, 90},     // road
      {230, 230, 250},  // building
      {0, 175, 0},      // vegetation
      {255, 120, 50},   // barrier
  };
  if (class_id >= 0 && class_id < static_cast<int>(std::size(kColors))) return kColors[class_id];
  return {255, 255, 0};
}

namespace {

void fill_cell(Image& img, const occgrid::GridSpec& s, int x, int y, int px, Rgb c) {
  const int col = (s.ny - 1 - y) * px, row = (s.nx - 1 - x) * px;
  for (int i = 0; i < px; ++i) {
    for (int j = 0; j < px; ++j) img.set(col + j, row + i, c);
  }
}

// Pixel of a ground-plane point.
std::array<double, 2> to_pixel(const occgrid::GridSpec& s, double x, double y, int px) {
  return {(s.y_max() - y) / s.voxel_size * px, (s.x_max() - x) / s.voxel_size * px};
}

void line(Image& img, std::array<double, 2> a, std::array<double, 2> b, Rgb c) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(b[0] - a[0]), std::abs(b[1] - a[1])))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int x = static_cast<int>(std::lround(a[0] + t * (b[0] - a[0])));
    const int y = static_cast<int>(std::lround(a[1] + t * (b[1] - a[1])));
    for (int dx = -1; dx <= 1; ++dx) {
      for (int dy = -1; dy <= 1; ++dy) img.set(x + dx, y + dy, c);
    }
  }
}

void draw_plan(Image& img, const occgrid::GridSpec& s, const occgrid::TrajectoryPlan& p, int px, Rgb c) {
  auto prev = to_pixel(s, 0.0, 0.0, px);
  for (const auto& w : p.waypoints) {
    const auto cur = to_pixel(s, w[0], w[1], px);
    line(img, prev, cur, c);
    prev = cur;
  }
}

Rgb hsv(double h, double v) {
  const double c = v, hp = std::fmod(h / (std::numbers::pi / 3.0) + 6.0, 6.0);
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  return {static_cast<std::uint8_t>(255 * r), static_cast<std::uint8_t>(255 * g), static_cast<std::uint8_t>(255 * b)};
}

}  // namespace

Image occupancy_panel(const occgrid::OccupancyGrid& grid, const occgrid::TrajectoryPlan* gt,
                      const occgrid::TrajectoryPlan* pred, int px) {
  const auto& s = grid.spec();
  Image img(s.ny * px, s.nx * px);
  for (int x = 0; x < s.nx; ++x) {
    for (int y = 0; y < s.ny; ++y) {
      for (int z = s.nz - 1; z >= 0; --z) {
        if (grid.at(x, y, z) != occgrid::kFree) {
          fill_cell(img, s, x, y, px, class_color(grid.at(x, y, z)));
          break;
        }
      }
    }
  }
  if (gt) draw_plan(img, s, *gt, px, {40, 255, 40});
  if (pred) draw_plan(img, s, *pred, px, {255, 40, 40});
  const auto o = to_pixel(s, 0.0, 0.0, px);
  for (int i = -2; i <= 2; ++i) {
    for (int j = -2; j <= 2; ++j) img.set(static_cast<int>(o[0]) + i, static_cast<int>(o[1]) + j, {255, 255, 255});
  }
  return img;
}

Image flow_panel(const occgrid::OccupancyGrid& grid, const std::vector<double>& velocity,
                 const std::vector<std::uint8_t>* dynamic, double max_speed, int px) {
  const auto& s = grid.spec();
  if (velocity.size() != static_cast<std::size_t>(2 * s.voxel_count())) throw ShapeError("flow panel: velocity size");
  Image img(s.ny * px, s.nx * px);
  for (int x = 0; x < s.nx; ++x) {
    for (int y = 0; y < s.ny; ++y) {
      for (int z = s.nz - 1; z >= 0; --z) {
        const int l = grid.at(x, y, z);
        if (l == occgrid::kFree) continue;
        const auto i = s.index(x, y, z);
        const bool moving = dynamic ? (*dynamic)[static_cast<std::size_t>(i)] != 0 : occgrid::is_movable(l);
        if (!moving) {
          const Rgb c = class_color(l);
          fill_cell(img, s, x, y, px,
                    {static_cast<std::uint8_t>(c[0] / 4), static_cast<std::uint8_t>(c[1] / 4),
                     static_cast<std::uint8_t>(c[2] / 4)});
          break;
        }
        const double vx = velocity[2 * i], vy = velocity[2 * i + 1];
        const double speed = std::hypot(vx, vy);
        fill_cell(img, s, x, y, px, hsv(std::atan2(vy, vx), 0.3 + 0.7 * std::min(1.0, speed / max_speed)));
        break;
      }
    }
  }
  return img;
}

Image hstack(const std::vector<Image>& panels, int gap) {
  int w = 0, h = 0;
  for (const auto& p : panels) {
    w += p.width;
    h = std::max(h, p.height);
  }
  if (!panels.empty()) w += gap * static_cast<int>(panels.size() - 1);
  Image out(w, h, {255, 255, 255});
  int off = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) out.set(off + x, y, p.get(x, y));
    }
    off += p.width + gap;
  }
  return out;
}

}  // namespace vla4d::plot
