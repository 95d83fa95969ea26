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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vla4d/errors.hpp"

namespace vla4d::occgrid {

// Ego-centric voxel volume. Index (nx/2, ny/2, 0) holds the ego origin.
struct GridSpec {
  int nx = 40;
  int ny = 40;
  int nz = 8;
  double x_min = -20.0;
  double y_min = -20.0;
  double z_min = 0.0;
  double voxel_size = 1.0;
  double dz = 0.75;

  // Builds a spec whose extent is derived so the ego sits at (nx/2, ny/2, 0).
  static GridSpec centered(int nx, int ny, int nz, double voxel_size, double dz);
  static GridSpec desk() { return centered(40, 40, 8, 1.0, 0.75); }
  static GridSpec paper() { return centered(200, 200, 16, 0.4, 0.4); }

  void validate() const;
  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(nx) * ny * nz;
  }
  std::int64_t index(int x, int y, int z) const {
    return (static_cast<std::int64_t>(x) * ny + y) * nz + z;
  }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  double x_max() const { return x_min + nx * voxel_size; }
  double y_max() const { return y_min + ny * voxel_size; }
  double z_max() const { return z_min + nz * dz; }

  bool operator==(const GridSpec&) const = default;
};

// Nine-class default label set; id 0 is always "free".
enum ClassId : std::uint8_t {
  kFree = 0,
  kCar = 1,
  kTruck = 2,
  kPedestrian = 3,
  kBicycle = 4,
  kRoad = 5,
  kBuilding = 6,
  kVegetation = 7,
  kBarrier = 8,
};
const std::vector<std::string>& default_class_names();
bool is_movable(int class_id);

class OccupancyGrid {
 public:
  OccupancyGrid(GridSpec spec, std::vector<std::uint8_t> labels,
                std::vector<std::string> class_names = default_class_names());
  // All-free grid.
  explicit OccupancyGrid(GridSpec spec,
                         std::vector<std::string> class_names = default_class_names());

  const GridSpec& spec() const { return spec_; }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return static_cast<int>(class_names_.size()); }
  int at(int x, int y, int z) const { return labels_[spec_.index(x, y, z)]; }
  double free_fraction() const;

  bool operator==(const OccupancyGrid&) const = default;

 private:
  GridSpec spec_;
  std::vector<std::uint8_t> labels_;
  std::vector<std::string> class_names_;
};

class FlowField {
 public:
  // velocity is [nx, ny, nz, 2] flattened; dynamic is [nx, ny, nz].
  FlowField(GridSpec spec, std::vector<double> velocity,
            std::vector<std::uint8_t> dynamic);
  explicit FlowField(GridSpec spec);

  const GridSpec& spec() const { return spec_; }
  const std::vector<double>& velocity() const { return velocity_; }
  const std::vector<std::uint8_t>& dynamic_mask() const { return dynamic_; }
  std::array<double, 2> at(int x, int y, int z) const {
    const auto i = spec_.index(x, y, z);
    return {velocity_[2 * i], velocity_[2 * i + 1]};
  }
  bool is_dynamic(int x, int y, int z) const {
    return dynamic_[spec_.index(x, y, z)] != 0;
  }
  // Throws FormatError if a dynamic voxel is free in `occ`.
  void check_against(const OccupancyGrid& occ) const;

  bool operator==(const FlowField&) const = default;

 private:
  GridSpec spec_;
  std::vector<double> velocity_;
  std::vector<std::uint8_t> dynamic_;
};

struct EgoStatus {
  double speed = 0.0;     // m/s
  double yaw_rate = 0.0;  // rad/s
  double accel = 0.0;     // m/s^2
  bool operator==(const EgoStatus&) const = default;
};

inline constexpr int kPlanFrames = 6;
inline constexpr double kFrameInterval = 0.5;  // seconds

// Six future ego positions (ego frame, metres) at 0.5 s spacing.
struct TrajectoryPlan {
  std::array<std::array<double, 2>, kPlanFrames> waypoints{};
  std::optional<EgoStatus> ego_status;

  bool all_finite() const;
  double path_length() const;
  bool operator==(const TrajectoryPlan&) const = default;
};

struct OccToken {
  int x = 0;
  int y = 0;
  int z = 0;
  bool operator==(const OccToken&) const = default;
};

OccToken world_to_grid(const std::array<double, 3>& point, const GridSpec& spec);
std::array<double, 3> grid_to_world_center(const OccToken& t, const GridSpec& spec);

std::string render_occ_token(const OccToken& t);
// Accepts "<OCC>(x, y, z)</OCC>" with arbitrary whitespace inside.
OccToken parse_occ_token(std::string_view s);
// First well-formed <OCC>...</OCC> span in free text; malformed spans are skipped.
std::optional<OccToken> find_occ_token(std::string_view text);

// ---- binary arrays ----------------------------------------------------------
// Layout: "OCG1" | u32 dtype | u32 rank | u32 element count | rank x u32 dims |
// little-endian payload.
enum class DType : std::uint32_t { kU8 = 1, kI32 = 2, kF32 = 3, kF64 = 4 };

struct RawArray {
  DType dtype = DType::kU8;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

void write_array(const std::filesystem::path& path, const RawArray& a);
RawArray read_array(const std::filesystem::path& path);

void write_u8(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
              const std::vector<std::uint8_t>& values);
std::vector<std::uint8_t> read_u8(const std::filesystem::path& path,
                                  const std::vector<std::uint32_t>& expect_dims);
void write_f64(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
               const std::vector<double>& values);
std::vector<double> read_f64(const std::filesystem::path& path,
                             const std::vector<std::uint32_t>& expect_dims);

void save_grid(const std::filesystem::path& path, const OccupancyGrid& grid);
OccupancyGrid load_grid(const std::filesystem::path& path, const GridSpec& spec,
                        const std::vector<std::string>& class_names = default_class_names());
// Writes `path` (velocity) and `path`.mask (dynamic flags).
void save_flow(const std::filesystem::path& path, const FlowField& flow);
FlowField load_flow(const std::filesystem::path& path, const GridSpec& spec);

}  // namespace vla4d::occgrid
