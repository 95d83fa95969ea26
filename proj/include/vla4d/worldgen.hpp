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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vla4d/footprint.hpp"
#include "vla4d/occgrid.hpp"

namespace vla4d::worldgen {

enum class Command { kStraight = 0, kRight = 1, kLeft = 2, kStop = 3 };
inline constexpr int kNumCommands = 4;

const char* command_name(Command c);  // "straight", "right", "left", "stop"
Command command_from_name(const std::string& name);

inline constexpr double kStopDisplacement = 0.5;  // metres of path length
inline constexpr double kTurnLateral = 1.5;       // metres of final |y|

// stop <=> path length < 0.5 m; left/right <=> final lateral offset beyond
// +/-1.5 m (y points left); straight otherwise.
Command command_from_plan(const occgrid::TrajectoryPlan& plan);

enum class Difficulty { kEasy, kDefault, kHard };
Difficulty difficulty_from_name(const std::string& name);

// Forces the ego manoeuvre family; kAny draws it from the seed.
enum class Scenario { kAny, kStraight, kLeft, kRight, kStop };

struct Agent {
  int class_id = occgrid::kCar;
  double cx = 0, cy = 0;  // metres, ego frame, at t = 0
  double length = 0, width = 0;
  int height_bins = 1;
  double yaw = 0;
  double vx = 0, vy = 0;  // m/s, rigid translation

  bool moving() const { return vx != 0.0 || vy != 0.0; }
  occgrid::OrientedRect rect_at(double t) const {
    return {cx + vx * t, cy + vy * t, length, width, yaw};
  }
};

struct SceneSample {
  std::string scene_id;
  std::uint64_t rng_seed = 0;
  occgrid::GridSpec spec;
  // [2, nx, ny]: channel 0 geometry (top height / volume height),
  // channel 1 class-keyed appearance; both with additive Gaussian noise.
  std::vector<double> sensor;
  occgrid::OccupancyGrid occ;
  occgrid::FlowField flow;
  occgrid::TrajectoryPlan plan;
  Command command = Command::kStraight;
  std::vector<Agent> agents;
  // Occupancy at +0.5 s ... +3.0 s.
  std::vector<occgrid::OccupancyGrid> future;

  double sensor_at(int channel, int x, int y) const {
    return sensor[(static_cast<std::size_t>(channel) * spec.nx + x) * spec.ny + y];
  }
};

inline constexpr double kSensorNoise = 0.05;

SceneSample generate_scene(std::uint64_t seed, const occgrid::GridSpec& spec,
                           Difficulty difficulty = Difficulty::kDefault,
                           Scenario scenario = Scenario::kAny);

// Labels of the static layout plus agents moved to time t.
occgrid::OccupancyGrid render_frame(const occgrid::OccupancyGrid& static_layout,
                                    const std::vector<Agent>& agents, double t);

// Seed of scene i within a split generated from `seed`.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

void save_scene(const std::filesystem::path& dir, const SceneSample& scene);
SceneSample load_scene(const std::filesystem::path& dir, const occgrid::GridSpec& spec,
                       const std::vector<std::string>& class_names);

struct SceneEntry {
  std::string id;
  std::string split;  // "train" | "val"
};

struct SceneSetManifest {
  occgrid::GridSpec spec;
  std::vector<std::string> class_names;
  double frame_rate_hz = 2.0;
  std::uint64_t seed = 0;
  std::vector<SceneEntry> scenes;

  std::vector<std::string> ids(const std::string& split) const;
};

void write_manifest(const std::filesystem::path& dir, const SceneSetManifest& m);
SceneSetManifest read_manifest(const std::filesystem::path& dir);

// Generates n scenes under `out` (out/<split>/<id>/...) with a deterministic
// 85/15 train/val split and writes manifest.json.
SceneSetManifest generate_split(int n_scenes, std::uint64_t seed,
                                const occgrid::GridSpec& spec,
                                const std::filesystem::path& out,
                                Difficulty difficulty = Difficulty::kDefault);

std::filesystem::path scene_dir(const std::filesystem::path& root, const SceneEntry& e);

}  // namespace vla4d::worldgen
