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
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vla4d/occgrid.hpp"
#include "vla4d/qaengine.hpp"
#include "vla4d/worldgen.hpp"

namespace vla4d::metrics {

struct Ray {
  std::array<double, 3> origin;
  std::array<double, 3> dir;  // unit length
};

inline constexpr double kSensorHeight = 1.8;  // metres above the grid floor

// Lidar-like fan from the ego origin at sensor height: `azimuths` evenly
// spaced headings times `elevations` beams spread over [-30.67, +10.67] deg.
std::vector<Ray> ray_fan(const occgrid::GridSpec& spec, int azimuths = 512, int elevations = 32);

struct RayHit {
  bool hit = false;
  double depth = 0.0;  // metres from the origin to the entry face
  int cls = 0;
  std::array<int, 3> voxel{};
};

// Voxel traversal from `origin` along unit `dir`; returns the first non-free
// voxel. Rays that leave the volume miss.
RayHit cast_ray(const occgrid::OccupancyGrid& grid, const std::array<double, 3>& origin,
                const std::array<double, 3>& dir);

struct RayCounts {
  long tp = 0, fp = 0, fn = 0;
  double iou() const { return tp + fp + fn == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp + fn); }
};

// A ray is a true positive when both grids hit the same class within
// `threshold` metres of depth; otherwise a pred hit adds a false positive
// and a gt hit a false negative. Rays missing in both are ignored.
RayCounts ray_counts(const occgrid::OccupancyGrid& pred, const occgrid::OccupancyGrid& gt,
                     const std::vector<Ray>& rays, double threshold);
double ray_iou(const occgrid::OccupancyGrid& pred, const occgrid::OccupancyGrid& gt,
               const std::vector<Ray>& rays, double threshold);

struct RayIou {
  double at1 = 0, at2 = 0, at4 = 0, mean = 0;
};
// Sums counts over scenes, casting each ray once per grid.
RayIou ray_iou_multi(const std::vector<const occgrid::OccupancyGrid*>& preds,
                     const std::vector<const occgrid::OccupancyGrid*>& gts, const std::vector<Ray>& rays);

struct Mave {
  std::map<std::string, double> per_class;
  double mean = 0.0;
};

// Accumulates per-class velocity errors over dynamic voxels of movable classes.
class MaveAccumulator {
 public:
  void add(const std::vector<double>& pred_velocity, const occgrid::FlowField& gt,
           const occgrid::OccupancyGrid& gt_occ);
  void add_error(const std::string& cls, double err);
  Mave result() const;

 private:
  std::map<std::string, std::pair<double, long>> sums_;
};
Mave mave(const std::vector<double>& pred_velocity, const occgrid::FlowField& gt,
          const occgrid::OccupancyGrid& gt_occ);

// 100 * (0.9 RayIoU + 0.1 max(0, 1 - mAVE)).
double occ_score(double rayiou_mean, double mave);

struct PlanL2 {
  double at1 = 0, at2 = 0, at3 = 0, avg = 0;
};
// Displacement error at frames 2, 4, 6 (1 s, 2 s, 3 s).
PlanL2 plan_l2(const occgrid::TrajectoryPlan& pred, const occgrid::TrajectoryPlan& gt);

// Collision flag per future frame: the ego rectangle at the waypoint overlaps
// (positive area) a column holding a movable or barrier voxel; with
// `all_obstacles` every non-ground occupied voxel counts.
std::array<bool, occgrid::kPlanFrames> collisions(const occgrid::TrajectoryPlan& pred,
                                                  const std::vector<occgrid::OccupancyGrid>& future,
                                                  bool all_obstacles = false);

struct Collision {
  double at1 = 0, at2 = 0, at3 = 0, avg = 0;
};
class PlanAccumulator {
 public:
  void add(const occgrid::TrajectoryPlan& pred, const occgrid::TrajectoryPlan& gt,
           const std::vector<occgrid::OccupancyGrid>* future, bool all_obstacles = false);
  void add_worst_case();
  PlanL2 l2() const;
  Collision collision() const;
  long count() const { return n_; }

 private:
  long n_ = 0;
  std::array<double, 3> l2_{};
  std::array<double, 3> col_{};
  long n_col_ = 0;
};

inline constexpr double kWorstVelocityError = 10.0;  // m/s, unparseable flow answer
inline constexpr double kWorstPlanL2 = 30.0;         // m, unparseable trajectory

struct QaScores {
  std::map<std::string, double> accuracy;  // per categorical task
  std::map<std::string, long> count;
  long unparseable = 0;
  double overall = 0.0;  // mean of status, class and action accuracy present
  double text_mave = 0.0;
  PlanL2 text_l2;
  Collision text_collision;
};

// predictions[i] answers refs[i]. `scenes` (optional) maps scene ids to
// samples for collision scoring of textual trajectories.
QaScores qa_accuracy(const std::vector<qa::QaPair>& refs, const std::vector<std::string>& predictions,
                     const std::map<std::string, const worldgen::SceneSample*>* scenes = nullptr);

double voxel_accuracy(const occgrid::OccupancyGrid& pred, const occgrid::OccupancyGrid& gt);

struct MetricReport {
  RayIou rayiou;
  Mave mave;
  double occscore = 0;
  PlanL2 l2;
  Collision collision;
  double voxel_accuracy = 0;
  QaScores qa;
  long scenes = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

}  // namespace vla4d::metrics
