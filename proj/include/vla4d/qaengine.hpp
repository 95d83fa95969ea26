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
#include <optional>
#include <string>
#include <vector>

#include "vla4d/occgrid.hpp"
#include "vla4d/worldgen.hpp"

namespace vla4d::qa {

enum class Task { kCaption, kOccStatus, kOccClassFlow, kAction, kTrajectory };
inline constexpr int kNumTasks = 5;
const char* task_name(Task t);  // "caption", "occ_status", "occ_class_flow", "action", "trajectory"
Task task_from_name(const std::string& name);

struct QaPair {
  std::string scene_id;
  int frame = 0;
  Task task = Task::kCaption;
  std::string question;
  std::string answer;
  std::optional<occgrid::OccToken> anchor;

  bool operator==(const QaPair&) const = default;
};

// Occupancy preamble with the grid numbers filled in from `spec`.
std::string occ_preamble(const occgrid::GridSpec& spec);
std::string status_question(const occgrid::GridSpec& spec, const occgrid::OccToken& t);
std::string class_flow_question(const occgrid::GridSpec& spec, const occgrid::OccToken& t);
inline constexpr const char* kActionQuestion = "What is the safe action of the ego car?";
inline constexpr const char* kTrajectoryQuestion =
    "Predict the future 6-frame trajectory of the ego car in the last.";
inline constexpr const char* kCaptionQuestion = "Describe the current driving scene.";

// Two decimals with trailing zeros dropped down to one decimal ("0.1",
// "0.06", "0.0"); never "-0.0".
std::string format_velocity(double v);
std::string render_class_flow(const std::string& label, double vx, double vy);
std::string render_action(worldgen::Command c);
std::string render_trajectory(const occgrid::TrajectoryPlan& plan, int precision = 2);

QaPair gen_caption(const worldgen::SceneSample& scene);
std::vector<QaPair> gen_occ_status_qa(const worldgen::SceneSample& scene, int n, std::uint64_t seed);
std::vector<QaPair> gen_occ_class_flow_qa(const worldgen::SceneSample& scene, int n,
                                          std::uint64_t seed);
QaPair gen_action_qa(const worldgen::SceneSample& scene);
QaPair gen_traj_qa(const worldgen::SceneSample& scene, int precision = 2);

// ---- answer parsing ----------------------------------------------------------
struct ClassFlowAnswer {
  bool free = false;
  std::string label;
  double vx = 0.0;
  double vy = 0.0;
};

bool parse_status(const std::string& text);  // "yes" -> true
ClassFlowAnswer parse_class_flow(const std::string& text);
worldgen::Command parse_action(const std::string& text);
occgrid::TrajectoryPlan parse_trajectory(const std::string& text);

// ---- corpus ------------------------------------------------------------------
// Pairs generated per scene, in task order.
struct Mix {
  int caption = 1;
  int occ = 5;   // occupancy status questions
  int flow = 2;  // occupancy class + velocity questions
  int action = 1;
  int trajectory = 1;

  // "caption=1,occ=5,flow=2,action=1,trajectory=1"; omitted keys keep defaults.
  static Mix parse(const std::string& text);
  std::string str() const;
  int per_scene() const { return caption + occ + flow + action + trajectory; }
  int count(Task t) const;
};

std::vector<QaPair> gen_scene_qa(const worldgen::SceneSample& scene, const Mix& mix,
                                 std::uint64_t seed);
// Scenes are processed in parallel; output order follows the input order.
std::vector<QaPair> gen_corpus(const std::vector<worldgen::SceneSample>& scenes, const Mix& mix,
                               std::uint64_t seed);

std::string to_jsonl(const QaPair& p);
QaPair from_jsonl(const std::string& line);
void write_corpus(const std::filesystem::path& path, const std::vector<QaPair>& pairs);
std::vector<QaPair> read_corpus(const std::filesystem::path& path);

// Words used by every template, for building the vocabulary.
std::vector<std::string> template_texts(const occgrid::GridSpec& spec);

}  // namespace vla4d::qa
