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
#include "vla4d/qaengine.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"
#include "vla4d/parallel.hpp"

namespace vla4d::qa {

using occgrid::OccToken;
using json = nlohmann::json;

const char* task_name(Task t) {
  switch (t) {
    case Task::kCaption: return "caption";
    case Task::kOccStatus: return "occ_status";
    case Task::kOccClassFlow: return "occ_class_flow";
    case Task::kAction: return "action";
    case Task::kTrajectory: return "trajectory";
  }
  return "caption";
}

Task task_from_name(const std::string& name) {
  for (int i = 0; i < kNumTasks; ++i) {
    if (name == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
  }
  throw FormatError("unknown QA task \"" + name + "\"");
}

std::string occ_preamble(const occgrid::GridSpec& spec) {
  const int cx = spec.nx / 2, cy = spec.ny / 2;
  std::ostringstream os;
  os << "Your task is to predict the 3D occupancy of the scene. Assume you are located at the "
        "point (0, 0, 0). The scene area around you (in front, behind, left, and right) is "
        "divided into a "
     << spec.nx << "\xc3\x97" << spec.ny << " grid, with the bottom-left corner at (" << -cx << ", "
     << -cy << ") and the top-right corner at (" << spec.nx - cx << ", " << spec.ny - cy
     << "). The height region is divided into " << spec.nz
     << " bins. We use <OCC>(x, y, z)</OCC> to represent the point at location (x, y) with a "
        "height of z. Assume you are located at the point <OCC>("
     << cx << ", " << cy << ", 0)</OCC>. Answer the below question.";
  return os.str();
}

std::string status_question(const occgrid::GridSpec& spec, const OccToken& t) {
  return occ_preamble(spec) + " Is the position " + occgrid::render_occ_token(t) + " occupied?";
}

std::string class_flow_question(const occgrid::GridSpec& spec, const OccToken& t) {
  return occ_preamble(spec) + " What object is occupying position " + occgrid::render_occ_token(t) +
         "? If there is an object, please provide its name and predict the velocity; otherwise, "
         "answer 'free'.";
}

std::string format_velocity(double v) {
  double r = std::round(v * 100.0) / 100.0;
  if (r == 0.0) r = 0.0;  // folds -0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  std::string s(buf);
  if (s.back() == '0') s.pop_back();
  return s;
}

std::string render_class_flow(const std::string& label, double vx, double vy) {
  return "{label: " + label + "}, {vx: " + format_velocity(vx) + ", vy: " + format_velocity(vy) + "}";
}

std::string render_action(worldgen::Command c) {
  switch (c) {
    case worldgen::Command::kStraight: return "Go straight.";
    case worldgen::Command::kLeft: return "Turn left.";
    case worldgen::Command::kRight: return "Turn right.";
    case worldgen::Command::kStop: return "Stop.";
  }
  return "Go straight.";
}

namespace {

std::string fixed(double v, int precision) {
  const double scale = std::pow(10.0, precision);
  double r = std::round(v * scale) / scale;
  if (r == 0.0) r = 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, r);
  return buf;
}

}  // namespace

std::string render_trajectory(const occgrid::TrajectoryPlan& plan, int precision) {
  std::string s = "Future 6-frame trajectory: [";
  for (int i = 0; i < occgrid::kPlanFrames; ++i) {
    if (i) s += ", ";
    s += "(" + fixed(plan.waypoints[i][0], precision) + ", " + fixed(plan.waypoints[i][1], precision) + ")";
  }
  return s + "].";
}

// ---- generators --------------------------------------------------------------

namespace {

std::string plural(int n, const std::string& word) {
  return std::to_string(n) + " " + word + (n == 1 ? "" : "s");
}

std::string join_list(const std::vector<std::string>& parts) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) s += i + 1 == parts.size() ? " and " : ", ";
    s += parts[i];
  }
  return s;
}

QaPair make(const worldgen::SceneSample& s, Task task, std::string q, std::string a) {
  QaPair p;
  p.scene_id = s.scene_id;
  p.task = task;
  p.question = std::move(q);
  p.answer = std::move(a);
  return p;
}

OccToken token_of(const occgrid::GridSpec& spec, std::int64_t idx) {
  const int z = static_cast<int>(idx % spec.nz);
  const int y = static_cast<int>((idx / spec.nz) % spec.ny);
  const int x = static_cast<int>(idx / (static_cast<std::int64_t>(spec.nz) * spec.ny));
  return {x, y, z};
}

template <class V>
std::int64_t pick(const V& pool, std::mt19937_64& rng) {
  return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
}

struct VoxelPools {
  std::vector<std::int64_t> free, occupied, raised, movable, dynamic, static_occ;
};

VoxelPools pools_of(const worldgen::SceneSample& s) {
  VoxelPools p;
  const auto& labels = s.occ.labels();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(labels.size()); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l == occgrid::kFree) {
      p.free.push_back(i);
      continue;
    }
    p.occupied.push_back(i);
    if (i % s.spec.nz != 0) p.raised.push_back(i);
    if (occgrid::is_movable(l)) p.movable.push_back(i);
    if (s.flow.dynamic_mask()[static_cast<std::size_t>(i)]) {
      p.dynamic.push_back(i);
    } else {
      p.static_occ.push_back(i);
    }
  }
  return p;
}

}  // namespace

QaPair gen_caption(const worldgen::SceneSample& s) {
  std::map<int, int> counts;
  int moving_vehicles = 0, walking = 0;
  for (const auto& a : s.agents) {
    ++counts[a.class_id];
    if (a.moving()) (a.class_id == occgrid::kPedestrian ? walking : moving_vehicles) += 1;
  }
  bool buildings = false, trees = false, barriers = false;
  for (int x = 0; x < s.spec.nx; ++x) {
    for (int y = 0; y < s.spec.ny; ++y) {
      for (int z = 1; z < s.spec.nz; ++z) {
        const int l = s.occ.at(x, y, z);
        buildings |= l == occgrid::kBuilding;
        trees |= l == occgrid::kVegetation;
        barriers |= l == occgrid::kBarrier;
      }
    }
  }
  std::string c = "The scene shows a road";
  std::vector<std::string> context;
  if (buildings) context.push_back("buildings");
  if (trees) context.push_back("trees");
  if (barriers) context.push_back("barriers");
  c += context.empty() ? " in an open area." : " lined with " + join_list(context) + ".";
  std::vector<std::string> parts;
  const std::pair<int, const char*> kinds[] = {{occgrid::kCar, "car"},
                                               {occgrid::kTruck, "truck"},
                                               {occgrid::kPedestrian, "pedestrian"},
                                               {occgrid::kBicycle, "bicycle"}};
  for (const auto& [id, word] : kinds) {
    if (counts[id] > 0) parts.push_back(plural(counts[id], word));
  }
  if (parts.empty()) {
    c += " There are no agents around the ego car.";
  } else {
    c += " There " + std::string(parts.size() == 1 && parts[0][0] == '1' && parts[0][1] == ' ' ? "is " : "are ") +
         join_list(parts) + " around the ego car.";
  }
  if (moving_vehicles == 0) {
    c += " There are no moving vehicles.";
  } else {
    c += moving_vehicles == 1 ? " 1 vehicle is moving." : " " + std::to_string(moving_vehicles) + " vehicles are moving.";
  }
  if (walking > 0) {
    c += walking == 1 ? " 1 pedestrian is walking." : " " + std::to_string(walking) + " pedestrians are walking.";
  }
  static const char* kIntent[] = {"go straight", "turn right", "turn left", "stop"};
  c += " The ego car is about to " + std::string(kIntent[static_cast<int>(s.command)]) + ".";
  return make(s, Task::kCaption, kCaptionQuestion, c);
}

std::vector<QaPair> gen_occ_status_qa(const worldgen::SceneSample& s, int n, std::uint64_t seed) {
  if (n < 0) throw ConfigError("question count must be nonnegative");
  std::mt19937_64 rng(seed);
  const VoxelPools pools = pools_of(s);
  std::vector<QaPair> out;
  for (int i = 0; i < n; ++i) {
    bool yes = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    if (pools.free.empty()) yes = true;
    if (pools.occupied.empty()) yes = false;
    std::int64_t idx;
    if (yes) {
      const bool raised = !pools.raised.empty() && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
      idx = pick(raised ? pools.raised : pools.occupied, rng);
    } else {
      idx = pick(pools.free, rng);
    }
    const OccToken t = token_of(s.spec, idx);
    QaPair p = make(s, Task::kOccStatus, status_question(s.spec, t), yes ? "yes" : "no");
    p.anchor = t;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<QaPair> gen_occ_class_flow_qa(const worldgen::SceneSample& s, int n, std::uint64_t seed) {
  if (n < 0) throw ConfigError("question count must be nonnegative");
  std::mt19937_64 rng(seed);
  const VoxelPools pools = pools_of(s);
  std::vector<QaPair> out;
  for (int i = 0; i < n; ++i) {
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::vector<std::int64_t>* pool = &pools.free;
    if (r < 0.5) {
      pool = !pools.dynamic.empty() ? &pools.dynamic : &pools.movable;
    } else if (r < 0.8) {
      pool = &pools.static_occ;
    }
    if (pool->empty()) pool = !pools.occupied.empty() ? &pools.occupied : &pools.free;
    const std::int64_t idx = pick(*pool, rng);
    const OccToken t = token_of(s.spec, idx);
    const int label = s.occ.labels()[static_cast<std::size_t>(idx)];
    std::string answer = "free";
    if (label != occgrid::kFree) {
      const auto v = s.flow.at(t.x, t.y, t.z);
      answer = render_class_flow(s.occ.class_names()[static_cast<std::size_t>(label)], v[0], v[1]);
    }
    QaPair p = make(s, Task::kOccClassFlow, class_flow_question(s.spec, t), answer);
    p.anchor = t;
    out.push_back(std::move(p));
  }
  return out;
}

QaPair gen_action_qa(const worldgen::SceneSample& s) {
  return make(s, Task::kAction, kActionQuestion, render_action(s.command));
}

QaPair gen_traj_qa(const worldgen::SceneSample& s, int precision) {
  return make(s, Task::kTrajectory, kTrajectoryQuestion, render_trajectory(s.plan, precision));
}

// ---- parsing -----------------------------------------------------------------

namespace {

class Cursor {
 public:
  explicit Cursor(const std::string& s) : s_(s) {}
  void ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  void expect(const std::string& lit) {
    ws();
    if (s_.compare(i_, lit.size(), lit) != 0) throw ParseError("expected \"" + lit + "\"", i_);
    i_ += lit.size();
  }
  bool accept(const std::string& lit) {
    ws();
    if (s_.compare(i_, lit.size(), lit) != 0) return false;
    i_ += lit.size();
    return true;
  }
  double number() {
    ws();
    const char* begin = s_.c_str() + i_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || !std::isfinite(v)) throw ParseError("expected a number", i_);
    i_ += static_cast<std::size_t>(end - begin);
    return v;
  }
  std::string word() {
    ws();
    const std::size_t b = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_' || s_[i_] == '-')) ++i_;
    if (b == i_) throw ParseError("expected a label", i_);
    return s_.substr(b, i_ - b);
  }
  void end() {
    ws();
    if (i_ != s_.size()) throw ParseError("trailing text", i_);
  }

 private:
  const std::string& s_;
  std::size_t i_ = 0;
};

}  // namespace

bool parse_status(const std::string& text) {
  Cursor c(text);
  bool yes;
  if (c.accept("yes")) {
    yes = true;
  } else if (c.accept("no")) {
    yes = false;
  } else {
    throw ParseError("expected yes or no", 0);
  }
  c.accept(".");
  c.end();
  return yes;
}

ClassFlowAnswer parse_class_flow(const std::string& text) {
  Cursor c(text);
  ClassFlowAnswer a;
  if (c.accept("free")) {
    c.accept(".");
    c.end();
    a.free = true;
    return a;
  }
  c.expect("{");
  c.expect("label");
  c.expect(":");
  a.label = c.word();
  c.expect("}");
  c.expect(",");
  c.expect("{");
  c.expect("vx");
  c.expect(":");
  a.vx = c.number();
  c.expect(",");
  c.expect("vy");
  c.expect(":");
  a.vy = c.number();
  c.expect("}");
  c.end();
  return a;
}

worldgen::Command parse_action(const std::string& text) {
  const std::pair<const char*, worldgen::Command> forms[] = {{"Go straight", worldgen::Command::kStraight},
                                                             {"Turn left", worldgen::Command::kLeft},
                                                             {"Turn right", worldgen::Command::kRight},
                                                             {"Stop", worldgen::Command::kStop}};
  for (const auto& [lit, cmd] : forms) {
    Cursor c(text);
    if (!c.accept(lit)) continue;
    c.accept(".");
    c.end();
    return cmd;
  }
  throw ParseError("expected one of Go straight / Turn left / Turn right / Stop", 0);
}

occgrid::TrajectoryPlan parse_trajectory(const std::string& text) {
  Cursor c(text);
  c.expect("Future");
  c.expect("6-frame");
  c.expect("trajectory");
  c.expect(":");
  c.expect("[");
  occgrid::TrajectoryPlan p;
  for (int i = 0; i < occgrid::kPlanFrames; ++i) {
    if (i) c.expect(",");
    c.expect("(");
    p.waypoints[i][0] = c.number();
    c.expect(",");
    p.waypoints[i][1] = c.number();
    c.expect(")");
  }
  c.expect("]");
  c.accept(".");
  c.end();
  return p;
}

// ---- corpus ------------------------------------------------------------------

Mix Mix::parse(const std::string& text) {
  Mix m;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("mix entry \"" + item + "\" is not key=value");
    const std::string key = item.substr(0, eq);
    int value;
    try {
      std::size_t used = 0;
      value = std::stoi(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("mix value for \"" + key + "\" is not an integer");
    }
    if (value < 0) throw ConfigError("mix counts must be nonnegative");
    if (key == "caption") m.caption = value;
    else if (key == "occ") m.occ = value;
    else if (key == "flow") m.flow = value;
    else if (key == "action") m.action = value;
    else if (key == "trajectory") m.trajectory = value;
    else throw ConfigError("unknown mix key \"" + key + "\"");
  }
  return m;
}

std::string Mix::str() const {
  return "caption=" + std::to_string(caption) + ",occ=" + std::to_string(occ) + ",flow=" +
         std::to_string(flow) + ",action=" + std::to_string(action) +
         ",trajectory=" + std::to_string(trajectory);
}

int Mix::count(Task t) const {
  switch (t) {
    case Task::kCaption: return caption;
    case Task::kOccStatus: return occ;
    case Task::kOccClassFlow: return flow;
    case Task::kAction: return action;
    case Task::kTrajectory: return trajectory;
  }
  return 0;
}

std::vector<QaPair> gen_scene_qa(const worldgen::SceneSample& s, const Mix& mix, std::uint64_t seed) {
  std::vector<QaPair> out;
  for (int i = 0; i < mix.caption; ++i) out.push_back(gen_caption(s));
  for (auto& p : gen_occ_status_qa(s, mix.occ, worldgen::scene_seed(seed, 1))) out.push_back(std::move(p));
  for (auto& p : gen_occ_class_flow_qa(s, mix.flow, worldgen::scene_seed(seed, 2))) out.push_back(std::move(p));
  for (int i = 0; i < mix.action; ++i) out.push_back(gen_action_qa(s));
  for (int i = 0; i < mix.trajectory; ++i) out.push_back(gen_traj_qa(s));
  return out;
}

std::vector<QaPair> gen_corpus(const std::vector<worldgen::SceneSample>& scenes, const Mix& mix,
                               std::uint64_t seed) {
  std::vector<std::vector<QaPair>> per(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    per[i] = gen_scene_qa(scenes[i], mix, worldgen::scene_seed(seed, i));
  });
  std::vector<QaPair> out;
  for (auto& v : per) {
    for (auto& p : v) out.push_back(std::move(p));
  }
  return out;
}

std::string to_jsonl(const QaPair& p) {
  json j;
  j["scene_id"] = p.scene_id;
  j["frame"] = p.frame;
  j["task"] = task_name(p.task);
  j["question"] = p.question;
  j["answer"] = p.answer;
  json meta = json::object();
  if (p.anchor) meta["anchor"] = {p.anchor->x, p.anchor->y, p.anchor->z};
  j["meta"] = meta;
  return j.dump();
}

QaPair from_jsonl(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed QA line: ") + e.what());
  }
  try {
    QaPair p;
    p.scene_id = j.at("scene_id").get<std::string>();
    p.frame = j.at("frame").get<int>();
    p.task = task_from_name(j.at("task").get<std::string>());
    p.question = j.at("question").get<std::string>();
    p.answer = j.at("answer").get<std::string>();
    const json& meta = j.at("meta");
    if (meta.contains("anchor")) {
      const auto& a = meta["anchor"];
      p.anchor = OccToken{a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>()};
    }
    return p;
  } catch (const json::exception& e) {
    throw FormatError(std::string("QA line missing fields: ") + e.what());
  }
}

void write_corpus(const std::filesystem::path& path, const std::vector<QaPair>& pairs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  for (const auto& p : pairs) os << to_jsonl(p) << '\n';
}

std::vector<QaPair> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<QaPair> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(from_jsonl(line));
  }
  return out;
}

std::vector<std::string> template_texts(const occgrid::GridSpec& spec) {
  std::vector<std::string> t = {
      status_question(spec, {0, 0, 0}),
      class_flow_question(spec, {0, 0, 0}),
      kActionQuestion,
      kTrajectoryQuestion,
      kCaptionQuestion,
      "yes no free {label: x}, {vx: 0.0, vy: 0.0}",
      "Go straight. Turn left. Turn right. Stop.",
      "Future 6-frame trajectory: [(0.00, 0.00)].",
      "The scene shows a road in an open area lined with buildings trees barriers.",
      "There is are no agents around the ego car. There are no moving vehicles.",
      "car cars truck trucks pedestrian pedestrians bicycle bicycles and",
      "vehicle vehicles is are moving walking.",
      "The ego car is about to go straight turn right turn left stop.",
  };
  for (const auto& name : occgrid::default_class_names()) t.push_back(name);
  return t;
}

}  // namespace vla4d::qa
