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
#include "vla4d/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"

#include "vla4d/footprint.hpp"
#include "vla4d/parallel.hpp"

namespace vla4d::worldgen {

using occgrid::GridSpec;
using occgrid::OccupancyGrid;
using occgrid::OrientedRect;
using occgrid::TrajectoryPlan;
using json = nlohmann::json;

const char* command_name(Command c) {
  switch (c) {
    case Command::kStraight: return "straight";
    case Command::kRight: return "right";
    case Command::kLeft: return "left";
    case Command::kStop: return "stop";
  }
  return "straight";
}

Command command_from_name(const std::string& name) {
  if (name == "straight") return Command::kStraight;
  if (name == "right") return Command::kRight;
  if (name == "left") return Command::kLeft;
  if (name == "stop") return Command::kStop;
  throw FormatError("unknown command \"" + name + "\"");
}

Command command_from_plan(const TrajectoryPlan& plan) {
  if (plan.path_length() < kStopDisplacement) return Command::kStop;
  const double lateral = plan.waypoints[occgrid::kPlanFrames - 1][1];
  if (lateral > kTurnLateral) return Command::kLeft;
  if (lateral < -kTurnLateral) return Command::kRight;
  return Command::kStraight;
}

Difficulty difficulty_from_name(const std::string& name) {
  if (name == "easy") return Difficulty::kEasy;
  if (name == "default") return Difficulty::kDefault;
  if (name == "hard") return Difficulty::kHard;
  throw ConfigError("unknown difficulty \"" + name + "\"");
}

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 over (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(gen_); }
  int integer(int a, int b) { return std::uniform_int_distribution<int>(a, b)(gen_); }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }
  double normal(double sd) { return std::normal_distribution<double>(0.0, sd)(gen_); }

 private:
  std::mt19937_64 gen_;
};

struct EgoState {
  double x, y, yaw;
};

struct Rollout {
  TrajectoryPlan plan;
  std::vector<EgoState> path;  // every 0.1 s including t = 0
};

Rollout bicycle_rollout(double v0, double accel, double curvature) {
  Rollout r;
  double x = 0, y = 0, yaw = 0, v = v0;
  constexpr double dt = 0.05;
  r.path.push_back({0, 0, 0});
  for (int step = 1; step <= 60; ++step) {
    v = std::max(0.0, v + accel * dt);
    yaw += v * curvature * dt;
    x += v * std::cos(yaw) * dt;
    y += v * std::sin(yaw) * dt;
    if (step % 2 == 0) r.path.push_back({x, y, yaw});
    if (step % 10 == 0) r.plan.waypoints[step / 10 - 1] = {x, y};
  }
  r.plan.ego_status = occgrid::EgoStatus{v0, v0 * curvature, accel};
  return r;
}

Rollout plan_ego(Scenario sc, Rng& rng) {
  Rollout r;
  const Command want = sc == Scenario::kStop    ? Command::kStop
                       : sc == Scenario::kLeft  ? Command::kLeft
                       : sc == Scenario::kRight ? Command::kRight
                                                : Command::kStraight;
  for (int attempt = 0; attempt < 64; ++attempt) {
    double v0 = 0, accel = 0, curv = 0;
    switch (sc) {
      case Scenario::kStop:
        v0 = rng.uniform(0.0, 0.3);
        accel = -0.4;
        break;
      case Scenario::kLeft:
      case Scenario::kRight: {
        curv = rng.uniform(0.05, 0.15);
        v0 = std::min(rng.uniform(3.0, 7.0), 1.6 / (3.0 * curv));
        accel = rng.uniform(-0.5, 0.5);
        if (sc == Scenario::kRight) curv = -curv;
        break;
      }
      default:
        v0 = rng.uniform(3.0, 9.0);
        accel = rng.uniform(-0.6, 0.6);
        curv = rng.uniform(-0.002, 0.002);
        break;
    }
    r = bicycle_rollout(v0, accel, curv);
    if (command_from_plan(r.plan) == want) return r;
  }
  return r;
}

struct Layout {
  const GridSpec& spec;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> road;      // per column
  std::vector<std::uint8_t> corridor;  // per column

  explicit Layout(const GridSpec& s)
      : spec(s),
        labels(static_cast<std::size_t>(s.voxel_count()), occgrid::kFree),
        road(static_cast<std::size_t>(s.nx) * s.ny, 0),
        corridor(static_cast<std::size_t>(s.nx) * s.ny, 0) {}

  std::size_t col(int x, int y) const { return static_cast<std::size_t>(x) * spec.ny + y; }
  double cx(int x) const { return spec.x_min + (x + 0.5) * spec.voxel_size; }
  double cy(int y) const { return spec.y_min + (y + 0.5) * spec.voxel_size; }
  bool blocked(int x, int y) const { return road[col(x, y)] || corridor[col(x, y)]; }
  bool has_structure(int x, int y) const {
    for (int z = 1; z < spec.nz; ++z) {
      if (labels[spec.index(x, y, z)] != occgrid::kFree) return true;
    }
    return false;
  }

  // Axis-aligned static box over column centres in [x0,x1] x [y0,y1].
  void place_box(double x0, double x1, double y0, double y1, int z0, int z1, std::uint8_t cls) {
    for (int x = 0; x < spec.nx; ++x) {
      if (cx(x) < x0 || cx(x) > x1) continue;
      for (int y = 0; y < spec.ny; ++y) {
        if (cy(y) < y0 || cy(y) > y1 || blocked(x, y)) continue;
        for (int z = z0; z <= std::min(z1, spec.nz - 1); ++z) labels[spec.index(x, y, z)] = cls;
      }
    }
  }
};

bool point_in_rect(const OrientedRect& r, double px, double py) {
  const double c = std::cos(r.yaw), s = std::sin(r.yaw);
  const double dx = px - r.cx, dy = py - r.cy;
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  return std::abs(u) <= 0.5 * r.length && std::abs(v) <= 0.5 * r.width;
}

// Columns an agent occupies: centres inside the rectangle, or the column
// under its centre when the footprint is smaller than a voxel.
std::vector<std::array<int, 2>> agent_columns(const GridSpec& spec, const OrientedRect& r) {
  std::vector<std::array<int, 2>> out;
  for (const auto& c : occgrid::columns_under(spec, r)) {
    const double px = spec.x_min + (c[0] + 0.5) * spec.voxel_size;
    const double py = spec.y_min + (c[1] + 0.5) * spec.voxel_size;
    if (point_in_rect(r, px, py)) out.push_back(c);
  }
  if (out.empty()) {
    const int x = static_cast<int>(std::floor((r.cx - spec.x_min) / spec.voxel_size));
    const int y = static_cast<int>(std::floor((r.cy - spec.y_min) / spec.voxel_size));
    if (x >= 0 && y >= 0 && x < spec.nx && y < spec.ny) out.push_back({x, y});
  }
  return out;
}

OrientedRect inflate(OrientedRect r, double m) {
  r.length += 2 * m;
  r.width += 2 * m;
  return r;
}

OrientedRect ego_rect(const EgoState& s, double margin) {
  return {s.x, s.y, occgrid::kEgoLength + 2 * margin, occgrid::kEgoWidth + 2 * margin, s.yaw};
}

struct AgentTemplate {
  int cls;
  double length, width;
  int height;
  double vmin, vmax;
};

AgentTemplate draw_template(Rng& rng) {
  const double r = rng.uniform(0.0, 1.0);
  if (r < 0.55) return {occgrid::kCar, 4.4, 1.9, 2, 2.0, 10.0};
  if (r < 0.65) return {occgrid::kTruck, 7.5, 2.6, 4, 2.0, 8.0};
  if (r < 0.85) return {occgrid::kPedestrian, 1.0, 1.0, 2, 0.5, 1.5};
  return {occgrid::kBicycle, 1.8, 0.9, 2, 2.0, 5.0};
}

}  // namespace

OccupancyGrid render_frame(const OccupancyGrid& static_layout, const std::vector<Agent>& agents,
                           double t) {
  const GridSpec& spec = static_layout.spec();
  std::vector<std::uint8_t> labels = static_layout.labels();
  for (const Agent& a : agents) {
    for (const auto& c : agent_columns(spec, a.rect_at(t))) {
      for (int z = 1; z <= std::min(a.height_bins, spec.nz - 1); ++z) {
        labels[spec.index(c[0], c[1], z)] = static_cast<std::uint8_t>(a.class_id);
      }
    }
  }
  return OccupancyGrid(spec, std::move(labels), static_layout.class_names());
}

SceneSample generate_scene(std::uint64_t seed, const GridSpec& spec, Difficulty difficulty,
                           Scenario scenario) {
  spec.validate();
  Rng rng(seed);
  if (scenario == Scenario::kAny) {
    const double r = rng.uniform(0.0, 1.0);
    scenario = r < 0.4 ? Scenario::kStraight
               : r < 0.6 ? Scenario::kLeft
               : r < 0.8 ? Scenario::kRight
                         : Scenario::kStop;
  }
  const Rollout ego = plan_ego(scenario, rng);

  Layout L(spec);
  const double road_half = rng.uniform(3.5, 5.5);
  const bool turning = scenario == Scenario::kLeft || scenario == Scenario::kRight;
  const bool cross = turning || rng.chance(0.3);
  const double cross_x = turning ? ego.plan.waypoints[3][0]
                                 : rng.uniform(0.2 * spec.x_max(), 0.8 * spec.x_max());
  const double cross_half = rng.uniform(3.5, 5.0);
  for (int x = 0; x < spec.nx; ++x) {
    for (int y = 0; y < spec.ny; ++y) {
      const bool on_road = std::abs(L.cy(y)) <= road_half ||
                           (cross && std::abs(L.cx(x) - cross_x) <= cross_half);
      L.road[L.col(x, y)] = on_road;
    }
  }
  for (const EgoState& s : ego.path) {
    for (const auto& c : occgrid::columns_under(spec, ego_rect(s, 0.6))) {
      L.corridor[L.col(c[0], c[1])] = 1;
    }
  }
  for (int x = 0; x < spec.nx; ++x) {
    for (int y = 0; y < spec.ny; ++y) {
      L.labels[spec.index(x, y, 0)] = L.blocked(x, y) ? occgrid::kRoad : occgrid::kVegetation;
    }
  }

  const int extra = difficulty == Difficulty::kHard ? 2 : 0;
  const double xmax = spec.x_max(), xmin = spec.x_min, ymax = spec.y_max();
  const int top = spec.nz - 1;
  const int buildings = rng.integer(2, 6) + extra;
  for (int i = 0; i < buildings; ++i) {
    const double lx = rng.uniform(4.0, 10.0), ly = rng.uniform(4.0, 8.0);
    const double bx = rng.uniform(xmin, xmax);
    const double side = rng.chance(0.5) ? 1.0 : -1.0;
    const double by = side * rng.uniform(road_half + 1.5 + 0.5 * ly, std::max(road_half + 2.0 + 0.5 * ly, ymax));
    const int h = rng.integer(std::min(3, top), std::max(std::min(3, top), top));
    L.place_box(bx - lx / 2, bx + lx / 2, by - ly / 2, by + ly / 2, 0, h, occgrid::kBuilding);
  }
  const int trees = rng.integer(3, 10);
  for (int i = 0; i < trees; ++i) {
    const double s = rng.chance(0.5) ? 1.0 : 2.0;
    const double tx = rng.uniform(xmin, xmax);
    const double side = rng.chance(0.5) ? 1.0 : -1.0;
    const double ty = side * rng.uniform(road_half + 1.0, std::max(road_half + 1.5, ymax));
    const int h = rng.integer(std::min(2, top), std::min(5, top));
    L.place_box(tx - s / 2, tx + s / 2, ty - s / 2, ty + s / 2, 1, h, occgrid::kVegetation);
  }
  const int barriers = rng.integer(0, 3) + extra;
  for (int i = 0; i < barriers; ++i) {
    const double len = rng.uniform(3.0, 8.0);
    const double bx = rng.uniform(xmin, xmax);
    const double side = rng.chance(0.5) ? 1.0 : -1.0;
    const double by = side * (road_half + 0.5 + 0.5 * spec.voxel_size);
    L.place_box(bx - len / 2, bx + len / 2, by - 0.5 * spec.voxel_size,
                by + 0.5 * spec.voxel_size, 1, 1, occgrid::kBarrier);
  }

  // Agents
  int lo = 2, hi = 10;
  if (difficulty == Difficulty::kEasy) hi = 4;
  if (difficulty == Difficulty::kHard) lo = 6;
  const int n_agents = rng.integer(lo, hi);
  std::vector<Agent> agents;
  for (int i = 0; i < n_agents; ++i) {
    const AgentTemplate tpl = draw_template(rng);
    for (int attempt = 0; attempt < 60; ++attempt) {
      Agent a;
      a.class_id = tpl.cls;
      a.length = tpl.length;
      a.width = tpl.width;
      a.height_bins = std::min(tpl.height, top);
      const bool vehicle = tpl.cls == occgrid::kCar || tpl.cls == occgrid::kTruck ||
                           tpl.cls == occgrid::kBicycle;
      if (vehicle) {
        if (cross && rng.chance(0.3)) {
          a.yaw = rng.chance(0.5) ? std::numbers::pi / 2 : -std::numbers::pi / 2;
          a.cx = cross_x + rng.uniform(-cross_half + 0.5 * a.width, cross_half - 0.5 * a.width);
          a.cy = rng.uniform(spec.y_min + 2, ymax - 2);
        } else {
          a.yaw = rng.chance(0.5) ? 0.0 : std::numbers::pi;
          a.cx = rng.uniform(xmin + 2, xmax - 2);
          a.cy = rng.uniform(-road_half + 0.5 * a.width, road_half - 0.5 * a.width);
        }
      } else {
        a.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
        a.cx = rng.uniform(xmin + 1, xmax - 1);
        const double side = rng.chance(0.5) ? 1.0 : -1.0;
        a.cy = side * rng.uniform(road_half, road_half + 4.0);
      }
      if (rng.chance(0.6)) {
        const double speed = rng.uniform(tpl.vmin, tpl.vmax);
        a.vx = speed * std::cos(a.yaw);
        a.vy = speed * std::sin(a.yaw);
      }
      if (a.cx <= xmin || a.cx >= xmax || a.cy <= spec.y_min || a.cy >= ymax) continue;

      bool ok = true;
      for (const auto& c : agent_columns(spec, a.rect_at(0))) {
        if (L.has_structure(c[0], c[1])) ok = false;
      }
      for (int k = 0; ok && k <= occgrid::kPlanFrames; ++k) {
        const double t = k * occgrid::kFrameInterval;
        for (const Agent& b : agents) {
          if (occgrid::rects_overlap(inflate(a.rect_at(t), 0.3), b.rect_at(t))) ok = false;
        }
      }
      for (std::size_t s = 0; ok && s < ego.path.size(); ++s) {
        const double t = 0.1 * static_cast<double>(s);
        const OrientedRect er = ego_rect(ego.path[s], 0.6);
        if (!a.moving()) {
          if (occgrid::rects_overlap(inflate(a.rect_at(0), 1.0), er)) ok = false;
        } else if (occgrid::rects_overlap(inflate(a.rect_at(t), 1.0), er)) {
          ok = false;
        }
      }
      if (ok) {
        agents.push_back(a);
        break;
      }
    }
  }

  const OccupancyGrid static_grid(spec, L.labels);
  std::vector<OccupancyGrid> future;
  // Belt and braces: drop any agent the metric would count as a collision.
  for (bool clean = false; !clean;) {
    clean = true;
    future.clear();
    for (int k = 1; k <= occgrid::kPlanFrames; ++k) {
      future.push_back(render_frame(static_grid, agents, k * occgrid::kFrameInterval));
    }
    for (int k = 0; k < occgrid::kPlanFrames && clean; ++k) {
      const OrientedRect er = occgrid::ego_rect_at(ego.plan, k);
      for (std::size_t i = 0; i < agents.size(); ++i) {
        const double t = (k + 1) * occgrid::kFrameInterval;
        bool hit = false;
        for (const auto& c : agent_columns(spec, agents[i].rect_at(t))) {
          if (occgrid::rects_overlap(er, occgrid::column_rect(spec, c[0], c[1]))) hit = true;
        }
        if (hit) {
          agents.erase(agents.begin() + static_cast<std::ptrdiff_t>(i));
          clean = false;
          break;
        }
      }
    }
  }

  OccupancyGrid occ = render_frame(static_grid, agents, 0.0);
  std::vector<double> velocity(2 * static_cast<std::size_t>(spec.voxel_count()), 0.0);
  std::vector<std::uint8_t> dynamic(static_cast<std::size_t>(spec.voxel_count()), 0);
  for (const Agent& a : agents) {
    if (!a.moving()) continue;
    for (const auto& c : agent_columns(spec, a.rect_at(0))) {
      for (int z = 1; z <= a.height_bins; ++z) {
        const auto idx = spec.index(c[0], c[1], z);
        if (occ.labels()[idx] != a.class_id) continue;
        velocity[2 * idx] = a.vx;
        velocity[2 * idx + 1] = a.vy;
        dynamic[idx] = 1;
      }
    }
  }

  static constexpr double kIntensity[] = {0.0, 0.9, 0.8, 0.7, 0.6, 0.2, 0.5, 0.35, 0.75};
  std::vector<double> sensor(2 * static_cast<std::size_t>(spec.nx) * spec.ny, 0.0);
  const double noise = difficulty == Difficulty::kEasy ? 0.02 : kSensorNoise;
  for (int x = 0; x < spec.nx; ++x) {
    for (int y = 0; y < spec.ny; ++y) {
      int top_z = -1, top_cls = 0;
      for (int z = spec.nz - 1; z >= 0; --z) {
        const int l = occ.at(x, y, z);
        if (l != occgrid::kFree) {
          top_z = z;
          top_cls = l;
          break;
        }
      }
      const std::size_t c = static_cast<std::size_t>(x) * spec.ny + y;
      const double intensity = top_cls < 9 ? kIntensity[top_cls] : 0.5;
      sensor[c] = static_cast<double>(top_z + 1) / spec.nz + rng.normal(noise);
      sensor[static_cast<std::size_t>(spec.nx) * spec.ny + c] = intensity + rng.normal(noise);
    }
  }

  SceneSample s{
      .scene_id = "",
      .rng_seed = seed,
      .spec = spec,
      .sensor = std::move(sensor),
      .occ = std::move(occ),
      .flow = occgrid::FlowField(spec, std::move(velocity), std::move(dynamic)),
      .plan = ego.plan,
      .command = command_from_plan(ego.plan),
      .agents = std::move(agents),
      .future = std::move(future),
  };
  return s;
}

// ---- persistence -------------------------------------------------------------

namespace {

std::vector<std::uint32_t> dims3(const GridSpec& s) {
  return {static_cast<std::uint32_t>(s.nx), static_cast<std::uint32_t>(s.ny),
          static_cast<std::uint32_t>(s.nz)};
}

json spec_to_json(const GridSpec& s) {
  return {{"nx", s.nx}, {"ny", s.ny}, {"nz", s.nz}, {"x_min", s.x_min}, {"y_min", s.y_min},
          {"z_min", s.z_min}, {"voxel_size", s.voxel_size}, {"dz", s.dz}};
}

GridSpec spec_from_json(const json& j) {
  GridSpec s;
  s.nx = j.at("nx").get<int>();
  s.ny = j.at("ny").get<int>();
  s.nz = j.at("nz").get<int>();
  s.x_min = j.at("x_min").get<double>();
  s.y_min = j.at("y_min").get<double>();
  s.z_min = j.at("z_min").get<double>();
  s.voxel_size = j.at("voxel_size").get<double>();
  s.dz = j.at("dz").get<double>();
  s.validate();
  return s;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
}

json read_json(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace

void save_scene(const std::filesystem::path& dir, const SceneSample& s) {
  std::filesystem::create_directories(dir);
  const GridSpec& spec = s.spec;
  occgrid::save_grid(dir / "occ.bin", s.occ);
  occgrid::save_flow(dir / "flow.bin", s.flow);
  occgrid::write_f64(dir / "sensor.bin",
                     {2u, static_cast<std::uint32_t>(spec.nx), static_cast<std::uint32_t>(spec.ny)},
                     s.sensor);
  std::vector<double> plan;
  for (const auto& w : s.plan.waypoints) plan.insert(plan.end(), w.begin(), w.end());
  occgrid::write_f64(dir / "plan.bin", {6u, 2u}, plan);
  std::vector<std::uint8_t> future;
  for (const auto& g : s.future) future.insert(future.end(), g.labels().begin(), g.labels().end());
  auto fdims = dims3(spec);
  fdims.insert(fdims.begin(), static_cast<std::uint32_t>(s.future.size()));
  occgrid::write_u8(dir / "occ_future.bin", fdims, future);

  json meta;
  meta["scene_id"] = s.scene_id;
  meta["seed"] = s.rng_seed;
  meta["command"] = command_name(s.command);
  if (s.plan.ego_status) {
    meta["ego_status"] = {{"speed", s.plan.ego_status->speed},
                          {"yaw_rate", s.plan.ego_status->yaw_rate},
                          {"accel", s.plan.ego_status->accel}};
  }
  json agents = json::array();
  for (const Agent& a : s.agents) {
    agents.push_back({{"class_id", a.class_id}, {"cx", a.cx}, {"cy", a.cy}, {"length", a.length},
                      {"width", a.width}, {"height_bins", a.height_bins}, {"yaw", a.yaw},
                      {"vx", a.vx}, {"vy", a.vy}});
  }
  meta["agents"] = agents;
  write_text(dir / "scene.json", meta.dump(2) + "\n");
}

SceneSample load_scene(const std::filesystem::path& dir, const GridSpec& spec,
                       const std::vector<std::string>& class_names) {
  const json meta = read_json(dir / "scene.json");
  SceneSample s{
      .scene_id = meta.at("scene_id").get<std::string>(),
      .rng_seed = meta.at("seed").get<std::uint64_t>(),
      .spec = spec,
      .sensor = occgrid::read_f64(dir / "sensor.bin", {2u, static_cast<std::uint32_t>(spec.nx),
                                                       static_cast<std::uint32_t>(spec.ny)}),
      .occ = occgrid::load_grid(dir / "occ.bin", spec, class_names),
      .flow = occgrid::load_flow(dir / "flow.bin", spec),
      .plan = {},
      .command = command_from_name(meta.at("command").get<std::string>()),
      .agents = {},
      .future = {},
  };
  const auto plan = occgrid::read_f64(dir / "plan.bin", {6u, 2u});
  for (int i = 0; i < occgrid::kPlanFrames; ++i) s.plan.waypoints[i] = {plan[2 * i], plan[2 * i + 1]};
  if (meta.contains("ego_status")) {
    const auto& e = meta["ego_status"];
    s.plan.ego_status = occgrid::EgoStatus{e.at("speed").get<double>(), e.at("yaw_rate").get<double>(),
                                           e.at("accel").get<double>()};
  }
  for (const auto& a : meta.at("agents")) {
    s.agents.push_back(Agent{a.at("class_id").get<int>(), a.at("cx").get<double>(),
                             a.at("cy").get<double>(), a.at("length").get<double>(),
                             a.at("width").get<double>(), a.at("height_bins").get<int>(),
                             a.at("yaw").get<double>(), a.at("vx").get<double>(),
                             a.at("vy").get<double>()});
  }
  auto fdims = dims3(spec);
  fdims.insert(fdims.begin(), static_cast<std::uint32_t>(occgrid::kPlanFrames));
  const auto future = occgrid::read_u8(dir / "occ_future.bin", fdims);
  const auto per = static_cast<std::size_t>(spec.voxel_count());
  for (int k = 0; k < occgrid::kPlanFrames; ++k) {
    s.future.emplace_back(spec, std::vector<std::uint8_t>(future.begin() + k * per,
                                                          future.begin() + (k + 1) * per),
                          class_names);
  }
  s.flow.check_against(s.occ);
  return s;
}

std::vector<std::string> SceneSetManifest::ids(const std::string& split) const {
  std::vector<std::string> out;
  for (const auto& e : scenes) {
    if (split.empty() || e.split == split) out.push_back(e.id);
  }
  return out;
}

void write_manifest(const std::filesystem::path& dir, const SceneSetManifest& m) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "vla4d-scenes";
  j["version"] = 1;
  j["grid"] = spec_to_json(m.spec);
  j["class_names"] = m.class_names;
  j["frame_rate_hz"] = m.frame_rate_hz;
  j["seed"] = m.seed;
  json scenes = json::array();
  for (const auto& e : m.scenes) scenes.push_back({{"id", e.id}, {"split", e.split}});
  j["scenes"] = scenes;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

SceneSetManifest read_manifest(const std::filesystem::path& dir) {
  const json j = read_json(dir / "manifest.json");
  if (j.value("format", "") != "vla4d-scenes") throw FormatError("not a scene container: " + dir.string());
  if (j.value("version", 0) != 1) throw FormatError("unsupported scene container version");
  SceneSetManifest m;
  m.spec = spec_from_json(j.at("grid"));
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.frame_rate_hz = j.at("frame_rate_hz").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("scenes")) {
    m.scenes.push_back({e.at("id").get<std::string>(), e.at("split").get<std::string>()});
  }
  return m;
}

std::filesystem::path scene_dir(const std::filesystem::path& root, const SceneEntry& e) {
  return root / e.split / e.id;
}

SceneSetManifest generate_split(int n_scenes, std::uint64_t seed, const GridSpec& spec,
                                const std::filesystem::path& out, Difficulty difficulty) {
  if (n_scenes < 2) throw ConfigError("a split needs at least 2 scenes");
  const int n_val = std::max(1, static_cast<int>(std::lround(0.15 * n_scenes)));
  std::vector<int> order(n_scenes);
  for (int i = 0; i < n_scenes; ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(seed ^ 0x5EEDu);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  std::vector<std::string> split(n_scenes, "train");
  for (int i = 0; i < n_val; ++i) split[order[i]] = "val";

  SceneSetManifest m;
  m.spec = spec;
  m.class_names = occgrid::default_class_names();
  m.seed = seed;
  for (int i = 0; i < n_scenes; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene-%04d", i);
    m.scenes.push_back({id, split[i]});
  }
  parallel_for(static_cast<std::size_t>(n_scenes), [&](std::size_t i) {
    SceneSample s = generate_scene(scene_seed(seed, i), spec, difficulty);
    s.scene_id = m.scenes[i].id;
    save_scene(scene_dir(out, m.scenes[i]), s);
  });
  write_manifest(out, m);
  return m;
}

}  // namespace vla4d::worldgen
