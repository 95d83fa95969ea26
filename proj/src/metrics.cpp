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
#include "vla4d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

#include "vla4d/footprint.hpp"
#include "vla4d/parallel.hpp"

namespace vla4d::metrics {

using occgrid::GridSpec;
using occgrid::OccupancyGrid;

std::vector<Ray> ray_fan(const GridSpec& spec, int azimuths, int elevations) {
  if (azimuths < 1 || elevations < 1) throw ConfigError("ray fan needs at least one ray");
  constexpr double kLow = -30.67, kHigh = 10.67;
  const double deg = std::numbers::pi / 180.0;
  const std::array<double, 3> origin = {0.0, 0.0, spec.z_min + kSensorHeight};
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(azimuths) * elevations);
  for (int e = 0; e < elevations; ++e) {
    const double el = (elevations == 1 ? 0.0 : kLow + (kHigh - kLow) * e / (elevations - 1)) * deg;
    for (int a = 0; a < azimuths; ++a) {
      const double az = 2.0 * std::numbers::pi * a / azimuths;
      rays.push_back({origin, {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)}});
    }
  }
  return rays;
}

RayHit cast_ray(const OccupancyGrid& grid, const std::array<double, 3>& o,
                const std::array<double, 3>& d) {
  const GridSpec& s = grid.spec();
  const double lo[3] = {s.x_min, s.y_min, s.z_min};
  const double size[3] = {s.voxel_size, s.voxel_size, s.dz};
  const int n[3] = {s.nx, s.ny, s.nz};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  double t0 = 0.0, t1 = kInf;
  for (int a = 0; a < 3; ++a) {
    const double hi = lo[a] + n[a] * size[a];
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] >= hi) return {};
      continue;
    }
    const double ta = (lo[a] - o[a]) / d[a], tb = (hi - o[a]) / d[a];
    t0 = std::max(t0, std::min(ta, tb));
    t1 = std::min(t1, std::max(ta, tb));
  }
  if (!(t0 < t1)) return {};

  int idx[3], step[3];
  double t_max[3], t_delta[3];
  for (int a = 0; a < 3; ++a) {
    const double p = o[a] + t0 * d[a];
    idx[a] = std::clamp(static_cast<int>(std::floor((p - lo[a]) / size[a])), 0, n[a] - 1);
    if (d[a] > 0) {
      step[a] = 1;
      t_max[a] = (lo[a] + (idx[a] + 1) * size[a] - o[a]) / d[a];
      t_delta[a] = size[a] / d[a];
    } else if (d[a] < 0) {
      step[a] = -1;
      t_max[a] = (lo[a] + idx[a] * size[a] - o[a]) / d[a];
      t_delta[a] = -size[a] / d[a];
    } else {
      step[a] = 0;
      t_max[a] = kInf;
      t_delta[a] = kInf;
    }
  }
  double t = t0;
  while (true) {
    const int cls = grid.at(idx[0], idx[1], idx[2]);
    if (cls != occgrid::kFree) return {true, t, cls, {idx[0], idx[1], idx[2]}};
    int a = 0;
    if (t_max[1] < t_max[a]) a = 1;
    if (t_max[2] < t_max[a]) a = 2;
    t = t_max[a];
    idx[a] += step[a];
    if (idx[a] < 0 || idx[a] >= n[a]) return {};
    t_max[a] += t_delta[a];
  }
}

RayCounts ray_counts(const OccupancyGrid& pred, const OccupancyGrid& gt, const std::vector<Ray>& rays,
                     double threshold) {
  if (!(pred.spec() == gt.spec())) throw SpecMismatch("ray_iou: prediction and ground truth grids differ");
  RayCounts c;
  for (const Ray& r : rays) {
    const RayHit p = cast_ray(pred, r.origin, r.dir);
    const RayHit g = cast_ray(gt, r.origin, r.dir);
    if (!p.hit && !g.hit) continue;
    if (p.hit && g.hit && p.cls == g.cls && std::abs(p.depth - g.depth) <= threshold) {
      ++c.tp;
      continue;
    }
    if (p.hit) ++c.fp;
    if (g.hit) ++c.fn;
  }
  return c;
}

double ray_iou(const OccupancyGrid& pred, const OccupancyGrid& gt, const std::vector<Ray>& rays,
               double threshold) {
  return ray_counts(pred, gt, rays, threshold).iou();
}

RayIou ray_iou_multi(const std::vector<const OccupancyGrid*>& preds,
                     const std::vector<const OccupancyGrid*>& gts, const std::vector<Ray>& rays) {
  if (preds.size() != gts.size()) throw ShapeError("ray_iou: prediction and ground truth counts differ");
  constexpr double kThresholds[3] = {1.0, 2.0, 4.0};
  std::vector<std::array<RayCounts, 3>> per(preds.size());
  parallel_for(preds.size(), [&](std::size_t i) {
    if (!(preds[i]->spec() == gts[i]->spec())) throw SpecMismatch("ray_iou: grids differ");
    for (const Ray& r : rays) {
      const RayHit p = cast_ray(*preds[i], r.origin, r.dir);
      const RayHit g = cast_ray(*gts[i], r.origin, r.dir);
      if (!p.hit && !g.hit) continue;
      for (int k = 0; k < 3; ++k) {
        RayCounts& c = per[i][k];
        if (p.hit && g.hit && p.cls == g.cls && std::abs(p.depth - g.depth) <= kThresholds[k]) {
          ++c.tp;
          continue;
        }
        if (p.hit) ++c.fp;
        if (g.hit) ++c.fn;
      }
    }
  });
  std::array<RayCounts, 3> total{};
  for (const auto& c : per) {
    for (int k = 0; k < 3; ++k) {
      total[k].tp += c[k].tp;
      total[k].fp += c[k].fp;
      total[k].fn += c[k].fn;
    }
  }
  RayIou r{total[0].iou(), total[1].iou(), total[2].iou(), 0.0};
  r.mean = (r.at1 + r.at2 + r.at4) / 3.0;
  return r;
}

void MaveAccumulator::add(const std::vector<double>& pred, const occgrid::FlowField& gt,
                          const OccupancyGrid& gt_occ) {
  const auto n = static_cast<std::size_t>(gt.spec().voxel_count());
  if (pred.size() != 2 * n || gt_occ.labels().size() != n) throw ShapeError("mave: shape mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const int l = gt_occ.labels()[i];
    if (!gt.dynamic_mask()[i] || !occgrid::is_movable(l)) continue;
    const double ex = pred[2 * i] - gt.velocity()[2 * i];
    const double ey = pred[2 * i + 1] - gt.velocity()[2 * i + 1];
    add_error(gt_occ.class_names()[static_cast<std::size_t>(l)], std::hypot(ex, ey));
  }
}

void MaveAccumulator::add_error(const std::string& cls, double err) {
  auto& [sum, count] = sums_[cls];
  sum += err;
  ++count;
}

Mave MaveAccumulator::result() const {
  Mave m;
  for (const auto& [cls, sc] : sums_) m.per_class[cls] = sc.first / static_cast<double>(sc.second);
  double total = 0;
  for (const auto& [cls, v] : m.per_class) total += v;
  m.mean = m.per_class.empty() ? 0.0 : total / static_cast<double>(m.per_class.size());
  return m;
}

Mave mave(const std::vector<double>& pred, const occgrid::FlowField& gt, const OccupancyGrid& gt_occ) {
  MaveAccumulator acc;
  acc.add(pred, gt, gt_occ);
  return acc.result();
}

double occ_score(double rayiou_mean, double mave_value) {
  return 100.0 * (0.9 * rayiou_mean + 0.1 * std::max(0.0, 1.0 - mave_value));
}

PlanL2 plan_l2(const occgrid::TrajectoryPlan& pred, const occgrid::TrajectoryPlan& gt) {
  auto err = [&](int f) {
    return std::hypot(pred.waypoints[f][0] - gt.waypoints[f][0], pred.waypoints[f][1] - gt.waypoints[f][1]);
  };
  PlanL2 r{err(1), err(3), err(5), 0.0};
  r.avg = (r.at1 + r.at2 + r.at3) / 3.0;
  return r;
}

std::array<bool, occgrid::kPlanFrames> collisions(const occgrid::TrajectoryPlan& pred,
                                                  const std::vector<OccupancyGrid>& future,
                                                  bool all_obstacles) {
  if (future.size() != static_cast<std::size_t>(occgrid::kPlanFrames)) {
    throw ShapeError("collision check needs one grid per future frame");
  }
  std::array<bool, occgrid::kPlanFrames> out{};
  for (int k = 0; k < occgrid::kPlanFrames; ++k) {
    const OccupancyGrid& g = future[static_cast<std::size_t>(k)];
    const GridSpec& s = g.spec();
    const occgrid::OrientedRect ego = occgrid::ego_rect_at(pred, k);
    for (const auto& c : occgrid::columns_under(s, ego)) {
      for (int z = 0; z < s.nz && !out[k]; ++z) {
        const int l = g.at(c[0], c[1], z);
        const bool obstacle = occgrid::is_movable(l) || l == occgrid::kBarrier ||
                              (all_obstacles && z > 0 && l != occgrid::kFree);
        out[k] = obstacle;
      }
      if (out[k]) break;
    }
  }
  return out;
}

void PlanAccumulator::add(const occgrid::TrajectoryPlan& pred, const occgrid::TrajectoryPlan& gt,
                          const std::vector<OccupancyGrid>* future, bool all_obstacles) {
  const PlanL2 e = plan_l2(pred, gt);
  l2_[0] += e.at1;
  l2_[1] += e.at2;
  l2_[2] += e.at3;
  ++n_;
  if (future) {
    const auto c = collisions(pred, *future, all_obstacles);
    col_[0] += c[1];
    col_[1] += c[3];
    col_[2] += c[5];
    ++n_col_;
  }
}

void PlanAccumulator::add_worst_case() {
  for (double& v : l2_) v += kWorstPlanL2;
  for (double& v : col_) v += 1.0;
  ++n_;
  ++n_col_;
}

PlanL2 PlanAccumulator::l2() const {
  if (n_ == 0) return {};
  PlanL2 r{l2_[0] / n_, l2_[1] / n_, l2_[2] / n_, 0.0};
  r.avg = (r.at1 + r.at2 + r.at3) / 3.0;
  return r;
}

Collision PlanAccumulator::collision() const {
  if (n_col_ == 0) return {};
  Collision r{col_[0] / n_col_, col_[1] / n_col_, col_[2] / n_col_, 0.0};
  r.avg = (r.at1 + r.at2 + r.at3) / 3.0;
  return r;
}

QaScores qa_accuracy(const std::vector<qa::QaPair>& refs, const std::vector<std::string>& preds,
                     const std::map<std::string, const worldgen::SceneSample*>* scenes) {
  if (refs.size() != preds.size()) throw ShapeError("qa_accuracy: reference and prediction counts differ");
  QaScores s;
  std::map<std::string, long> correct;
  MaveAccumulator text_mave;
  PlanAccumulator plans;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const qa::QaPair& r = refs[i];
    const std::string& p = preds[i];
    switch (r.task) {
      case qa::Task::kOccStatus: {
        ++s.count["occ_status"];
        try {
          correct["occ_status"] += qa::parse_status(p) == qa::parse_status(r.answer);
        } catch (const ParseError&) {
          ++s.unparseable;
        }
        break;
      }
      case qa::Task::kOccClassFlow: {
        ++s.count["occ_class"];
        const qa::ClassFlowAnswer ra = qa::parse_class_flow(r.answer);
        try {
          const qa::ClassFlowAnswer pa = qa::parse_class_flow(p);
          correct["occ_class"] += pa.free == ra.free && pa.label == ra.label;
          if (!ra.free) text_mave.add_error(ra.label, pa.free ? std::hypot(ra.vx, ra.vy)
                                                              : std::hypot(pa.vx - ra.vx, pa.vy - ra.vy));
        } catch (const ParseError&) {
          ++s.unparseable;
          if (!ra.free) text_mave.add_error(ra.label, kWorstVelocityError);
        }
        break;
      }
      case qa::Task::kAction: {
        ++s.count["action"];
        try {
          correct["action"] += qa::parse_action(p) == qa::parse_action(r.answer);
        } catch (const ParseError&) {
          ++s.unparseable;
        }
        break;
      }
      case qa::Task::kTrajectory: {
        ++s.count["trajectory"];
        const occgrid::TrajectoryPlan gt = qa::parse_trajectory(r.answer);
        const std::vector<OccupancyGrid>* future = nullptr;
        if (scenes) {
          auto it = scenes->find(r.scene_id);
          if (it != scenes->end()) future = &it->second->future;
        }
        try {
          plans.add(qa::parse_trajectory(p), gt, future);
          correct["trajectory"] += p == r.answer;
        } catch (const ParseError&) {
          ++s.unparseable;
          plans.add_worst_case();
        }
        break;
      }
      case qa::Task::kCaption: {
        ++s.count["caption"];
        correct["caption"] += p == r.answer;
        break;
      }
    }
  }
  double sum = 0;
  int parts = 0;
  for (const auto& [task, n] : s.count) {
    s.accuracy[task] = n ? static_cast<double>(correct[task]) / n : 0.0;
    if (task == "occ_status" || task == "occ_class" || task == "action") {
      sum += s.accuracy[task];
      ++parts;
    }
  }
  s.overall = parts ? sum / parts : 0.0;
  s.text_mave = text_mave.result().mean;
  s.text_l2 = plans.l2();
  s.text_collision = plans.collision();
  return s;
}

double voxel_accuracy(const OccupancyGrid& pred, const OccupancyGrid& gt) {
  if (!(pred.spec() == gt.spec())) throw SpecMismatch("voxel_accuracy: grids differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.labels().size(); ++i) hit += pred.labels()[i] == gt.labels()[i];
  return gt.labels().empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(gt.labels().size());
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["scenes"] = scenes;
  j["rayiou"] = {{"1m", rayiou.at1}, {"2m", rayiou.at2}, {"4m", rayiou.at4}, {"mean", rayiou.mean}};
  j["mave"] = {{"mean", mave.mean}, {"per_class", mave.per_class}};
  j["occscore"] = occscore;
  j["voxel_accuracy"] = voxel_accuracy;
  j["l2"] = {{"1s", l2.at1}, {"2s", l2.at2}, {"3s", l2.at3}, {"avg", l2.avg}};
  j["collision"] = {{"1s", collision.at1}, {"2s", collision.at2}, {"3s", collision.at3}, {"avg", collision.avg}};
  j["qa"] = {{"accuracy", qa.accuracy},
             {"count", qa.count},
             {"overall", qa.overall},
             {"unparseable", qa.unparseable},
             {"text_mave", qa.text_mave},
             {"text_l2", {{"1s", qa.text_l2.at1}, {"2s", qa.text_l2.at2}, {"3s", qa.text_l2.at3}, {"avg", qa.text_l2.avg}}},
             {"text_collision", {{"1s", qa.text_collision.at1}, {"2s", qa.text_collision.at2},
                                 {"3s", qa.text_collision.at3}, {"avg", qa.text_collision.avg}}}};
  return j;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "scenes           %ld\n", scenes);
  os << buf;
  std::snprintf(buf, sizeof buf, "RayIoU 1m/2m/4m  %.4f / %.4f / %.4f  (mean %.4f)\n", rayiou.at1, rayiou.at2,
                rayiou.at4, rayiou.mean);
  os << buf;
  std::snprintf(buf, sizeof buf, "mAVE             %.4f m/s\n", mave.mean);
  os << buf;
  for (const auto& [cls, v] : mave.per_class) {
    std::snprintf(buf, sizeof buf, "  %-14s %.4f\n", cls.c_str(), v);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "OccScore         %.2f\n", occscore);
  os << buf;
  std::snprintf(buf, sizeof buf, "voxel accuracy   %.4f\n", voxel_accuracy);
  os << buf;
  std::snprintf(buf, sizeof buf, "L2 1s/2s/3s      %.3f / %.3f / %.3f  (avg %.3f) m\n", l2.at1, l2.at2, l2.at3, l2.avg);
  os << buf;
  std::snprintf(buf, sizeof buf, "collision 1s/2s/3s %.2f%% / %.2f%% / %.2f%%  (avg %.2f%%)\n", 100 * collision.at1,
                100 * collision.at2, 100 * collision.at3, 100 * collision.avg);
  os << buf;
  for (const auto& [task, acc] : qa.accuracy) {
    std::snprintf(buf, sizeof buf, "QA %-13s %.4f  (%ld)\n", task.c_str(), acc, qa.count.at(task));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "QA overall       %.4f  (unparseable %ld)\n", qa.overall, qa.unparseable);
  os << buf;
  std::snprintf(buf, sizeof buf, "QA text mAVE     %.4f m/s, text L2 avg %.3f m\n", qa.text_mave, qa.text_l2.avg);
  os << buf;
  return os.str();
}

}  // namespace vla4d::metrics
