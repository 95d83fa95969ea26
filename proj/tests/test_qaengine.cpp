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
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "test_helpers.hpp"
#include "vla4d/qaengine.hpp"

namespace vla4d::qa {
namespace {

using occgrid::GridSpec;
using worldgen::Command;

TEST(FormatVelocity, TwoDecimalsTrimmed) {
  EXPECT_EQ(format_velocity(0.1), "0.1");
  EXPECT_EQ(format_velocity(0.06), "0.06");
  EXPECT_EQ(format_velocity(0.0), "0.0");
  EXPECT_EQ(format_velocity(-0.001), "0.0");
  EXPECT_EQ(format_velocity(-0.07), "-0.07");
  EXPECT_EQ(format_velocity(2.5), "2.5");
  EXPECT_EQ(format_velocity(1.234), "1.23");
  EXPECT_EQ(format_velocity(-3.0), "-3.0");
}

TEST(RenderClassFlow, ExactStrings) {
  EXPECT_EQ(render_class_flow("car", 0.1, 0.06), "{label: car}, {vx: 0.1, vy: 0.06}");
  EXPECT_EQ(render_class_flow("vegetation", 0.0, 0.0), "{label: vegetation}, {vx: 0.0, vy: 0.0}");
}

TEST(RenderAction, AllCommandsRoundTrip) {
  EXPECT_EQ(render_action(Command::kStraight), "Go straight.");
  EXPECT_EQ(render_action(Command::kStop), "Stop.");
  for (int c = 0; c < worldgen::kNumCommands; ++c) {
    const auto cmd = static_cast<Command>(c);
    EXPECT_EQ(parse_action(render_action(cmd)), cmd);
  }
  EXPECT_THROW(parse_action("Reverse."), ParseError);
}

TEST(RenderTrajectory, Layout) {
  occgrid::TrajectoryPlan p;
  for (int i = 0; i < 6; ++i) p.waypoints[i] = {1.5 * (i + 1), i == 0 ? -0.001 : 0.126};
  EXPECT_EQ(render_trajectory(p),
            "Future 6-frame trajectory: [(1.50, 0.00), (3.00, 0.13), (4.50, 0.13), (6.00, 0.13), "
            "(7.50, 0.13), (9.00, 0.13)].");
}

TEST(Parse, StatusAndFree) {
  EXPECT_TRUE(parse_status("yes"));
  EXPECT_FALSE(parse_status(" no. "));
  EXPECT_THROW(parse_status("maybe"), ParseError);
  EXPECT_THROW(parse_status("yes please"), ParseError);
  EXPECT_TRUE(parse_class_flow("free").free);
}

TEST(Parse, ClassFlowFields) {
  const auto a = parse_class_flow("{label: pedestrian}, {vx: -1.25, vy: 0.5}");
  EXPECT_FALSE(a.free);
  EXPECT_EQ(a.label, "pedestrian");
  EXPECT_EQ(a.vx, -1.25);
  EXPECT_EQ(a.vy, 0.5);
  EXPECT_THROW(parse_class_flow("{label: car}, {vx: 1.0}"), ParseError);
  EXPECT_THROW(parse_class_flow("{label: car} {vx: 1.0, vy: 2.0}"), ParseError);
}

TEST(Parse, TrajectoryRejectsWrongArity) {
  EXPECT_THROW(parse_trajectory("Future 6-frame trajectory: [(1.00, 0.00)]."), ParseError);
  EXPECT_THROW(parse_trajectory("[(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)]"), ParseError);
}

TEST(RoundTrip, TrajectoryWithinQuantisation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> x(-5.0, 40.0), y(-15.0, 15.0);
  for (int i = 0; i < 10000; ++i) {
    occgrid::TrajectoryPlan p;
    for (auto& w : p.waypoints) w = {x(rng), y(rng)};
    const auto back = parse_trajectory(render_trajectory(p));
    for (int k = 0; k < 6; ++k) {
      ASSERT_LE(std::abs(back.waypoints[k][0] - p.waypoints[k][0]), 0.005 + 1e-12);
      ASSERT_LE(std::abs(back.waypoints[k][1] - p.waypoints[k][1]), 0.005 + 1e-12);
    }
  }
}

TEST(RoundTrip, FlowWithinQuantisation) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> v(-12.0, 12.0);
  for (int i = 0; i < 10000; ++i) {
    const double vx = v(rng), vy = v(rng);
    const auto a = parse_class_flow(render_class_flow("truck", vx, vy));
    ASSERT_EQ(a.label, "truck");
    ASSERT_LE(std::abs(a.vx - vx), 0.005 + 1e-12);
    ASSERT_LE(std::abs(a.vy - vy), 0.005 + 1e-12);
  }
}

TEST(Preamble, GridNumbers) {
  const std::string p = occ_preamble(GridSpec::desk());
  EXPECT_NE(p.find("40\xc3\x97" "40 grid"), std::string::npos);
  EXPECT_NE(p.find("bottom-left corner at (-20, -20)"), std::string::npos);
  EXPECT_NE(p.find("top-right corner at (20, 20)"), std::string::npos);
  EXPECT_NE(p.find("divided into 8 bins"), std::string::npos);
  EXPECT_NE(p.find("<OCC>(20, 20, 0)</OCC>"), std::string::npos);
  const std::string big = occ_preamble(GridSpec::paper());
  EXPECT_NE(big.find("200\xc3\x97" "200 grid"), std::string::npos);
  EXPECT_NE(big.find("<OCC>(100, 100, 0)</OCC>"), std::string::npos);
}

class SceneQa : public ::testing::Test {
 protected:
  worldgen::SceneSample scene = worldgen::generate_scene(31, GridSpec::desk());
};

TEST_F(SceneQa, StatusAnswersMatchGridAndAreBalanced) {
  const auto qs = gen_occ_status_qa(scene, 10000, 5);
  int yes = 0;
  for (const auto& q : qs) {
    ASSERT_TRUE(q.anchor.has_value());
    const auto& t = *q.anchor;
    const bool occupied = scene.occ.at(t.x, t.y, t.z) != occgrid::kFree;
    ASSERT_EQ(parse_status(q.answer), occupied);
    ASSERT_EQ(q.question, status_question(scene.spec, t));
    yes += occupied;
  }
  const double frac = yes / 10000.0;
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
}

TEST_F(SceneQa, ClassFlowAnswersMatchGrid) {
  int dynamic = 0;
  for (const auto& q : gen_occ_class_flow_qa(scene, 500, 6)) {
    const auto& t = *q.anchor;
    const int label = scene.occ.at(t.x, t.y, t.z);
    const auto a = parse_class_flow(q.answer);
    ASSERT_EQ(a.free, label == occgrid::kFree);
    if (a.free) continue;
    EXPECT_EQ(a.label, scene.occ.class_names()[label]);
    const auto v = scene.flow.at(t.x, t.y, t.z);
    EXPECT_LE(std::abs(a.vx - v[0]), 0.005 + 1e-12);
    EXPECT_LE(std::abs(a.vy - v[1]), 0.005 + 1e-12);
    dynamic += scene.flow.is_dynamic(t.x, t.y, t.z);
  }
  EXPECT_GT(dynamic, 0);
}

TEST_F(SceneQa, ActionAndTrajectoryFollowScene) {
  EXPECT_EQ(parse_action(gen_action_qa(scene).answer), scene.command);
  const auto plan = parse_trajectory(gen_traj_qa(scene).answer);
  for (int k = 0; k < 6; ++k) {
    EXPECT_NEAR(plan.waypoints[k][0], scene.plan.waypoints[k][0], 0.005 + 1e-12);
    EXPECT_NEAR(plan.waypoints[k][1], scene.plan.waypoints[k][1], 0.005 + 1e-12);
  }
}

TEST_F(SceneQa, CaptionCountsAgents) {
  auto agent = [](int cls, double vx) {
    worldgen::Agent a;
    a.class_id = cls;
    a.vx = vx;
    return a;
  };
  scene.agents = {agent(occgrid::kCar, 0), agent(occgrid::kCar, 2.0), agent(occgrid::kCar, 0),
                  agent(occgrid::kPedestrian, 0)};
  std::string c = gen_caption(scene).answer;
  EXPECT_NE(c.find("There are 3 cars and 1 pedestrian around the ego car."), std::string::npos) << c;
  EXPECT_NE(c.find("1 vehicle is moving."), std::string::npos) << c;
  EXPECT_EQ(c.find("walking"), std::string::npos) << c;

  scene.agents = {agent(occgrid::kPedestrian, 1.0)};
  c = gen_caption(scene).answer;
  EXPECT_NE(c.find("There is 1 pedestrian around the ego car."), std::string::npos) << c;
  EXPECT_NE(c.find("There are no moving vehicles."), std::string::npos) << c;
  EXPECT_NE(c.find("1 pedestrian is walking."), std::string::npos) << c;

  scene.agents.clear();
  EXPECT_NE(gen_caption(scene).answer.find("There are no agents"), std::string::npos);
}

TEST(Mix, ParseAndCount) {
  const auto m = Mix::parse("occ=7,trajectory=0");
  EXPECT_EQ(m.occ, 7);
  EXPECT_EQ(m.trajectory, 0);
  EXPECT_EQ(m.caption, 1);
  EXPECT_EQ(m.per_scene(), 1 + 7 + 2 + 1 + 0);
  EXPECT_EQ(Mix::parse(m.str()).str(), m.str());
  EXPECT_EQ(Mix().str(), "caption=1,occ=5,flow=2,action=1,trajectory=1");
  EXPECT_THROW(Mix::parse("occ=-1"), ConfigError);
  EXPECT_THROW(Mix::parse("speed=3"), ConfigError);
  EXPECT_THROW(Mix::parse("occ=2x"), ConfigError);
  EXPECT_THROW(Mix::parse("occ"), ConfigError);
}

TEST(Corpus, SceneMixCountsAndOrder) {
  const auto scene = worldgen::generate_scene(4, GridSpec::desk());
  const Mix mix = Mix::parse("caption=2,occ=3,flow=4,action=1,trajectory=2");
  const auto qs = gen_scene_qa(scene, mix, 9);
  ASSERT_EQ(qs.size(), 12u);
  std::map<Task, int> n;
  Task prev = Task::kCaption;
  for (const auto& q : qs) {
    ++n[q.task];
    EXPECT_GE(static_cast<int>(q.task), static_cast<int>(prev));
    prev = q.task;
    EXPECT_EQ(q.scene_id, scene.scene_id);
  }
  for (int t = 0; t < kNumTasks; ++t) EXPECT_EQ(n[static_cast<Task>(t)], mix.count(static_cast<Task>(t)));
  EXPECT_EQ(gen_scene_qa(scene, mix, 9), qs);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TEST(Corpus, ByteIdenticalAcrossRuns) {
  std::vector<worldgen::SceneSample> scenes;
  for (std::uint64_t s = 0; s < 6; ++s) scenes.push_back(worldgen::generate_scene(s, GridSpec::desk()));
  const auto dir = testing::scratch_dir("qa_corpus");
  write_corpus(dir / "a.jsonl", gen_corpus(scenes, Mix{}, 17));
  write_corpus(dir / "b.jsonl", gen_corpus(scenes, Mix{}, 17));
  const std::string a = slurp(dir / "a.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b.jsonl"));
  write_corpus(dir / "c.jsonl", gen_corpus(scenes, Mix{}, 18));
  EXPECT_NE(a, slurp(dir / "c.jsonl"));

  const auto back = read_corpus(dir / "a.jsonl");
  EXPECT_EQ(back, gen_corpus(scenes, Mix{}, 17));
  ASSERT_EQ(back.size(), 60u);
  EXPECT_EQ(back.front().scene_id, scenes.front().scene_id);
  EXPECT_EQ(back.back().scene_id, scenes.back().scene_id);
}

TEST(Corpus, JsonlRoundTripKeepsAnchor) {
  QaPair p;
  p.scene_id = "scene_0007";
  p.frame = 3;
  p.task = Task::kOccStatus;
  p.question = "Is the position <OCC>(1, 2, 3)</OCC> occupied? \"quoted\"";
  p.answer = "no";
  p.anchor = occgrid::OccToken{1, 2, 3};
  const std::string line = to_jsonl(p);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(from_jsonl(line), p);
  p.anchor.reset();
  EXPECT_EQ(from_jsonl(to_jsonl(p)), p);
  EXPECT_THROW(from_jsonl("{\"task\": \"poetry\"}"), Error);
  EXPECT_THROW(from_jsonl("not json"), Error);
}

TEST(Templates, CoverQuestionWords) {
  const auto texts = template_texts(GridSpec::desk());
  std::string all;
  for (const auto& t : texts) all += t + " ";
  for (const char* w : {"occupied?", "free", "trajectory", "Turn", "vehicles", "pedestrian"}) {
    EXPECT_NE(all.find(w), std::string::npos) << w;
  }
}

}  // namespace
}  // namespace vla4d::qa
