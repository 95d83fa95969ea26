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
#include "vla4d/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "vla4d/harness.hpp"
#include "vla4d/plot.hpp"

namespace vla4d::cli {

namespace fs = std::filesystem;
using harness::RunConfig;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mix;
  std::optional<std::string> ego_status;
  std::optional<std::string> hidden;
  std::optional<std::string> preset;
  std::optional<int> steps;
  std::optional<int> stage1_steps;
  std::optional<int> batch;
};

void apply(RunConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.mix) cfg.mix = qa::Mix::parse(*o.mix);
  if (o.ego_status) cfg.ego_status = *o.ego_status == "on";
  if (o.hidden) cfg.hidden_mode = backbone::hidden_mode_from_name(*o.hidden);
  if (o.preset) cfg.preset = harness::preset_from_name(*o.preset);
  if (o.steps) cfg.stage2.steps = *o.steps;
  if (o.stage1_steps) cfg.stage1.steps = *o.stage1_steps;
  if (o.batch) cfg.stage1.batch = cfg.stage2.batch = *o.batch;
  cfg.validate();
}

std::vector<qa::QaPair> pairs_for(const std::vector<qa::QaPair>& pairs,
                                  const std::vector<worldgen::SceneSample>& scenes) {
  std::set<std::string> ids;
  for (const auto& s : scenes) ids.insert(s.scene_id);
  std::vector<qa::QaPair> out;
  for (const auto& p : pairs) {
    if (ids.count(p.scene_id)) out.push_back(p);
  }
  return out;
}

std::pair<int, int> parse_rays(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x != std::string::npos) return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
  } catch (const std::exception&) {
  }
  throw ConfigError("rays must look like 512x32, got \"" + text + "\"");
}

// ---- commands ------------------------------------------------------------------

struct GenWorldArgs {
  int n = 240;
  std::uint64_t seed = 0;
  std::string out;
  std::string spec = "desk";
  std::string difficulty = "default";
  std::string config;
};

int gen_world(const GenWorldArgs& a, std::ostream& out) {
  occgrid::GridSpec spec = a.spec == "paper" ? occgrid::GridSpec::paper() : occgrid::GridSpec::desk();
  if (!a.config.empty()) spec = RunConfig::load(a.config).grid;
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = worldgen::generate_split(a.n, a.seed, spec, a.out, worldgen::difficulty_from_name(a.difficulty));
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "wrote " << m.ids("train").size() << " train and " << m.ids("val").size() << " val scenes to " << a.out
      << " (" << spec.nx << "x" << spec.ny << "x" << spec.nz << ", " << sec << " s)\n";
  return kExitOk;
}

struct GenQaArgs {
  std::string scenes;
  std::string out;
  std::string mix = qa::Mix{}.str();
  std::uint64_t seed = 0;
  std::string split = "all";
};

int gen_qa(const GenQaArgs& a, std::ostream& out) {
  const qa::Mix mix = qa::Mix::parse(a.mix);
  const auto scenes = harness::load_scenes(a.scenes, a.split);
  const auto pairs = qa::gen_corpus(scenes, mix, a.seed);
  qa::write_corpus(a.out, pairs);
  std::map<std::string, int> counts;
  for (const auto& p : pairs) ++counts[qa::task_name(p.task)];
  out << "wrote " << pairs.size() << " QA pairs for " << scenes.size() << " scenes to " << a.out << "\n";
  for (const auto& [task, n] : counts) out << "  " << task << " " << n << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string scenes;
  std::string qa;
  std::string out;
  std::string init;
  Overrides over;
};

int train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  const auto manifest = worldgen::read_manifest(a.scenes);
  if (a.config.empty()) cfg.grid = manifest.spec;
  if (!(cfg.grid == manifest.spec)) throw SpecMismatch("config grid does not match the scene set");
  apply(cfg, a.over);

  harness::Dataset data;
  data.scenes = harness::load_scenes(a.scenes, "train");
  data.pairs = a.qa.empty() ? qa::gen_corpus(data.scenes, cfg.mix, cfg.seed)
                            : pairs_for(qa::read_corpus(a.qa), data.scenes);
  data.index();
  if (data.pairs.empty()) throw ConfigError("no training QA pairs for the train split");

  fs::create_directories(a.out);
  std::unique_ptr<harness::Model> model;
  if (a.init.empty()) {
    model = std::make_unique<harness::Model>(cfg, harness::build_vocabulary(cfg.grid, data.pairs));
  } else {
    auto init = harness::load_checkpoint(a.init);
    model = std::make_unique<harness::Model>(cfg, init->vocab());
    harness::load_parameters(*model, a.init);
  }
  {
    std::ofstream f(fs::path(a.out) / "config.json");
    f << model->config().to_json().dump(2) << "\n";
  }
  std::ofstream log(fs::path(a.out) / "train_log.jsonl", std::ios::trunc);
  out << "training on " << data.scenes.size() << " scenes, " << data.pairs.size() << " QA pairs, "
      << model->params().numel() << " parameters, preset " << harness::preset_name(cfg.preset) << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  if (a.init.empty()) {
    const auto r1 = harness::stage1_train(*model, data, &log);
    harness::check_freeze(r1, "language model");
    harness::save_checkpoint(*model, fs::path(a.out) / "stage1.ckpt");
    out << "stage 1: " << r1.log.size() << " steps, caption loss " << *r1.log.front().llm << " -> "
        << *r1.log.back().llm << "\n";
  }
  const auto r2 = harness::stage2_train(*model, data, &log);
  harness::check_freeze(r2, "encoder");
  harness::save_checkpoint(*model, fs::path(a.out) / "model.ckpt");
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& first = r2.log.front();
  const auto& last = r2.log.back();
  out << "stage 2: " << r2.log.size() << " steps, loss " << first.loss << " -> " << last.loss << " (" << sec
      << " s)\n";
  out << "checkpoint " << (fs::path(a.out) / "model.ckpt").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string scenes;
  std::string qa;
  std::string split = "val";
  std::string out;
  std::string rays = "512x32";
  int max_qa = -1;
  bool all_obstacles = false;
  std::uint64_t seed = 0;
};

int eval(const EvalArgs& a, std::ostream& out) {
  const auto model = harness::load_checkpoint(a.ckpt);
  const auto scenes = harness::load_scenes(a.scenes, a.split);
  if (scenes.empty()) throw ConfigError("no scenes in split " + a.split);
  const auto pairs = a.qa.empty() ? qa::gen_corpus(scenes, model->config().mix, model->config().seed + 1)
                                  : pairs_for(qa::read_corpus(a.qa), scenes);
  harness::EvalOptions opt;
  std::tie(opt.azimuths, opt.elevations) = parse_rays(a.rays);
  opt.max_qa = a.max_qa;
  opt.all_obstacles = a.all_obstacles;
  opt.seed = a.seed;
  const auto ev = harness::evaluate(*model, scenes, pairs, opt);
  out << ev.report.to_text();
  const fs::path json_path = a.out.empty() ? fs::path(a.ckpt).parent_path() / "metrics.json" : fs::path(a.out);
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  std::ofstream f(json_path, std::ios::trunc);
  f << ev.report.to_json().dump(2) << "\n";
  if (!f) throw FormatError("cannot write " + json_path.string());
  out << "metrics written to " << json_path.string() << "\n";
  return kExitOk;
}

struct PlotArgs {
  std::string scenes;
  std::string ckpt;
  std::string split = "val";
  std::string scene;
  std::string out;
  int count = 1;
  int cell = 8;
};

int plot_cmd(const PlotArgs& a, std::ostream& out) {
  const auto scenes = harness::load_scenes(a.scenes, a.split);
  std::unique_ptr<harness::Model> model;
  if (!a.ckpt.empty()) model = harness::load_checkpoint(a.ckpt);
  int written = 0;
  for (std::size_t i = 0; i < scenes.size() && written < a.count; ++i) {
    const auto& s = scenes[i];
    if (!a.scene.empty() && s.scene_id != a.scene) continue;
    std::vector<plot::Image> panels;
    std::optional<harness::Prediction> pred;
    if (model) pred = model->predict(s, i);
    panels.push_back(plot::occupancy_panel(s.occ, &s.plan, pred ? &pred->plan : nullptr, a.cell));
    panels.push_back(plot::flow_panel(s.occ, s.flow.velocity(), &s.flow.dynamic_mask(), 8.0, a.cell));
    if (pred) {
      panels.push_back(plot::occupancy_panel(pred->occ, nullptr, &pred->plan, a.cell));
      panels.push_back(plot::flow_panel(pred->occ, pred->flow, nullptr, 8.0, a.cell));
    }
    const fs::path path = fs::path(a.out) / (s.scene_id + ".png");
    plot::write_png(path, plot::hstack(panels));
    out << "wrote " << path.string() << "\n";
    ++written;
  }
  if (written == 0) throw ConfigError("no matching scene to plot");
  return kExitOk;
}

struct DemoArgs {
  std::string out = "demo_out";
  std::uint64_t seed = 7;
  int scenes = 12;
  int steps = 200;
};

// Tiny end-to-end run: every stage of the pipeline on a handful of scenes.
int demo(const DemoArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root(a.out);
  fs::create_directories(root);
  RunConfig cfg;
  cfg.seed = a.seed;
  cfg.encoder.channels = 32;
  cfg.lm.layers = 2;
  cfg.lm.width = 64;
  cfg.lm.heads = 2;
  cfg.lm.ffn = 128;
  cfg.heads.plan_hidden = 64;
  cfg.optim.warmup = 20;
  cfg.optim.min_lr_ratio = 0.1;
  cfg.stage1 = {0, 4, 1e-2};
  cfg.stage2 = {a.steps, 2, 3e-3};
  cfg.heads.channels = cfg.encoder.channels;
  cfg.validate();
  {
    std::ofstream f(root / "demo_config.json");
    f << cfg.to_json().dump(2) << "\n";
  }
  out << "== gen-world\n";
  gen_world({a.scenes, a.seed, (root / "scenes").string(), "desk", "default", (root / "demo_config.json").string()},
            out);
  out << "== gen-qa\n";
  gen_qa({(root / "scenes").string(), (root / "qa.jsonl").string(), cfg.mix.str(), a.seed, "all"}, out);
  out << "== train\n";
  TrainArgs ta;
  ta.config = (root / "demo_config.json").string();
  ta.scenes = (root / "scenes").string();
  ta.qa = (root / "qa.jsonl").string();
  ta.out = (root / "run").string();
  train(ta, out);
  out << "== eval\n";
  EvalArgs ea;
  ea.ckpt = (root / "run" / "model.ckpt").string();
  ea.scenes = (root / "scenes").string();
  ea.qa = (root / "qa.jsonl").string();
  ea.out = (root / "run" / "metrics.json").string();
  eval(ea, out);
  out << "== plot\n";
  PlotArgs pa;
  pa.scenes = (root / "scenes").string();
  pa.ckpt = ea.ckpt;
  pa.out = (root / "plots").string();
  pa.count = 2;
  plot_cmd(pa, out);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "demo finished in " << sec << " s\n";
  return kExitOk;
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--mix", o.mix, "QA mix, e.g. caption=1,occ=5,flow=2,action=1,trajectory=1");
  cmd->add_option("--ego-status", o.ego_status, "Condition the planner on ego status")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--hidden", o.hidden, "Vision states fed to the heads")->check(CLI::IsMember({"last", "weighted"}));
  cmd->add_option("--preset", o.preset, "Heads trained: text (I), vision (II) or joint (III)")
      ->check(CLI::IsMember({"text", "vision", "joint", "I", "II", "III"}));
  cmd->add_option("--steps", o.steps, "Stage-2 steps")->check(CLI::PositiveNumber);
  cmd->add_option("--stage1-steps", o.stage1_steps, "Stage-1 steps (0 = one pass over the captions)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch", o.batch, "Batch size of both stages")->check(CLI::PositiveNumber);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic 4D occupancy, flow, planning and QA pipeline", "vla4d"};
  app.require_subcommand(1);

  GenWorldArgs gw;
  auto* c_world = app.add_subcommand("gen-world", "Generate a synthetic scene set with a train/val split");
  c_world->add_option("--n", gw.n, "Number of scenes")->check(CLI::Range(2, 1000000));
  c_world->add_option("--seed", gw.seed, "Generator seed");
  c_world->add_option("--out", gw.out, "Output directory")->required();
  c_world->add_option("--spec", gw.spec, "Grid preset")->check(CLI::IsMember({"desk", "paper"}));
  c_world->add_option("--difficulty", gw.difficulty, "Scene difficulty")
      ->check(CLI::IsMember({"easy", "default", "hard"}));
  c_world->add_option("--config", gw.config, "Take the grid from a run config");

  GenQaArgs gq;
  auto* c_qa = app.add_subcommand("gen-qa", "Generate a QA corpus (JSON lines) for a scene set");
  c_qa->add_option("--scenes", gq.scenes, "Scene set directory")->required();
  c_qa->add_option("--out", gq.out, "Output .jsonl path")->required();
  c_qa->add_option("--mix", gq.mix, "Pairs per scene and task");
  c_qa->add_option("--seed", gq.seed, "Sampling seed");
  c_qa->add_option("--split", gq.split, "Scenes to cover")->check(CLI::IsMember({"train", "val", "all"}));

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Two-stage training (projector warm-up, then joint)");
  c_train->add_option("--config", tr.config, "Run config JSON");
  c_train->add_option("--scenes", tr.scenes, "Scene set directory")->required();
  c_train->add_option("--qa", tr.qa, "QA corpus; generated from the mix when omitted");
  c_train->add_option("--out", tr.out, "Run directory")->required();
  c_train->add_option("--init", tr.init, "Start stage 2 from this checkpoint (skips stage 1)");
  add_overrides(c_train, tr.over);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint and write a metric report");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--scenes", ev.scenes, "Scene set directory")->required();
  c_eval->add_option("--qa", ev.qa, "QA corpus; generated when omitted");
  c_eval->add_option("--split", ev.split, "Scenes to evaluate")->check(CLI::IsMember({"train", "val", "all"}));
  c_eval->add_option("--out", ev.out, "Report JSON path (default: metrics.json next to the checkpoint)");
  c_eval->add_option("--rays", ev.rays, "Ray fan density AZIMUTHSxELEVATIONS");
  c_eval->add_option("--max-qa", ev.max_qa, "Cap on scored QA pairs");
  c_eval->add_flag("--all-obstacles", ev.all_obstacles, "Count every occupied voxel above ground as an obstacle");
  c_eval->add_option("--seed", ev.seed, "Plan sampling seed");

  PlotArgs pl;
  auto* c_plot = app.add_subcommand("plot", "Render BEV occupancy, flow and trajectory panels to PNG");
  c_plot->add_option("--scenes", pl.scenes, "Scene set directory")->required();
  c_plot->add_option("--ckpt", pl.ckpt, "Add prediction panels from this checkpoint");
  c_plot->add_option("--split", pl.split, "Scenes to draw from")->check(CLI::IsMember({"train", "val", "all"}));
  c_plot->add_option("--scene", pl.scene, "Scene id");
  c_plot->add_option("--count", pl.count, "Number of scenes")->check(CLI::PositiveNumber);
  c_plot->add_option("--cell", pl.cell, "Pixels per grid cell")->check(CLI::Range(1, 64));
  c_plot->add_option("--out", pl.out, "Output directory")->required();

  DemoArgs dm;
  auto* c_demo = app.add_subcommand("demo", "gen-world, gen-qa, train, eval and plot on a tiny config");
  c_demo->add_option("--out", dm.out, "Output directory");
  c_demo->add_option("--seed", dm.seed, "Seed");
  c_demo->add_option("--n", dm.scenes, "Number of scenes")->check(CLI::Range(2, 10000));
  c_demo->add_option("--steps", dm.steps, "Stage-2 steps")->check(CLI::PositiveNumber);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (c_world->parsed()) return gen_world(gw, out);
    if (c_qa->parsed()) return gen_qa(gq, out);
    if (c_train->parsed()) return train(tr, out);
    if (c_eval->parsed()) return eval(ev, out);
    if (c_plot->parsed()) return plot_cmd(pl, out);
    if (c_demo->parsed()) return demo(dm, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace vla4d::cli
