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
#include "vla4d/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <ostream>
#include <set>

#include "vla4d/parallel.hpp"

namespace vla4d::harness {

using nlohmann::json;

Preset preset_from_name(const std::string& name) {
  if (name == "text" || name == "I") return Preset::kText;
  if (name == "vision" || name == "II") return Preset::kVision;
  if (name == "joint" || name == "III") return Preset::kJoint;
  throw ConfigError("preset must be text, vision or joint (I, II, III), got \"" + name + "\"");
}

const char* preset_name(Preset p) {
  switch (p) {
    case Preset::kText: return "text";
    case Preset::kVision: return "vision";
    case Preset::kJoint: return "joint";
  }
  return "joint";
}

// ---- configuration -----------------------------------------------------------

namespace {

// Reads keys from one JSON object and remembers which were consumed so the
// rest can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + path_ + key + "' has the wrong type");
    }
  }

  template <class F>
  void section(const char* key, F&& fn) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    Reader r(j_.at(key), path_ + key + ".");
    fn(r);
    r.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path_ + k + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_stage(Reader& r, StageConfig& s) {
  r.get("steps", s.steps);
  r.get("batch", s.batch);
  r.get("lr", s.lr);
}

json stage_json(const StageConfig& s) { return {{"steps", s.steps}, {"batch", s.batch}, {"lr", s.lr}}; }

}  // namespace

void RunConfig::validate() const {
  grid.validate();
  if (encoder.channels < 1 || encoder.stride < 1) throw ConfigError("encoder channels and stride must be >= 1");
  if (!(encoder.position >= 0)) throw ConfigError("encoder.position must be >= 0");
  if (grid.nx % encoder.stride || grid.ny % encoder.stride) {
    throw ConfigError("encoder stride must divide the grid size");
  }
  if (patch < 1 || (grid.nx / encoder.stride) % patch || (grid.ny / encoder.stride) % patch) {
    throw ConfigError("projector patch must divide the BEV size");
  }
  if (projector_heads < 1 || encoder.channels % projector_heads) {
    throw ConfigError("projector heads must divide the encoder channels");
  }
  if (encoder.channels % grid.nz) throw ConfigError("encoder channels must split evenly into height bins");
  if (lm.vocab > 0) lm.validate();
  if (heads.sampler_steps < 1 || heads.sampler_steps > heads.diffusion_steps) {
    throw ConfigError("sampler steps must lie in [1, diffusion steps]");
  }
  if (heads.flow_scale <= 0 || heads.plan_scale <= 0) throw ConfigError("flow and plan scales must be positive");
  loss.validate();
  for (const StageConfig* s : {&stage1, &stage2}) {
    if (s->steps < 0 || s->batch < 1 || !(s->lr > 0)) throw ConfigError("stage needs steps >= 0, batch >= 1, lr > 0");
  }
  if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1 && optim.eps > 0)) {
    throw ConfigError("optimizer betas must lie in [0, 1) and eps > 0");
  }
  if (optim.weight_decay < 0 || optim.warmup < 0 || optim.min_lr_ratio < 0 || optim.min_lr_ratio > 1) {
    throw ConfigError("optimizer weight decay, warmup and min_lr_ratio out of range");
  }
  if (max_answer_tokens < 1) throw ConfigError("max_answer_tokens must be >= 1");
}

losses::LossWeights RunConfig::effective_weights() const {
  losses::LossWeights w = loss;
  if (preset == Preset::kText) w.occ = w.flow = w.action = 0.0;
  if (preset == Preset::kVision) w.llm = 0.0;
  return w;
}

projector::ProjectorConfig RunConfig::projector_config() const {
  return {patch, encoder.channels, lm.width, projector_heads};
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["grid"] = {{"nx", grid.nx}, {"ny", grid.ny}, {"nz", grid.nz}, {"voxel_size", grid.voxel_size}, {"dz", grid.dz}};
  j["encoder"] = {{"channels", encoder.channels}, {"stride", encoder.stride}, {"position", encoder.position}};
  j["projector"] = {{"patch", patch}, {"heads", projector_heads}};
  j["lm"] = {{"layers", lm.layers}, {"width", lm.width},     {"heads", lm.heads},
             {"ffn", lm.ffn},       {"max_seq", lm.max_seq}, {"rope_base", lm.rope_base},
             {"activation", lm.activation}};
  j["heads"] = {{"occ_hidden", heads.occ_hidden},     {"flow_hidden", heads.flow_hidden},
                {"flow_scale", heads.flow_scale},     {"plan_hidden", heads.plan_hidden},
                {"command_dim", heads.command_dim},   {"time_dim", heads.time_dim},
                {"diffusion_steps", heads.diffusion_steps}, {"sampler_steps", heads.sampler_steps},
                {"plan_scale", heads.plan_scale},     {"tied_text_head", heads.tied_text_head}};
  j["loss"] = {{"llm", loss.llm},
               {"occ", loss.occ},
               {"flow", loss.flow},
               {"action", loss.action},
               {"flow_static", loss.flow_static},
               {"flow_dynamic", loss.flow_dynamic},
               {"focal_gamma", loss.focal_gamma},
               {"focal_alpha", loss.focal_alpha},
               {"lovasz", loss.lovasz}};
  j["optim"] = {{"lr", optim.lr},
                {"beta1", optim.beta1},
                {"beta2", optim.beta2},
                {"eps", optim.eps},
                {"weight_decay", optim.weight_decay},
                {"warmup", optim.warmup},
                {"min_lr_ratio", optim.min_lr_ratio},
                {"grad_clip", optim.grad_clip}};
  j["stage1"] = stage_json(stage1);
  j["stage2"] = stage_json(stage2);
  j["ego_status"] = ego_status;
  j["hidden_mode"] = backbone::hidden_mode_name(hidden_mode);
  j["mix"] = mix.str();
  j["preset"] = preset_name(preset);
  j["max_answer_tokens"] = max_answer_tokens;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  r.section("grid", [&](Reader& g) {
    int nx = c.grid.nx, ny = c.grid.ny, nz = c.grid.nz;
    double vs = c.grid.voxel_size, dz = c.grid.dz;
    g.get("nx", nx);
    g.get("ny", ny);
    g.get("nz", nz);
    g.get("voxel_size", vs);
    g.get("dz", dz);
    if (nx < 1 || ny < 1 || nz < 1 || !(vs > 0) || !(dz > 0)) throw ConfigError("grid sizes must be positive");
    c.grid = occgrid::GridSpec::centered(nx, ny, nz, vs, dz);
  });
  r.section("encoder", [&](Reader& s) {
    s.get("channels", c.encoder.channels);
    s.get("stride", c.encoder.stride);
    s.get("position", c.encoder.position);
  });
  r.section("projector", [&](Reader& s) {
    s.get("patch", c.patch);
    s.get("heads", c.projector_heads);
  });
  r.section("lm", [&](Reader& s) {
    s.get("layers", c.lm.layers);
    s.get("width", c.lm.width);
    s.get("heads", c.lm.heads);
    s.get("ffn", c.lm.ffn);
    s.get("max_seq", c.lm.max_seq);
    s.get("rope_base", c.lm.rope_base);
    s.get("activation", c.lm.activation);
  });
  r.section("heads", [&](Reader& s) {
    s.get("occ_hidden", c.heads.occ_hidden);
    s.get("flow_hidden", c.heads.flow_hidden);
    s.get("flow_scale", c.heads.flow_scale);
    s.get("plan_hidden", c.heads.plan_hidden);
    s.get("command_dim", c.heads.command_dim);
    s.get("time_dim", c.heads.time_dim);
    s.get("diffusion_steps", c.heads.diffusion_steps);
    s.get("sampler_steps", c.heads.sampler_steps);
    s.get("plan_scale", c.heads.plan_scale);
    s.get("tied_text_head", c.heads.tied_text_head);
  });
  r.section("loss", [&](Reader& s) {
    s.get("llm", c.loss.llm);
    s.get("occ", c.loss.occ);
    s.get("flow", c.loss.flow);
    s.get("action", c.loss.action);
    s.get("flow_static", c.loss.flow_static);
    s.get("flow_dynamic", c.loss.flow_dynamic);
    s.get("focal_gamma", c.loss.focal_gamma);
    s.get("focal_alpha", c.loss.focal_alpha);
    s.get("lovasz", c.loss.lovasz);
  });
  r.section("optim", [&](Reader& s) {
    s.get("lr", c.optim.lr);
    s.get("beta1", c.optim.beta1);
    s.get("beta2", c.optim.beta2);
    s.get("eps", c.optim.eps);
    s.get("weight_decay", c.optim.weight_decay);
    s.get("warmup", c.optim.warmup);
    s.get("min_lr_ratio", c.optim.min_lr_ratio);
    s.get("grad_clip", c.optim.grad_clip);
  });
  r.section("stage1", [&](Reader& s) { read_stage(s, c.stage1); });
  r.section("stage2", [&](Reader& s) { read_stage(s, c.stage2); });
  r.get("ego_status", c.ego_status);
  std::string text;
  if (j.contains("hidden_mode")) {
    r.get("hidden_mode", text);
    c.hidden_mode = backbone::hidden_mode_from_name(text);
  }
  if (j.contains("mix")) {
    r.get("mix", text);
    c.mix = qa::Mix::parse(text);
  }
  if (j.contains("preset")) {
    r.get("preset", text);
    c.preset = preset_from_name(text);
  }
  r.get("max_answer_tokens", c.max_answer_tokens);
  r.finish();
  c.heads.channels = c.encoder.channels;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

// ---- data ----------------------------------------------------------------------

void Dataset::index() {
  by_id_.clear();
  for (std::size_t i = 0; i < scenes.size(); ++i) by_id_[scenes[i].scene_id] = i;
}

const worldgen::SceneSample& Dataset::scene(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw ConfigError("QA pair refers to unknown scene " + id);
  return scenes[it->second];
}

std::vector<worldgen::SceneSample> load_scenes(const std::filesystem::path& root, const std::string& split) {
  const auto m = worldgen::read_manifest(root);
  std::vector<worldgen::SceneSample> out;
  for (const auto& e : m.scenes) {
    if (split == "all" || e.split == split) out.push_back(worldgen::load_scene(worldgen::scene_dir(root, e), m.spec, m.class_names));
  }
  return out;
}

backbone::Vocabulary build_vocabulary(const occgrid::GridSpec& spec, const std::vector<qa::QaPair>& pairs) {
  std::vector<std::string> texts = qa::template_texts(spec);
  for (const auto& p : pairs) {
    texts.push_back(p.question);
    texts.push_back(p.answer);
  }
  return backbone::Vocabulary::build(backbone::Vocabulary::harvest_words(texts));
}

// ---- model ---------------------------------------------------------------------

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  return std::mt19937_64(seed ^ (tag * 0x9E3779B97F4A7C15ULL));
}

}  // namespace

Model::Model(const RunConfig& cfg, backbone::Vocabulary vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.lm.vocab = vocab_.size();
  cfg_.heads.channels = cfg_.encoder.channels;
  cfg_.validate();
  auto r1 = stream(cfg_.seed, 1), r2 = stream(cfg_.seed, 2), r3 = stream(cfg_.seed, 3),
       r4 = stream(cfg_.seed, 4), r5 = stream(cfg_.seed, 5), r6 = stream(cfg_.seed, 6),
       r7 = stream(cfg_.seed, 7);
  encoder_ = std::make_unique<projector::Encoder>(store_, cfg_.encoder, r1);
  projector_ = std::make_unique<projector::Projector>(store_, cfg_.projector_config(), r2);
  lm_ = std::make_unique<backbone::LanguageModel>(store_, cfg_.lm, r3);
  text_head_ = std::make_unique<heads::TextHead>(store_, cfg_.lm, lm_->embedding, cfg_.heads.tied_text_head, r4);
  lift_ = std::make_unique<heads::LiftLayer>(store_, cfg_.lm.width, cfg_.patch, cfg_.encoder.channels, r5);
  occ_flow_ = std::make_unique<heads::OccFlowHead>(store_, cfg_.heads, cfg_.grid.nz,
                                                   static_cast<int>(occgrid::default_class_names().size()), r6);
  planner_ = std::make_unique<heads::DiffusionHead>(store_, cfg_.heads, cfg_.lm.width, r7);
  hidden_logits_ = store_.add("heads.hidden_logits", Tensor({cfg_.lm.layers + 1}));
}

int Model::bev_height() const { return cfg_.grid.nx / cfg_.encoder.stride; }
int Model::bev_width() const { return cfg_.grid.ny / cfg_.encoder.stride; }
int Model::num_vision_tokens() const { return (bev_height() / cfg_.patch) * (bev_width() / cfg_.patch); }

namespace {
std::mutex g_bev_mu;
}

const Tensor& Model::bev(const worldgen::SceneSample& scene) const {
  if (!(scene.spec == cfg_.grid)) throw SpecMismatch("scene grid does not match the model grid");
  const auto key = std::make_pair(scene.scene_id, scene.rng_seed);
  {
    std::lock_guard<std::mutex> lock(g_bev_mu);
    auto it = bev_cache_.find(key);
    if (it != bev_cache_.end()) return it->second;
  }
  Tensor data = encoder_->encode(scene.sensor, scene.spec.nx, scene.spec.ny).data;
  std::lock_guard<std::mutex> lock(g_bev_mu);
  return bev_cache_.emplace(key, std::move(data)).first->second;
}

ad::Var Model::vision_tokens(const worldgen::SceneSample& scene) const {
  return projector_->forward(ad::constant(bev(scene)), bev_height(), bev_width());
}

EncodedExample Model::encode_example(const qa::QaPair& pair) const {
  EncodedExample ex;
  ex.ids.push_back(backbone::kBos);
  const auto q = vocab_.encode(pair.question);
  ex.ids.insert(ex.ids.end(), q.begin(), q.end());
  ex.answer_start = static_cast<int>(ex.ids.size());
  const auto a = vocab_.encode(pair.answer);
  ex.ids.insert(ex.ids.end(), a.begin(), a.end());
  ex.ids.push_back(backbone::kEos);
  return ex;
}

ad::Var Model::vision_states(const backbone::HiddenStates& states) const {
  const int n = num_vision_tokens();
  if (cfg_.hidden_mode == backbone::HiddenMode::kLast) {
    return backbone::extract_vision_states(states.layers.back(), n);
  }
  backbone::HiddenStates prefix;
  for (const auto& s : states.layers) prefix.layers.push_back(backbone::extract_vision_states(s, n));
  return backbone::combine_hidden(prefix, cfg_.hidden_mode, hidden_logits_);
}

heads::VoxelOutputs Model::voxel_outputs(const ad::Var& fstar) const {
  const ad::Var map = lift_->forward(fstar, bev_height(), bev_width());
  return occ_flow_->forward(map, bev_height(), bev_width(), cfg_.grid);
}

ad::Var Model::plan_condition(const ad::Var& fstar, const worldgen::SceneSample& scene) const {
  return planner_->condition(fstar, static_cast<int>(scene.command), scene.plan.ego_status, cfg_.ego_status);
}

ExampleLoss Model::example_loss(const worldgen::SceneSample& scene, const qa::QaPair* pair,
                                const losses::LossWeights& w, std::mt19937_64& rng) const {
  const bool text = pair != nullptr && w.llm != 0.0;
  const bool vision = w.occ != 0.0 || w.flow != 0.0 || w.action != 0.0;
  ExampleLoss out;
  if (!text && !vision) {
    out.total = ad::scalar(0.0);
    return out;
  }
  const ad::Var vis = vision_tokens(scene);
  const int n = vis.rows();
  EncodedExample ex;
  if (text) ex = encode_example(*pair);
  const backbone::HiddenStates hs = lm_->forward(vis, ex.ids);
  if (text) {
    const int T = static_cast<int>(ex.ids.size());
    const ad::Var h = ad::slice_rows(hs.layers.back(), n + ex.answer_start - 1, n + T - 1);
    const std::vector<int> targets(ex.ids.begin() + ex.answer_start, ex.ids.end());
    out.parts.llm = losses::loss_llm(text_head_->forward(h), targets,
                                     std::vector<std::uint8_t>(targets.size(), 1));
  }
  if (vision) {
    const ad::Var fstar = vision_states(hs);
    if (w.occ != 0.0 || w.flow != 0.0) {
      const heads::VoxelOutputs vo = voxel_outputs(fstar);
      if (w.occ != 0.0) out.parts.occ = losses::loss_occ(vo.occ_logits, scene.occ, w);
      if (w.flow != 0.0) out.parts.flow = losses::loss_flow(vo.flow, scene.flow, scene.occ, w);
    }
    if (w.action != 0.0) {
      std::uniform_int_distribution<int> step(1, planner_->schedule().T);
      std::normal_distribution<double> nd(0.0, 1.0);
      const int t = step(rng);
      std::vector<double> eps(heads::DiffusionHead::kPlanDims);
      for (double& e : eps) e = nd(rng);
      out.parts.action = planner_->loss(scene.plan, plan_condition(fstar, scene), t, eps);
    }
  }
  out.total = losses::loss_total(out.parts, w);
  return out;
}

Prediction Model::predict(const worldgen::SceneSample& scene, std::uint64_t seed) const {
  ad::NoGradGuard guard;
  const backbone::HiddenStates hs = lm_->forward(vision_tokens(scene), {});
  const ad::Var fstar = vision_states(hs);
  const heads::VoxelOutputs vo = voxel_outputs(fstar);
  const Tensor& logits = vo.occ_logits.value();
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(logits.rows()));
  const ConstMatMap L = logits.cmat();
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    Eigen::Index best;
    L.row(i).maxCoeff(&best);
    labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return {occgrid::OccupancyGrid(cfg_.grid, std::move(labels), scene.occ.class_names()),
          std::vector<double>(vo.flow.value().data.begin(), vo.flow.value().data.end()),
          planner_->sample(plan_condition(fstar, scene).value(), seed)};
}

std::string Model::answer(const worldgen::SceneSample& scene, const std::string& question) const {
  ad::NoGradGuard guard;
  std::vector<int> prompt = {backbone::kBos};
  const auto q = vocab_.encode(question);
  prompt.insert(prompt.end(), q.begin(), q.end());
  const Tensor vis = vision_tokens(scene).value();
  return vocab_.decode(heads::greedy_decode(*lm_, *text_head_, vis, prompt, cfg_.max_answer_tokens));
}

// ---- optimisation --------------------------------------------------------------

double AdamW::step(ParamStore& store, double lr) {
  ++t_;
  double sq = 0.0;
  for (const auto& [name, v] : store.entries()) {
    if (v.requires_grad() && v.has_grad()) sq += v.node()->grad.cmat().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_), bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& [name, v] : store.entries()) {
    if (!v.requires_grad() || !v.has_grad()) continue;
    auto& [m, s] = moments_[name];
    Tensor& value = v.node()->value;
    const Tensor& g = v.node()->grad;
    if (m.empty()) {
      m.assign(value.data.size(), 0.0);
      s.assign(value.data.size(), 0.0);
    }
    const double decay = value.rank() >= 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < value.data.size(); ++i) {
      const double gi = g.data[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
      s[i] = cfg_.beta2 * s[i] + (1 - cfg_.beta2) * gi * gi;
      value.data[i] -= lr * ((m[i] / bc1) / (std::sqrt(s[i] / bc2) + cfg_.eps) + decay * value.data[i]);
    }
  }
  return norm;
}

double learning_rate(const OptimConfig& o, double base, int step, int total) {
  if (o.warmup > 0 && step < o.warmup) return base * (step + 1) / o.warmup;
  const int span = std::max(1, total - o.warmup);
  const double p = std::clamp(static_cast<double>(step - o.warmup) / span, 0.0, 1.0);
  const double floor = o.min_lr_ratio * base;
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

json StepLog::to_json() const {
  json j = {{"stage", stage}, {"step", step}, {"lr", lr}, {"loss", loss}, {"grad_norm", grad_norm}};
  auto put = [&](const char* k, const std::optional<double>& v) { j[k] = v ? json(*v) : json(nullptr); };
  put("llm", llm);
  put("occ", occ);
  put("flow", flow);
  put("action", action);
  return j;
}

namespace {

TrainResult run_stage(Model& model, int stage, const Dataset& data, const std::vector<const qa::QaPair*>& examples,
                      const StageConfig& sc, const losses::LossWeights& w, const std::string& frozen,
                      std::ostream* log) {
  if (examples.empty()) throw ConfigError("stage " + std::to_string(stage) + " has no training examples");
  ParamStore& store = model.params();
  TrainResult result;
  result.frozen_hash_before = store.hash(frozen);
  const int steps = sc.steps > 0 ? sc.steps : static_cast<int>((examples.size() + sc.batch - 1) / sc.batch);
  auto rng = stream(model.config().seed, 100 + static_cast<std::uint64_t>(stage));
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();
  AdamW opt(model.config().optim);
  for (int step = 0; step < steps; ++step) {
    store.zero_grad();
    StepLog entry;
    entry.stage = stage;
    entry.step = step;
    double sums[4] = {0, 0, 0, 0};
    bool seen[4] = {false, false, false, false};
    for (int b = 0; b < sc.batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const qa::QaPair* pair = examples[order[cursor++]];
      const ExampleLoss el = model.example_loss(data.scene(pair->scene_id), pair, w, rng);
      const ad::Var scaled = ad::scale(el.total, 1.0 / sc.batch);
      scaled.backward();
      entry.loss += scaled.item();
      const ad::Var* parts[4] = {&el.parts.llm, &el.parts.occ, &el.parts.flow, &el.parts.action};
      for (int k = 0; k < 4; ++k) {
        if (parts[k]->defined()) {
          sums[k] += parts[k]->item() / sc.batch;
          seen[k] = true;
        }
      }
    }
    std::optional<double>* fields[4] = {&entry.llm, &entry.occ, &entry.flow, &entry.action};
    for (int k = 0; k < 4; ++k) {
      if (seen[k]) *fields[k] = sums[k];
    }
    entry.lr = learning_rate(model.config().optim, sc.lr, step, steps);
    entry.grad_norm = opt.step(store, entry.lr);
    if (log) *log << entry.to_json().dump() << '\n' << std::flush;
    result.log.push_back(entry);
  }
  store.zero_grad();
  result.frozen_hash_after = store.hash(frozen);
  return result;
}

}  // namespace

TrainResult stage1_train(Model& model, const Dataset& data, std::ostream* log) {
  std::vector<const qa::QaPair*> captions;
  for (const auto& p : data.pairs) {
    if (p.task == qa::Task::kCaption) captions.push_back(&p);
  }
  if (captions.empty()) throw ConfigError("stage 1 needs caption pairs");
  ParamStore& store = model.params();
  store.set_trainable("", false);
  store.set_trainable("projector.", true);
  losses::LossWeights w = model.config().loss;
  w.llm = 1.0;
  w.occ = w.flow = w.action = 0.0;
  TrainResult r = run_stage(model, 1, data, captions, model.config().stage1, w, "lm.", log);
  store.set_trainable("", true);
  store.set_trainable("encoder.", false);
  return r;
}

TrainResult stage2_train(Model& model, const Dataset& data, std::ostream* log) {
  std::vector<const qa::QaPair*> all;
  for (const auto& p : data.pairs) all.push_back(&p);
  ParamStore& store = model.params();
  store.set_trainable("", true);
  store.set_trainable("encoder.", false);
  return run_stage(model, 2, data, all, model.config().stage2, model.config().effective_weights(), "encoder.", log);
}

void check_freeze(const TrainResult& r, const std::string& what) {
  if (!r.freeze_held()) throw Error(what + " changed while frozen");
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");
constexpr char kMagic[8] = {'V', 'L', 'A', '4', 'D', 'C', 'K', 'P'};

struct CheckpointData {
  json meta;
  std::vector<double> payload;
};

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t meta_len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&meta_len), sizeof meta_len);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  std::string text(meta_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw FormatError("truncated checkpoint header");
  CheckpointData d;
  try {
    d.meta = json::parse(text);
  } catch (const json::parse_error&) {
    throw FormatError("corrupt checkpoint metadata");
  }
  std::uint64_t count = 0;
  for (const auto& p : d.meta.at("params")) count += p.at("numel").get<std::uint64_t>();
  d.payload.resize(count);
  in.read(reinterpret_cast<char*>(d.payload.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw FormatError("truncated checkpoint payload");
  return d;
}

void assign(Model& model, const CheckpointData& d) {
  const ParamStore& store = model.params();
  std::set<std::string> loaded;
  std::size_t offset = 0;
  for (const auto& p : d.meta.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const Shape shape = p.at("shape").get<Shape>();
    const auto n = static_cast<std::size_t>(p.at("numel").get<std::uint64_t>());
    if (!store.contains(name)) throw ShapeError("checkpoint parameter '" + name + "' does not exist in the model");
    const ad::Var& v = store.get(name);
    if (v.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(shape) + " in the checkpoint but " +
                       shape_str(v.shape()) + " in the model");
    }
    Tensor& value = v.node()->value;
    std::copy_n(d.payload.begin() + static_cast<std::ptrdiff_t>(offset), n, value.data.begin());
    offset += n;
    loaded.insert(name);
  }
  for (const auto& [name, v] : store.entries()) {
    if (!loaded.count(name)) throw ShapeError("parameter '" + name + "' is missing from the checkpoint");
  }
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  json meta;
  meta["format"] = "vla4d-checkpoint";
  meta["config"] = model.config().to_json();
  meta["vocab"] = model.vocab().tokens();
  json params = json::array();
  std::vector<double> payload;
  for (const auto& [name, v] : model.params().entries()) {
    params.push_back({{"name", name}, {"shape", v.shape()}, {"numel", v.value().numel()}});
    payload.insert(payload.end(), v.value().data.begin(), v.value().data.end());
  }
  meta["params"] = params;
  const std::string text = meta.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
  const CheckpointData d = read_checkpoint(path);
  const RunConfig cfg = RunConfig::from_json(d.meta.at("config"));
  auto model = std::make_unique<Model>(cfg, backbone::Vocabulary(d.meta.at("vocab").get<std::vector<std::string>>()));
  assign(*model, d);
  return model;
}

void load_parameters(Model& model, const std::filesystem::path& path) { assign(model, read_checkpoint(path)); }

// ---- evaluation ----------------------------------------------------------------

Evaluation evaluate(const Model& model, const std::vector<worldgen::SceneSample>& scenes,
                    const std::vector<qa::QaPair>& pairs, const EvalOptions& opt) {
  Evaluation ev;
  ev.predictions.resize(scenes.size(), Prediction{occgrid::OccupancyGrid(model.config().grid), {}, {}});
  parallel_for(scenes.size(), [&](std::size_t i) { ev.predictions[i] = model.predict(scenes[i], opt.seed + i); });

  metrics::MetricReport& r = ev.report;
  r.scenes = static_cast<long>(scenes.size());
  if (!scenes.empty()) {
    const auto rays = metrics::ray_fan(model.config().grid, opt.azimuths, opt.elevations);
    std::vector<const occgrid::OccupancyGrid*> preds, gts;
    metrics::MaveAccumulator mave;
    metrics::PlanAccumulator plans;
    double acc = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto& s = scenes[i];
      const auto& p = ev.predictions[i];
      preds.push_back(&p.occ);
      gts.push_back(&s.occ);
      mave.add(p.flow, s.flow, s.occ);
      plans.add(p.plan, s.plan, s.future.size() == occgrid::kPlanFrames ? &s.future : nullptr, opt.all_obstacles);
      acc += metrics::voxel_accuracy(p.occ, s.occ);
    }
    r.rayiou = metrics::ray_iou_multi(preds, gts, rays);
    r.mave = mave.result();
    r.occscore = metrics::occ_score(r.rayiou.mean, r.mave.mean);
    r.l2 = plans.l2();
    r.collision = plans.collision();
    r.voxel_accuracy = acc / static_cast<double>(scenes.size());
  }

  std::map<std::string, const worldgen::SceneSample*> by_id;
  for (const auto& s : scenes) by_id[s.scene_id] = &s;
  std::vector<qa::QaPair> refs;
  for (const auto& p : pairs) {
    if (opt.max_qa >= 0 && static_cast<int>(refs.size()) >= opt.max_qa) break;
    if (by_id.count(p.scene_id)) refs.push_back(p);
  }
  ev.answers.resize(refs.size());
  parallel_for(refs.size(),
               [&](std::size_t i) { ev.answers[i] = model.answer(*by_id.at(refs[i].scene_id), refs[i].question); });
  if (!refs.empty()) r.qa = metrics::qa_accuracy(refs, ev.answers, &by_id);
  return ev;
}

}  // namespace vla4d::harness
