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
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vla4d/backbone.hpp"
#include "vla4d/heads.hpp"
#include "vla4d/losses.hpp"
#include "vla4d/metrics.hpp"
#include "vla4d/params.hpp"
#include "vla4d/projector.hpp"
#include "vla4d/qaengine.hpp"
#include "vla4d/worldgen.hpp"

namespace vla4d::harness {

// Which heads receive a loss: text only (I), vision only (II) or both (III).
enum class Preset { kText, kVision, kJoint };
Preset preset_from_name(const std::string& name);  // text|vision|joint or I|II|III
const char* preset_name(Preset p);

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; matrices only
  int warmup = 0;
  double min_lr_ratio = 0.0;  // cosine floor as a fraction of lr
  double grad_clip = 1.0;     // global norm; <= 0 disables
};

struct StageConfig {
  int steps = 0;  // 0 -> one pass over the stage's examples
  int batch = 8;
  double lr = 3e-4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  occgrid::GridSpec grid = occgrid::GridSpec::desk();
  projector::EncoderConfig encoder;
  int patch = 8;
  int projector_heads = 1;
  backbone::LmConfig lm;  // vocab is taken from the vocabulary
  heads::HeadConfig heads;
  losses::LossWeights loss;
  OptimConfig optim;
  StageConfig stage1{0, 8, 1e-3};
  StageConfig stage2{2000, 8, 3e-4};
  bool ego_status = true;
  backbone::HiddenMode hidden_mode = backbone::HiddenMode::kLast;
  qa::Mix mix;
  Preset preset = Preset::kJoint;
  int max_answer_tokens = 160;

  void validate() const;
  // Loss weights after the preset switched heads off.
  losses::LossWeights effective_weights() const;
  projector::ProjectorConfig projector_config() const;

  nlohmann::json to_json() const;
  // Keys not listed in to_json() are rejected with ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

// Scenes plus the QA pairs that refer to them.
struct Dataset {
  std::vector<worldgen::SceneSample> scenes;
  std::vector<qa::QaPair> pairs;

  const worldgen::SceneSample& scene(const std::string& id) const;
  void index();

 private:
  std::unordered_map<std::string, std::size_t> by_id_;
};

// split is "train", "val" or "all" (manifest order).
std::vector<worldgen::SceneSample> load_scenes(const std::filesystem::path& root,
                                               const std::string& split);

// Vocabulary over the templates of `spec` and every text in `pairs`.
backbone::Vocabulary build_vocabulary(const occgrid::GridSpec& spec,
                                      const std::vector<qa::QaPair>& pairs);

struct Prediction {
  occgrid::OccupancyGrid occ;
  std::vector<double> flow;  // [nx * ny * nz * 2]
  occgrid::TrajectoryPlan plan;
};

struct ExampleLoss {
  ad::Var total;
  losses::LossParts parts;
};

// Text token layout of one QA example.
struct EncodedExample {
  std::vector<int> ids;  // BOS question answer EOS
  int answer_start = 0;  // index of the first answer token in ids
};

// Encoder, projector, language model and the four heads over one parameter
// store. Parameter prefixes: "encoder.", "projector.", "lm.", "heads.".
class Model {
 public:
  Model(const RunConfig& cfg, backbone::Vocabulary vocab);

  const RunConfig& config() const { return cfg_; }
  const backbone::Vocabulary& vocab() const { return vocab_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // Frozen encoder output, cached per scene.
  const Tensor& bev(const worldgen::SceneSample& scene) const;
  ad::Var vision_tokens(const worldgen::SceneSample& scene) const;
  int num_vision_tokens() const;
  int bev_height() const;
  int bev_width() const;

  EncodedExample encode_example(const qa::QaPair& pair) const;

  // Loss of one example under `w`; `pair` may be null when the text head is
  // off. Diffusion step and noise are drawn from `rng`.
  ExampleLoss example_loss(const worldgen::SceneSample& scene, const qa::QaPair* pair,
                           const losses::LossWeights& w, std::mt19937_64& rng) const;

  // F_v* from the hidden states of a forward pass.
  ad::Var vision_states(const backbone::HiddenStates& states) const;
  heads::VoxelOutputs voxel_outputs(const ad::Var& fstar) const;
  ad::Var plan_condition(const ad::Var& fstar, const worldgen::SceneSample& scene) const;

  Prediction predict(const worldgen::SceneSample& scene, std::uint64_t seed) const;
  std::string answer(const worldgen::SceneSample& scene, const std::string& question) const;

  projector::Encoder& encoder() { return *encoder_; }
  const projector::Projector& projector() const { return *projector_; }
  const backbone::LanguageModel& lm() const { return *lm_; }
  const heads::TextHead& text_head() const { return *text_head_; }
  const heads::LiftLayer& lift() const { return *lift_; }
  const heads::OccFlowHead& occ_flow() const { return *occ_flow_; }
  const heads::DiffusionHead& planner() const { return *planner_; }
  const ad::Var& hidden_logits() const { return hidden_logits_; }

 private:
  RunConfig cfg_;
  backbone::Vocabulary vocab_;
  ParamStore store_;
  std::unique_ptr<projector::Encoder> encoder_;
  std::unique_ptr<projector::Projector> projector_;
  std::unique_ptr<backbone::LanguageModel> lm_;
  std::unique_ptr<heads::TextHead> text_head_;
  std::unique_ptr<heads::LiftLayer> lift_;
  std::unique_ptr<heads::OccFlowHead> occ_flow_;
  std::unique_ptr<heads::DiffusionHead> planner_;
  ad::Var hidden_logits_;
  mutable std::map<std::pair<std::string, std::uint64_t>, Tensor> bev_cache_;
};

// Adam with decoupled weight decay over the trainable parameters of a store.
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}
  // Updates every parameter that requires and received a gradient. Returns
  // the gradient norm before clipping.
  double step(ParamStore& store, double lr);
  int steps() const { return t_; }

 private:
  OptimConfig cfg_;
  int t_ = 0;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Warmup then cosine decay to min_lr_ratio * base.
double learning_rate(const OptimConfig& o, double base, int step, int total);

struct StepLog {
  int stage = 0;
  int step = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> llm, occ, flow, action;
  double grad_norm = 0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  bool freeze_held() const { return frozen_hash_before == frozen_hash_after; }
};

// Stage 1: captions only; the projector is the sole trainable part.
TrainResult stage1_train(Model& model, const Dataset& data, std::ostream* log = nullptr);
// Stage 2: every example of the corpus; all parameters but the encoder
// train under the preset's loss weights.
TrainResult stage2_train(Model& model, const Dataset& data, std::ostream* log = nullptr);

// Throws Error when the frozen part changed.
void check_freeze(const TrainResult& r, const std::string& what);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);
// Loads parameters into an existing model. Throws ShapeError naming the
// first parameter whose shape differs.
void load_parameters(Model& model, const std::filesystem::path& path);
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EvalOptions {
  int azimuths = 512;
  int elevations = 32;
  bool all_obstacles = false;
  int max_qa = -1;  // < 0: every pair
  std::uint64_t seed = 0;
};

struct Evaluation {
  metrics::MetricReport report;
  std::vector<Prediction> predictions;
  std::vector<std::string> answers;
};

Evaluation evaluate(const Model& model, const std::vector<worldgen::SceneSample>& scenes,
                    const std::vector<qa::QaPair>& pairs, const EvalOptions& opt);

}  // namespace vla4d::harness
