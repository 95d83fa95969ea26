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
#include <optional>
#include <random>
#include <vector>

#include "vla4d/autograd.hpp"
#include "vla4d/backbone.hpp"
#include "vla4d/occgrid.hpp"
#include "vla4d/params.hpp"

namespace vla4d::heads {

struct HeadConfig {
  int channels = 64;      // C of the lifted map; must equal nz * C'
  int occ_hidden = 32;
  int flow_hidden = 32;
  double flow_scale = 4.0;  // m/s per unit of flow MLP output
  int plan_hidden = 128;
  int command_dim = 8;
  int time_dim = 32;
  int diffusion_steps = 100;  // T
  int sampler_steps = 10;     // S
  double plan_scale = 10.0;   // metres per normalised trajectory unit
  bool tied_text_head = false;
};

// Per-token linear C_l -> K² C followed by the inverse of the projector's
// patch layout: [N, C_l] -> [H * W, C].
class LiftLayer {
 public:
  LiftLayer(ParamStore& store, int lm_width, int patch, int channels, std::mt19937_64& rng);
  ad::Var forward(const ad::Var& f_star, int H, int W) const;

  ad::Var w, b;

 private:
  int patch_, channels_;
};

// Bilinear resampling of an [H * W, C] map onto [nx * ny, C] with
// half-pixel centres (edge-clamped).
ad::RowMix bilinear_mix(int H, int W, int nx, int ny);

struct VoxelOutputs {
  ad::Var occ_logits;  // [nx * ny * nz, num_classes]
  ad::Var flow;        // [nx * ny * nz, 2], m/s
};

// Channel-to-height reshape (channel c = z * C' + c') and two parallel
// per-voxel MLPs over the C' features: class logits and 2D velocity.
class OccFlowHead {
 public:
  OccFlowHead(ParamStore& store, const HeadConfig& cfg, int nz, int num_classes,
              std::mt19937_64& rng);
  VoxelOutputs forward(const ad::Var& map, int H, int W, const occgrid::GridSpec& spec) const;
  int features_per_bin() const { return cfg_.channels / nz_; }

  ad::Var occ_w1, occ_b1, occ_w2, occ_b2;
  ad::Var flow_w1, flow_b1, flow_w2, flow_b2;

 private:
  HeadConfig cfg_;
  int nz_, classes_;
};

// Cosine noise schedule over T steps; index t in [1, T].
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t], beta[0] unused
  std::vector<double> alpha_bar;  // alpha_bar[0] = 1

  static DiffusionSchedule cosine(int T, double offset = 0.008);
  void validate() const;
};

// Noised sample at step t: sqrt(abar) x0 + sqrt(1 - abar) eps.
std::vector<double> diffuse(const DiffusionSchedule& s, const std::vector<double>& x0, int t,
                            const std::vector<double>& eps);

// Sinusoidal embedding of a diffusion step, [1, dim].
Tensor step_embedding(int t, int dim);

// Trajectory denoiser predicting the clean normalised plan from a noised one.
// Conditioning = mean-pooled vision states | command embedding | ego status.
class DiffusionHead {
 public:
  static constexpr int kPlanDims = 2 * occgrid::kPlanFrames;
  static constexpr int kEgoDims = 3;

  DiffusionHead(ParamStore& store, const HeadConfig& cfg, int lm_width, std::mt19937_64& rng);

  const DiffusionSchedule& schedule() const { return schedule_; }
  const HeadConfig& config() const { return cfg_; }
  int cond_dim() const { return lm_width_ + cfg_.command_dim + kEgoDims; }

  // Ego status is zeroed when absent or `use_ego` is false.
  ad::Var condition(const ad::Var& f_star, int command,
                    const std::optional<occgrid::EgoStatus>& ego, bool use_ego) const;
  // tau_t [1, 12] normalised -> predicted clean plan [1, 12] normalised.
  ad::Var denoise(const ad::Var& tau_t, int t, const ad::Var& cond) const;
  // Mean absolute error in metres between the denoised and true plan.
  ad::Var loss(const occgrid::TrajectoryPlan& gt, const ad::Var& cond, int t,
               const std::vector<double>& eps) const;
  // Deterministic sampler over S evenly spaced steps from seeded noise.
  occgrid::TrajectoryPlan sample(const Tensor& cond, std::uint64_t seed) const;

  std::vector<double> normalise(const occgrid::TrajectoryPlan& p) const;
  occgrid::TrajectoryPlan denormalise(const std::vector<double>& v) const;

  ad::Var command_embed;
  ad::Var w_in, b_in, w_out, b_out;
  std::vector<std::array<ad::Var, 4>> blocks;  // w1, b1, w2, b2

 private:
  HeadConfig cfg_;
  int lm_width_;
  DiffusionSchedule schedule_;
};

// Final norm plus vocabulary projection (untied, or tied to the embedding).
class TextHead {
 public:
  TextHead(ParamStore& store, const backbone::LmConfig& lm, const ad::Var& embedding, bool tied,
           std::mt19937_64& rng);
  ad::Var forward(const ad::Var& hidden) const;  // [seq, V]
  RowMatrix logits(const RowMatrix& hidden) const;

  ad::Var norm, w;

 private:
  ad::Var embedding_;
  bool tied_;
};

// Greedy autoregressive decoding with a KV cache. `prompt` usually starts
// with BOS; generation stops at EOS (not returned) or after max_new tokens.
std::vector<int> greedy_decode(const backbone::LanguageModel& lm, const TextHead& head,
                               const Tensor& vision, const std::vector<int>& prompt, int max_new);

}  // namespace vla4d::heads
