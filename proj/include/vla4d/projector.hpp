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

#include <random>
#include <vector>

#include "vla4d/autograd.hpp"
#include "vla4d/params.hpp"

namespace vla4d::projector {

// BEV feature map; row h * W + w of `data` holds the C channels of cell (h, w).
struct BevFeature {
  int H = 0;
  int W = 0;
  int C = 0;
  Tensor data;  // [H * W, C]
};

// Source cell (h * W + w) of each row in the patch layout. Row n * K² + i * K + j
// is cell (i, j) of patch n; patches are numbered row-major over the
// (H / K) x (W / K) patch grid. Throws ShapeError unless K divides H and W.
std::vector<int> patch_layout(int H, int W, int K);

// [H * W, C] -> [N * K², C] and back.
Tensor patchify(const Tensor& f, int H, int W, int K);
Tensor unpatchify(const Tensor& patches, int H, int W, int K);
ad::Var patchify(const ad::Var& f, int H, int W, int K);
ad::Var unpatchify(const ad::Var& patches, int H, int W, int K);

// Mean over each run of `group` consecutive rows: [N * group, C] -> [N, C].
ad::Var pool_patches(const ad::Var& patches, int group);

struct ProjectorConfig {
  int patch = 8;       // K
  int channels = 64;   // C of the BEV feature
  int lm_width = 128;  // C_l
  int heads = 1;
};

// patchify -> mean pool -> per-patch cross-attention (pooled query over the
// patch cells) -> linear to the LM width.
class Projector {
 public:
  Projector(ParamStore& store, const ProjectorConfig& cfg, std::mt19937_64& rng);

  const ProjectorConfig& config() const { return cfg_; }
  ad::Var cross_attend(const ad::Var& pooled, const ad::Var& patches) const;
  ad::Var forward(const ad::Var& bev, int H, int W) const;  // [N, C_l]
  // Attention of every patch query over its cells, [N * heads, K²].
  Tensor attention_weights(const Tensor& bev, int H, int W) const;

  ad::Var wq, wk, wv, w_out, b_out;

 private:
  ProjectorConfig cfg_;
};

struct EncoderConfig {
  int channels = 64;
  int stride = 1;  // BEV cells per grid column along each axis
  double position = 0.5;  // amplitude of the fixed positional code; 0 disables
};

// Frozen random 3x3 convolution over the two sensor channels followed by
// tanh, plus a fixed positional code, then optional average pooling. Stands
// in for a pretrained BEV encoder.
class Encoder {
 public:
  Encoder(ParamStore& store, const EncoderConfig& cfg, std::mt19937_64& rng);

  const EncoderConfig& config() const { return cfg_; }
  // sensor is [2, nx, ny]; output H = nx / stride, W = ny / stride.
  BevFeature encode(const std::vector<double>& sensor, int nx, int ny) const;

  ad::Var weight, bias;  // [C, 18], [C]

 private:
  EncoderConfig cfg_;
};

}  // namespace vla4d::projector
