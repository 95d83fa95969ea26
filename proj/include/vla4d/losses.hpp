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
#include <vector>

#include "vla4d/autograd.hpp"
#include "vla4d/occgrid.hpp"

namespace vla4d::losses {

struct LossWeights {
  double llm = 1.0;
  double occ = 1.0;
  double flow = 1.0;
  double action = 1.0;
  double flow_static = 0.01;
  double flow_dynamic = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  bool lovasz = true;

  void validate() const;
};

// Mean cross-entropy of logits [seq, V] against targets at positions where
// mask is nonzero. Returns zero when nothing is masked in.
ad::Var loss_llm(const ad::Var& logits, const std::vector<int>& targets,
                 const std::vector<std::uint8_t>& mask);

// Mean softmax focal loss -alpha (1 - p_y)^gamma log p_y over rows.
ad::Var focal_loss(const ad::Var& logits, const std::vector<std::uint8_t>& labels, double gamma,
                   double alpha);
// Lovász-softmax averaged over the classes present in `labels`.
ad::Var lovasz_softmax(const ad::Var& logits, const std::vector<std::uint8_t>& labels);
// Lovász extension gradient of the Jaccard loss for sorted ground truth.
std::vector<double> lovasz_grad(const std::vector<double>& gt_sorted);

ad::Var loss_occ(const ad::Var& logits, const occgrid::OccupancyGrid& gt, const LossWeights& w);

// Mean over occupied ground-truth voxels of weight * |pred - gt|_1, with
// weight flow_dynamic on dynamic voxels and flow_static elsewhere.
ad::Var loss_flow(const ad::Var& pred, const occgrid::FlowField& gt,
                  const occgrid::OccupancyGrid& gt_occ, const LossWeights& w);

// Mean absolute error over the 12 plan coordinates; pred is [1, 12] metres.
ad::Var loss_action(const ad::Var& pred, const occgrid::TrajectoryPlan& gt);

struct LossParts {
  ad::Var llm, occ, flow, action;  // undefined parts are skipped
};

// Weighted sum. Terms with zero weight are left out of the graph entirely,
// so they contribute exactly zero gradient.
ad::Var loss_total(const LossParts& parts, const LossWeights& w);

}  // namespace vla4d::losses
