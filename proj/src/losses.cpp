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
#include "vla4d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace vla4d::losses {

void LossWeights::validate() const {
  for (double v : {llm, occ, flow, action, flow_static, flow_dynamic, focal_gamma, focal_alpha}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and nonnegative");
  }
}

namespace {

// Row softmax of a [rows, cols] buffer.
std::vector<double> softmax(const Tensor& z) {
  const int r = z.rows(), c = z.cols();
  std::vector<double> s(z.data.begin(), z.data.end());
  for (int i = 0; i < r; ++i) {
    double* row = s.data() + static_cast<std::size_t>(i) * c;
    const double m = *std::max_element(row, row + c);
    double sum = 0;
    for (int j = 0; j < c; ++j) sum += (row[j] = std::exp(row[j] - m));
    for (int j = 0; j < c; ++j) row[j] /= sum;
  }
  return s;
}

void check_labels(const ad::Var& logits, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(logits.rows()) != n) {
    throw ShapeError(std::string(what) + ": " + std::to_string(logits.rows()) + " rows for " +
                     std::to_string(n) + " labels");
  }
}

}  // namespace

ad::Var loss_llm(const ad::Var& logits, const std::vector<int>& targets,
                 const std::vector<std::uint8_t>& mask) {
  check_labels(logits, targets.size(), "loss_llm");
  if (mask.size() != targets.size()) throw ShapeError("loss_llm: mask length differs from targets");
  const int r = logits.rows(), c = logits.cols();
  const auto s = std::make_shared<std::vector<double>>(softmax(logits.value()));
  int count = 0;
  double total = 0;
  for (int i = 0; i < r; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= c) throw ShapeError("loss_llm: target id out of range");
    ++count;
    const double* row = logits.value().data.data() + static_cast<std::size_t>(i) * c;
    const double m = *std::max_element(row, row + c);
    double z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - m);
    total += m + std::log(z) - row[targets[i]];
  }
  const double inv = count ? 1.0 / count : 0.0;
  return ad::make_op(Tensor({1}, total * inv), {logits}, [=](ad::Node& self) {
    ad::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_ref();
    const double go = self.grad.data[0] * inv;
    for (int i = 0; i < r; ++i) {
      if (!mask[i]) continue;
      const std::size_t o = static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) g.data[o + j] += go * ((*s)[o + j] - (j == targets[i] ? 1.0 : 0.0));
    }
  });
}

ad::Var focal_loss(const ad::Var& logits, const std::vector<std::uint8_t>& labels, double gamma,
                   double alpha) {
  check_labels(logits, labels.size(), "focal_loss");
  const int r = logits.rows(), c = logits.cols();
  const auto s = std::make_shared<std::vector<double>>(softmax(logits.value()));
  double total = 0;
  for (int i = 0; i < r; ++i) {
    if (labels[i] >= c) throw ShapeError("focal_loss: label out of range");
    const std::size_t o = static_cast<std::size_t>(i) * c;
    const double* row = logits.value().data.data() + o;
    const double m = *std::max_element(row, row + c);
    double z = 0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - m);
    const double logp = row[labels[i]] - m - std::log(z);
    const double p = (*s)[o + labels[i]];
    total += -alpha * std::pow(1.0 - p, gamma) * logp;
  }
  const double inv = r ? 1.0 / r : 0.0;
  return ad::make_op(Tensor({1}, total * inv), {logits}, [=](ad::Node& self) {
    ad::Node& par = *self.parents[0];
    if (!par.requires_grad) return;
    Tensor& g = par.grad_ref();
    const double go = self.grad.data[0] * inv;
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      const int y = labels[i];
      const double p = (*s)[o + y];
      const double logp = std::log(std::max(p, 1e-300));
      // d/dp of -alpha (1-p)^gamma log p, times p (chain through log-softmax).
      double dp = -alpha * std::pow(1.0 - p, gamma);
      if (gamma != 0.0 && p < 1.0) dp += alpha * gamma * std::pow(1.0 - p, gamma - 1.0) * logp * p;
      for (int j = 0; j < c; ++j) g.data[o + j] += go * dp * ((j == y ? 1.0 : 0.0) - (*s)[o + j]);
    }
  });
}

std::vector<double> lovasz_grad(const std::vector<double>& gt_sorted) {
  const std::size_t n = gt_sorted.size();
  const double gts = std::accumulate(gt_sorted.begin(), gt_sorted.end(), 0.0);
  std::vector<double> jac(n);
  double cum_fg = 0, cum_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_fg += gt_sorted[i];
    cum_bg += 1.0 - gt_sorted[i];
    const double inter = gts - cum_fg;
    const double uni = gts + cum_bg;
    jac[i] = 1.0 - inter / uni;
  }
  for (std::size_t i = n; i-- > 1;) jac[i] -= jac[i - 1];
  return jac;
}

ad::Var lovasz_softmax(const ad::Var& logits, const std::vector<std::uint8_t>& labels) {
  check_labels(logits, labels.size(), "lovasz_softmax");
  const int r = logits.rows(), c = logits.cols();
  const auto s = std::make_shared<std::vector<double>>(softmax(logits.value()));
  // d loss / d probability, accumulated over present classes.
  auto dprob = std::make_shared<std::vector<double>>(s->size(), 0.0);
  std::vector<int> present;
  for (int k = 0; k < c; ++k) {
    if (std::any_of(labels.begin(), labels.end(), [k](std::uint8_t l) { return l == k; })) present.push_back(k);
  }
  double total = 0;
  std::vector<int> order(static_cast<std::size_t>(r));
  std::vector<double> err(static_cast<std::size_t>(r)), gt_sorted(static_cast<std::size_t>(r));
  for (int k : present) {
    for (int i = 0; i < r; ++i) {
      const double fg = labels[i] == k ? 1.0 : 0.0;
      err[i] = std::abs(fg - (*s)[static_cast<std::size_t>(i) * c + k]);
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return err[a] > err[b]; });
    for (int i = 0; i < r; ++i) gt_sorted[i] = labels[order[i]] == k ? 1.0 : 0.0;
    const auto grad = lovasz_grad(gt_sorted);
    for (int i = 0; i < r; ++i) {
      const int v = order[i];
      total += err[v] * grad[i];
      const double sign = labels[v] == k ? -1.0 : 1.0;
      (*dprob)[static_cast<std::size_t>(v) * c + k] += sign * grad[i];
    }
  }
  const double inv = present.empty() ? 0.0 : 1.0 / static_cast<double>(present.size());
  return ad::make_op(Tensor({1}, total * inv), {logits}, [=](ad::Node& self) {
    ad::Node& par = *self.parents[0];
    if (!par.requires_grad) return;
    Tensor& g = par.grad_ref();
    const double go = self.grad.data[0] * inv;
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      double dot = 0;
      for (int j = 0; j < c; ++j) dot += (*dprob)[o + j] * (*s)[o + j];
      for (int j = 0; j < c; ++j) g.data[o + j] += go * (*s)[o + j] * ((*dprob)[o + j] - dot);
    }
  });
}

ad::Var loss_occ(const ad::Var& logits, const occgrid::OccupancyGrid& gt, const LossWeights& w) {
  if (logits.cols() != gt.num_classes()) throw ShapeError("loss_occ: class count mismatch");
  ad::Var l = focal_loss(logits, gt.labels(), w.focal_gamma, w.focal_alpha);
  if (w.lovasz) l = ad::add(l, lovasz_softmax(logits, gt.labels()));
  return l;
}

ad::Var loss_flow(const ad::Var& pred, const occgrid::FlowField& gt,
                  const occgrid::OccupancyGrid& gt_occ, const LossWeights& w) {
  const auto n = static_cast<std::size_t>(gt.spec().voxel_count());
  if (static_cast<std::size_t>(pred.value().numel()) != 2 * n || gt_occ.labels().size() != n) {
    throw ShapeError("loss_flow: prediction " + shape_str(pred.shape()) + " does not match the grid");
  }
  std::size_t occupied = 0;
  for (auto l : gt_occ.labels()) occupied += l != occgrid::kFree;
  Tensor weight({static_cast<int>(n), 2});
  if (occupied > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      if (gt_occ.labels()[i] == occgrid::kFree) continue;
      const double wi = (gt.dynamic_mask()[i] ? w.flow_dynamic : w.flow_static) / occupied;
      weight.data[2 * i] = weight.data[2 * i + 1] = wi;
    }
  }
  const ad::Var target = ad::constant(Tensor({static_cast<int>(n), 2}, gt.velocity()));
  const ad::Var diff = ad::abs(ad::sub(ad::reshape(pred, {static_cast<int>(n), 2}), target));
  return ad::sum_all(ad::mul(diff, ad::constant(std::move(weight))));
}

ad::Var loss_action(const ad::Var& pred, const occgrid::TrajectoryPlan& gt) {
  if (pred.value().numel() != 2 * occgrid::kPlanFrames) throw ShapeError("loss_action: plan must have 12 values");
  Tensor target({1, 2 * occgrid::kPlanFrames});
  for (int i = 0; i < occgrid::kPlanFrames; ++i) {
    target.data[2 * i] = gt.waypoints[i][0];
    target.data[2 * i + 1] = gt.waypoints[i][1];
  }
  return ad::mean_all(ad::abs(ad::sub(ad::reshape(pred, {1, 2 * occgrid::kPlanFrames}),
                                      ad::constant(std::move(target)))));
}

ad::Var loss_total(const LossParts& parts, const LossWeights& w) {
  ad::Var total;
  auto push = [&](const ad::Var& part, double lambda) {
    if (!part.defined() || lambda == 0.0) return;
    const ad::Var term = lambda == 1.0 ? part : ad::scale(part, lambda);
    total = total.defined() ? ad::add(total, term) : term;
  };
  push(parts.llm, w.llm);
  push(parts.occ, w.occ);
  push(parts.flow, w.flow);
  push(parts.action, w.action);
  return total.defined() ? total : ad::scalar(0.0);
}

}  // namespace vla4d::losses
