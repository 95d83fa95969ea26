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
#include <functional>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "vla4d/tensor.hpp"

// Minimal tape-free reverse-mode autodiff. Every op returns a Var whose node
// keeps its parents alive and knows how to push its gradient into them.
// Graphs are built per forward pass and released with the last Var.
namespace vla4d::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Allocates a zero gradient on first use.
  Tensor& grad_ref();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }
  bool defined() const { return node_ != nullptr; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.data.empty(); }
  // Gradient accumulated by the last backward(); zeros if none reached it.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  double item() const;

  // Seeds d(self)/d(self) = 1 for a scalar and propagates to every leaf
  // that requires a gradient.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// While alive, ops record no graph. Used for inference and evaluation.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Builds an op node. `backward` reads self.grad and accumulates into the
// parents that require gradients.
Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward);

Var constant(Tensor value);
Var scalar(double v);

// ---- dense algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
// x [m, in] * w [in, out] + b [out]; `b` may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Rank-2 view transposed to [cols, rows].
Var transpose(const Var& a);
// a [m, n] + b [n] broadcast over rows.
Var add_row(const Var& a, const Var& b);

// ---- pointwise -------------------------------------------------------------
Var gelu(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
// Subgradient 0 at 0.
Var abs(const Var& a);

// ---- reductions / normalization -------------------------------------------
Var softmax_rows(const Var& a);
Var rms_norm(const Var& x, const Var& weight, double eps = 1e-6);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mean_rows(const Var& a);

// ---- layout ----------------------------------------------------------------
Var reshape(const Var& a, Shape shape);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, int begin, int end);
// out.row(i) = a.row(index[i]); gradient scatters back.
Var gather_rows(const Var& a, const std::vector<int>& index);

// Sparse linear row combination: out.row(i) = sum_j w_ij a.row(j).
struct RowMix {
  int in_rows = 0;
  std::vector<std::vector<std::pair<int, double>>> terms;
};
Var row_mix(const Var& a, const RowMix& mix);

// sum_i w[i] * states[i]; w is [1, L] (or [L]) and states share a shape.
Var weighted_sum(const std::vector<Var>& states, const Var& w);

// ---- attention -------------------------------------------------------------
// Rotates pairs (2j, 2j+1) of every head of row t by (offset + t) *
// base^(-2j/dh), in place.
void apply_rope(RowMatrix& m, int heads, double base, int offset, bool inverse);

// Multi-head causal self-attention with rotary positions. q, k, v are
// [T, C]; position of row t is position_offset + t.
Var causal_attention(const Var& q, const Var& k, const Var& v, int heads,
                     double rope_base, int position_offset = 0);

// One query per group attending over its own `group` keys/values only.
// q [N, C]; k, v [N * group, C]; output [N, C].
Var grouped_query_attention(const Var& q, const Var& k, const Var& v,
                            int group, int heads);
// Attention weights of grouped_query_attention, [N * heads, group].
Tensor grouped_attention_weights(const Tensor& q, const Tensor& k, int group,
                                 int heads);

// ---- initialisation --------------------------------------------------------
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace vla4d::ad
